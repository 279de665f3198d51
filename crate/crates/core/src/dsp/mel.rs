use std::io::{Read, Write};

use nalgebra::DMatrix;

use super::stft::{magnitude, stft, StftConfig};
use super::{DspError, Result};

/// Dynamic-range clip applied before log compression.
pub const MEL_CLIP: f64 = 1e-5;
/// `ln(MEL_CLIP)`, the smallest value a log-mel entry can take.
pub const LOG_FLOOR: f64 = -11.512925464970229;

const MEL_FILE_VERSION: u32 = 1;

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters with centers uniformly spaced on the mel scale.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Filter center frequencies in Hz, strictly increasing.
    pub centers: Vec<f64>,
    /// `n_mels × n_bins` row-major.
    pub weights: Vec<f64>,
    pinv: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, cfg: &StftConfig, f_min: f64, f_max: f64) -> Result<Self> {
        cfg.validate()?;
        let nyquist = cfg.sample_rate as f64 / 2.0;
        if !(f_min >= 0.0 && f_min < f_max && f_max <= nyquist) || n_mels == 0 {
            return Err(DspError::Config(format!(
                "need 0 <= f_min ({f_min}) < f_max ({f_max}) <= {nyquist} and n_mels > 0"
            )));
        }
        let n_bins = cfg.bins();
        let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let points: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (lo, c, hi) = (points[m], points[m + 1], points[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let up = (f - lo) / (c - lo);
                let down = (hi - f) / (hi - c);
                weights[m * n_bins + k] = up.min(down).max(0.0);
            }
        }
        let pinv = pseudo_inverse(&weights, n_mels, n_bins)?;
        Ok(Self {
            n_mels,
            n_bins,
            f_min,
            f_max,
            centers: points[1..=n_mels].to_vec(),
            weights,
            pinv,
        })
    }

    /// 80 channels over 0–8 kHz.
    pub fn standard(cfg: &StftConfig) -> Result<Self> {
        Self::new(80, cfg, 0.0, 8000.0)
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    /// `frames × n_bins` magnitudes to `frames × n_mels` energies.
    pub fn apply(&self, mag: &[f64]) -> Vec<f64> {
        let frames = mag.len() / self.n_bins;
        let mut out = vec![0.0; frames * self.n_mels];
        for t in 0..frames {
            let frame = &mag[t * self.n_bins..(t + 1) * self.n_bins];
            for m in 0..self.n_mels {
                out[t * self.n_mels + m] = self.row(m).iter().zip(frame).map(|(w, x)| w * x).sum();
            }
        }
        out
    }

    /// Minimum-norm preimage `fbᵀ(fb·fbᵀ)⁻¹·y` of each mel frame, without
    /// clamping.
    pub fn pseudo_inverse_apply(&self, mel: &[f64]) -> Vec<f64> {
        let frames = mel.len() / self.n_mels;
        let mut out = vec![0.0; frames * self.n_bins];
        for t in 0..frames {
            let dst = &mut out[t * self.n_bins..(t + 1) * self.n_bins];
            for m in 0..self.n_mels {
                let y = mel[t * self.n_mels + m];
                if y != 0.0 {
                    for (d, p) in dst
                        .iter_mut()
                        .zip(&self.pinv[m * self.n_bins..(m + 1) * self.n_bins])
                    {
                        *d += y * p;
                    }
                }
            }
        }
        out
    }
}

/// Rows of `(fb·fbᵀ)⁻¹·fb`.
fn pseudo_inverse(weights: &[f64], n_mels: usize, n_bins: usize) -> Result<Vec<f64>> {
    let fb = DMatrix::from_row_slice(n_mels, n_bins, weights);
    let gram = &fb * fb.transpose();
    let chol = gram.cholesky().ok_or(DspError::Singular)?;
    let solved = chol.solve(&fb);
    let mut out = vec![0.0; n_mels * n_bins];
    for m in 0..n_mels {
        for k in 0..n_bins {
            out[m * n_bins + k] = solved[(m, k)];
        }
    }
    Ok(out)
}

/// Log-compressed mel spectrogram, `frames × channels` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl MelSpectrogram {
    pub fn new(frames: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * channels {
            return Err(DspError::Format(format!(
                "{} values do not fill {frames} × {channels}",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            channels,
            data,
        })
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.channels..(t + 1) * self.channels]
    }

    /// `{version u32, T u32, channels u32, T·channels f32}`, little-endian.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&MEL_FILE_VERSION.to_le_bytes())?;
        w.write_all(&(self.frames as u32).to_le_bytes())?;
        w.write_all(&(self.channels as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut h = [0u8; 12];
        r.read_exact(&mut h)?;
        let version = u32::from_le_bytes(h[0..4].try_into().unwrap());
        if version != MEL_FILE_VERSION {
            return Err(DspError::Format(format!(
                "unsupported mel file version {version}"
            )));
        }
        let frames = u32::from_le_bytes(h[4..8].try_into().unwrap()) as usize;
        let channels = u32::from_le_bytes(h[8..12].try_into().unwrap()) as usize;
        let mut raw = vec![0u8; frames * channels * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::new(frames, channels, data)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

/// `ln(max(fb · |STFT(x)|, 1e-5))`.
pub fn log_mel(samples: &[f64], cfg: &StftConfig, fb: &MelFilterbank) -> Result<MelSpectrogram> {
    let spec = stft(samples, cfg)?;
    let energies = fb.apply(&magnitude(&spec));
    let data = energies.into_iter().map(|e| e.max(MEL_CLIP).ln()).collect();
    MelSpectrogram::new(spec.frames, fb.n_mels, data)
}

/// Linear magnitudes from de-logged mel energies (`frames × n_mels`),
/// clamped at zero.
pub fn mel_to_linear(mel_energies: &[f64], fb: &MelFilterbank) -> Vec<f64> {
    let mut out = fb.pseudo_inverse_apply(mel_energies);
    out.iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn fb() -> MelFilterbank {
        MelFilterbank::standard(&StftConfig::default()).unwrap()
    }

    #[test]
    fn mel_scale_points() {
        assert_eq!(hz_to_mel(0.0), 0.0);
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
        assert!((LOG_FLOOR - MEL_CLIP.ln()).abs() < 1e-15);
    }

    #[test]
    fn filterbank_shape_and_structure() {
        let fb = fb();
        assert_eq!((fb.n_mels, fb.n_bins), (80, 513));
        assert!(fb.weights.iter().all(|&w| w >= 0.0));
        assert!(fb.centers.windows(2).all(|w| w[0] < w[1]));
        for m in 0..80 {
            // unimodal: non-decreasing up to the peak, non-increasing after
            let row = fb.row(m);
            let peak = (0..513).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert!(row[..=peak].windows(2).all(|w| w[0] <= w[1]));
            assert!(row[peak..].windows(2).all(|w| w[0] >= w[1]));
            assert!(row[peak] > 0.0);
        }
    }

    #[test]
    fn no_spectral_holes_between_first_and_last_center() {
        let fb = fb();
        let bin_hz = 16000.0 / 1024.0;
        for k in 0..513 {
            let f = k as f64 * bin_hz;
            if f >= fb.centers[0] && f <= fb.centers[79] {
                let total: f64 = (0..80).map(|m| fb.row(m)[k]).sum();
                assert!(total > 0.0, "hole at bin {k}");
            }
        }
    }

    #[test]
    fn silence_sits_on_the_floor() {
        let m = log_mel(&vec![0.0; 4000], &StftConfig::default(), &fb()).unwrap();
        assert!(m.data.iter().all(|&v| v == LOG_FLOOR));
        assert!((LOG_FLOOR + 11.5129).abs() < 1e-4);
    }

    #[test]
    fn loud_tone_lights_its_band() {
        let fb = fb();
        let f0 = 1000.0;
        let x: Vec<f64> = (0..16000)
            .map(|i| (2.0 * PI * f0 * i as f64 / 16000.0).sin())
            .collect();
        let m = log_mel(&x, &StftConfig::default(), &fb).unwrap();
        assert!(m.data.iter().all(|&v| v >= LOG_FLOOR));
        let band = (0..80)
            .min_by(|&a, &b| {
                (fb.centers[a] - f0)
                    .abs()
                    .total_cmp(&(fb.centers[b] - f0).abs())
            })
            .unwrap();
        let frame = m.frame(30);
        let mut sorted = frame.to_vec();
        sorted.sort_by(f64::total_cmp);
        assert!(frame[band] - sorted[40] > 3.0);
    }

    #[test]
    fn pseudo_inverse_round_trip() {
        let fb = fb();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m: Vec<f64> = (0..3 * 513).map(|_| rng.random_range(0.0..1.0)).collect();
        let y = fb.apply(&m);
        let back = fb.apply(&fb.pseudo_inverse_apply(&y));
        for (a, b) in y.iter().zip(&back) {
            assert!((a - b).abs() / a.abs().max(1e-12) < 1e-6);
        }
        assert!(mel_to_linear(&vec![0.0; 160], &fb)
            .iter()
            .all(|&v| v == 0.0));
        assert!(mel_to_linear(&y, &fb).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn mel_file_round_trip() {
        let m = MelSpectrogram::new(2, 3, vec![1.5, -11.5, 0.25, 3.0, 2.0, -1.0]).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 12 + 24);
        assert_eq!(MelSpectrogram::read_from(&mut buf.as_slice()).unwrap(), m);
    }
}
