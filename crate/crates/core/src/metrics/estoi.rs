use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{MetricsError, Result};
use crate::dsp::{resample, AudioSignal};

const EPS: f64 = f64::EPSILON;

/// Fixed analysis constants for the extended intelligibility measure.
#[derive(Clone, Debug, PartialEq)]
pub struct EstoiConfig {
    pub sample_rate: u32,
    pub frame_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub bands: usize,
    pub min_freq: f64,
    pub segment: usize,
    pub dyn_range_db: f64,
}

impl Default for EstoiConfig {
    fn default() -> Self {
        Self {
            sample_rate: 10000,
            frame_len: 256,
            hop: 128,
            fft_size: 512,
            bands: 15,
            min_freq: 150.0,
            segment: 30,
            dyn_range_db: 40.0,
        }
    }
}

impl EstoiConfig {
    /// `(low, high)` FFT bin index of each third-octave band, edges snapped
    /// to the nearest bin. A band covers `low..high`.
    pub fn band_bins(&self) -> Vec<(usize, usize)> {
        let n_bins = self.fft_size / 2 + 1;
        let bin_hz = self.sample_rate as f64 / self.fft_size as f64;
        let nearest = |f: f64| {
            (0..n_bins)
                .min_by(|&a, &b| {
                    ((a as f64 * bin_hz - f).abs()).total_cmp(&(b as f64 * bin_hz - f).abs())
                })
                .unwrap()
        };
        (0..self.bands)
            .map(|k| {
                let k = k as f64;
                let lo = self.min_freq * 2f64.powf((2.0 * k - 1.0) / 6.0);
                let hi = self.min_freq * 2f64.powf((2.0 * k + 1.0) / 6.0);
                (nearest(lo), nearest(hi))
            })
            .collect()
    }

    /// Unsnapped band edges in Hz.
    pub fn band_edges(&self) -> Vec<(f64, f64)> {
        (0..self.bands)
            .map(|k| {
                let k = k as f64;
                (
                    self.min_freq * 2f64.powf((2.0 * k - 1.0) / 6.0),
                    self.min_freq * 2f64.powf((2.0 * k + 1.0) / 6.0),
                )
            })
            .collect()
    }

    /// Shortest non-silent duration in seconds that yields one full
    /// segment.
    pub fn min_duration(&self) -> f64 {
        (self.frame_len + (self.segment - 1) * self.hop + 1) as f64 / self.sample_rate as f64
    }

    fn window(&self) -> Vec<f64> {
        // Hann of length n + 2 with both zero endpoints dropped
        let n = self.frame_len;
        (1..=n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n + 1) as f64).cos())
            .collect()
    }

    fn frame_starts(&self, len: usize) -> Vec<usize> {
        if len <= self.frame_len {
            return Vec::new();
        }
        (0..len - self.frame_len).step_by(self.hop).collect()
    }
}

/// Drops frames of both signals whose clean-signal energy lies more than
/// the dynamic range below the loudest clean frame, then overlap-adds the
/// survivors.
fn remove_silent_frames(x: &[f64], y: &[f64], cfg: &EstoiConfig) -> (Vec<f64>, Vec<f64>) {
    let w = cfg.window();
    let starts = cfg.frame_starts(x.len());
    if starts.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let frame = |s: &[f64], at: usize| -> Vec<f64> {
        (0..cfg.frame_len).map(|k| s[at + k] * w[k]).collect()
    };
    let energies: Vec<f64> = starts
        .iter()
        .map(|&at| 20.0 * (frame(x, at).iter().map(|v| v * v).sum::<f64>().sqrt() + EPS).log10())
        .collect();
    let peak = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energies)
        .filter(|(_, &e)| peak - cfg.dyn_range_db - e < 0.0)
        .map(|(&s, _)| s)
        .collect();
    let len = (kept.len().saturating_sub(1)) * cfg.hop + cfg.frame_len;
    let mut xs = vec![0.0; len];
    let mut ys = vec![0.0; len];
    for (i, &at) in kept.iter().enumerate() {
        let (fx, fy) = (frame(x, at), frame(y, at));
        for k in 0..cfg.frame_len {
            xs[i * cfg.hop + k] += fx[k];
            ys[i * cfg.hop + k] += fy[k];
        }
    }
    (xs, ys)
}

/// Third-octave band envelopes, `bands × frames` row-major.
fn band_envelopes(s: &[f64], cfg: &EstoiConfig, bands: &[(usize, usize)]) -> (Vec<f64>, usize) {
    let w = cfg.window();
    let starts = cfg.frame_starts(s.len());
    let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
    let frames = starts.len();
    let mut env = vec![0.0; bands.len() * frames];
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    for (t, &at) in starts.iter().enumerate() {
        buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
        for k in 0..cfg.frame_len {
            buf[k] = Complex64::new(s[at + k] * w[k], 0.0);
        }
        fft.process(&mut buf);
        for (b, &(lo, hi)) in bands.iter().enumerate() {
            let power: f64 = buf[lo..hi].iter().map(|c| c.norm_sqr()).sum();
            env[b * frames + t] = power.sqrt();
        }
    }
    (env, frames)
}

/// Centers and unit-normalizes `n` vectors of length `len` whose
/// elements sit at `idx(vector, element)`.
fn normalize_vectors(m: &mut [f64], n: usize, len: usize, idx: impl Fn(usize, usize) -> usize) {
    for v in 0..n {
        let mean = (0..len).map(|e| m[idx(v, e)]).sum::<f64>() / len as f64;
        for e in 0..len {
            m[idx(v, e)] -= mean;
        }
        let norm = (0..len).map(|e| m[idx(v, e)].powi(2)).sum::<f64>().sqrt();
        if norm > EPS {
            for e in 0..len {
                m[idx(v, e)] /= norm;
            }
        }
    }
}

/// Extended short-time objective intelligibility of `degraded` against
/// `clean`. Both must share a sample rate and be time-aligned.
pub fn estoi(clean: &AudioSignal, degraded: &AudioSignal) -> Result<f64> {
    estoi_with(clean, degraded, &EstoiConfig::default())
}

pub fn estoi_with(clean: &AudioSignal, degraded: &AudioSignal, cfg: &EstoiConfig) -> Result<f64> {
    if clean.sample_rate != degraded.sample_rate {
        return Err(MetricsError::SampleRate(
            clean.sample_rate,
            degraded.sample_rate,
        ));
    }
    if clean.len() != degraded.len() {
        return Err(MetricsError::Length(clean.len(), degraded.len()));
    }
    let x = resample(clean, cfg.sample_rate)?;
    let y = resample(degraded, cfg.sample_rate)?;
    let (xs, ys) = remove_silent_frames(&x.samples, &y.samples, cfg);
    let bands = cfg.band_bins();
    let (xe, frames) = band_envelopes(&xs, cfg, &bands);
    let (ye, _) = band_envelopes(&ys, cfg, &bands);
    let n = cfg.segment;
    if frames < n {
        return Err(MetricsError::TooShort {
            min_seconds: cfg.min_duration(),
        });
    }
    let nb = bands.len();
    let segments = frames - n + 1;
    let mut total = 0.0;
    let mut xs_seg = vec![0.0; nb * n];
    let mut ys_seg = vec![0.0; nb * n];
    for m in 0..segments {
        for b in 0..nb {
            xs_seg[b * n..(b + 1) * n].copy_from_slice(&xe[b * frames + m..b * frames + m + n]);
            ys_seg[b * n..(b + 1) * n].copy_from_slice(&ye[b * frames + m..b * frames + m + n]);
        }
        for seg in [&mut xs_seg, &mut ys_seg] {
            normalize_vectors(seg, nb, n, |b, t| b * n + t);
            normalize_vectors(seg, n, nb, |t, b| b * n + t);
        }
        total += xs_seg.iter().zip(&ys_seg).map(|(a, b)| a * b).sum::<f64>() / n as f64;
    }
    Ok(total / segments as f64)
}
