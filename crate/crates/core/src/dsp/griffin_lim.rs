use rustfft::num_complex::Complex64;

use super::stft::{istft, stft, Spectrogram, StftConfig};
use super::{normalize, AudioSignal, DspError, Result};

pub const DEFAULT_GL_ITERS: usize = 60;

fn with_phase(mag: &[f64], phase: &Spectrogram) -> Spectrogram {
    let mut out = phase.clone();
    for (o, (&m, p)) in out.data.iter_mut().zip(mag.iter().zip(&phase.data)) {
        let n = p.norm();
        *o = if n > 0.0 {
            p * (m / n)
        } else {
            Complex64::new(m, 0.0)
        };
    }
    out
}

/// Griffin–Lim without the final peak normalization. Starts from zero
/// phase; each iteration is one inverse transform followed by one phase
/// re-estimate, and the signal of the last inverse transform is returned.
pub fn griffin_lim_raw(
    mag: &[f64],
    frames: usize,
    cfg: &StftConfig,
    iters: usize,
    length: Option<usize>,
) -> Result<Vec<f64>> {
    if iters < 1 {
        return Err(DspError::Config(
            "griffin_lim needs at least one iteration".into(),
        ));
    }
    let bins = cfg.bins();
    if mag.len() != frames * bins || frames == 0 {
        return Err(DspError::Config(format!(
            "magnitude has {} values, expected {frames} × {bins}",
            mag.len()
        )));
    }
    if mag.iter().any(|&m| m < 0.0 || !m.is_finite()) {
        return Err(DspError::Config(
            "magnitude must be finite and non-negative".into(),
        ));
    }
    let len = length.unwrap_or((frames - 1) * cfg.hop);
    let mut phase = Spectrogram {
        frames,
        bins,
        data: vec![Complex64::new(1.0, 0.0); frames * bins],
    };
    let mut signal = Vec::new();
    for it in 0..iters {
        signal = istft(&with_phase(mag, &phase), cfg, Some(len))?;
        if it + 1 < iters {
            if signal.is_empty() {
                break;
            }
            phase = stft(&signal, cfg)?;
            if phase.frames != frames {
                return Err(DspError::Config(format!(
                    "length {len} yields {} frames, magnitude has {frames}",
                    phase.frames
                )));
            }
        }
    }
    Ok(signal)
}

/// Phase reconstruction from a magnitude spectrogram, peak-normalized.
/// An all-zero result is returned as is.
pub fn griffin_lim(
    mag: &[f64],
    frames: usize,
    cfg: &StftConfig,
    iters: usize,
    length: Option<usize>,
) -> Result<AudioSignal> {
    let raw = AudioSignal::new(
        griffin_lim_raw(mag, frames, cfg, iters, length)?,
        cfg.sample_rate,
    );
    if raw.is_empty() {
        return Ok(raw);
    }
    normalize(&raw)
}

/// `‖|STFT(x)| − M‖_F / ‖M‖_F`.
pub fn spectral_convergence(signal: &[f64], mag: &[f64], cfg: &StftConfig) -> Result<f64> {
    let spec = stft(signal, cfg)?;
    if spec.data.len() != mag.len() {
        return Err(DspError::Config(
            "signal and magnitude frame counts differ".into(),
        ));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (c, &m) in spec.data.iter().zip(mag) {
        num += (c.norm() - m).powi(2);
        den += m * m;
    }
    Ok((num / den).sqrt())
}
