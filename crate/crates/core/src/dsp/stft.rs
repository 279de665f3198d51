use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{DspError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub win_length: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    /// 64 ms window, 16 ms hop at 16 kHz.
    fn default() -> Self {
        Self {
            fft_size: 1024,
            win_length: 1024,
            hop: 256,
            sample_rate: 16000,
        }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.win_length || self.win_length > self.fft_size {
            return Err(DspError::Config(format!(
                "need 0 < hop ({}) <= win_length ({}) <= fft_size ({})",
                self.hop, self.win_length, self.fft_size
            )));
        }
        if !self.fft_size.is_multiple_of(2) {
            return Err(DspError::Config(format!(
                "fft_size {} must be even",
                self.fft_size
            )));
        }
        Ok(())
    }

    /// Frame count under center padding.
    pub fn frames_for(&self, len: usize) -> usize {
        1 + len / self.hop
    }

    /// Periodic Hann window of `win_length`, centered in `fft_size`.
    pub fn window(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.fft_size];
        let off = (self.fft_size - self.win_length) / 2;
        for (i, v) in hann_window(self.win_length).into_iter().enumerate() {
            w[off + i] = v;
        }
        w
    }
}

pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// One-sided complex spectrogram, `frames × bins` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            frames,
            bins,
            data: vec![Complex64::new(0.0, 0.0); frames * bins],
        }
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }
}

/// `|X|` of every bin, `frames × bins` row-major.
pub fn magnitude(spec: &Spectrogram) -> Vec<f64> {
    spec.data.iter().map(|c| c.norm()).collect()
}

fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Hann-windowed short-time Fourier transform with reflect padding of
/// `fft_size / 2` on both ends.
pub fn stft(samples: &[f64], cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(DspError::Empty);
    }
    let n = cfg.fft_size;
    let pad = (n / 2) as isize;
    let frames = cfg.frames_for(samples.len());
    let bins = cfg.bins();
    let window = cfg.window();
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut out = Spectrogram::zeros(frames, bins);
    for t in 0..frames {
        let start = (t * cfg.hop) as isize - pad;
        for (k, b) in buf.iter_mut().enumerate() {
            let x = samples[reflect_index(start + k as isize, samples.len())];
            *b = Complex64::new(x * window[k], 0.0);
        }
        fft.process(&mut buf);
        out.data[t * bins..(t + 1) * bins].copy_from_slice(&buf[..bins]);
    }
    Ok(out)
}

/// Inverse of [`stft`] by windowed overlap-add, normalized by the summed
/// squared window. Returns `length` samples, defaulting to
/// `(frames − 1) · hop`.
pub fn istft(spec: &Spectrogram, cfg: &StftConfig, length: Option<usize>) -> Result<Vec<f64>> {
    cfg.validate()?;
    if spec.frames == 0 {
        return Err(DspError::Config("istft needs at least one frame".into()));
    }
    if spec.bins != cfg.bins() {
        return Err(DspError::Config(format!(
            "expected {} bins, got {}",
            cfg.bins(),
            spec.bins
        )));
    }
    let n = cfg.fft_size;
    let window = cfg.window();
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let total = (spec.frames - 1) * cfg.hop + n;
    let mut signal = vec![0.0; total];
    let mut wsum = vec![0.0; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..spec.frames {
        let f = spec.frame(t);
        buf[..spec.bins].copy_from_slice(f);
        for k in 1..n / 2 {
            buf[n - k] = f[k].conj();
        }
        ifft.process(&mut buf);
        let off = t * cfg.hop;
        for k in 0..n {
            signal[off + k] += buf[k].re / n as f64 * window[k];
            wsum[off + k] += window[k] * window[k];
        }
    }
    let len = length.unwrap_or((spec.frames - 1) * cfg.hop);
    let start = n / 2;
    if start + len > total {
        return Err(DspError::Config(format!(
            "requested length {len} exceeds the {} samples covered by {} frames",
            total - start,
            spec.frames
        )));
    }
    let mut out = Vec::with_capacity(len);
    for i in start..start + len {
        if wsum[i] < 1e-10 {
            return Err(DspError::WindowSum(i - start));
        }
        out.push(signal[i] / wsum[i]);
    }
    Ok(out)
}
