use std::f64::consts::PI;

use super::{AudioSignal, DspError, Result};

/// Zero crossings of the interpolation kernel on each side.
const HALF_ZEROS: f64 = 16.0;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Rational-ratio resampling with a Hann-windowed sinc low-pass whose
/// cutoff is the lower of the two Nyquist frequencies.
pub fn resample(audio: &AudioSignal, target_rate: u32) -> Result<AudioSignal> {
    if audio.sample_rate == 0 || target_rate == 0 {
        return Err(DspError::Config("sample rates must be positive".into()));
    }
    if audio.sample_rate == target_rate {
        return Ok(audio.clone());
    }
    let g = gcd(audio.sample_rate as u64, target_rate as u64);
    let up = target_rate as u64 / g;
    let down = audio.sample_rate as u64 / g;
    let x = &audio.samples;
    let out_len = (x.len() as u64 * up).div_ceil(down) as usize;
    // cutoff relative to the input rate's Nyquist
    let fc = (up as f64 / down as f64).min(1.0);
    let half = HALF_ZEROS / fc;
    let taps = half.ceil() as isize;

    // The fractional offset of output n from its nearest input sample
    // cycles with period `up`, so each phase's kernel is computed once.
    let mut phases: Vec<Vec<f64>> = Vec::with_capacity(up as usize);
    for p in 0..up {
        let frac = p as f64 / up as f64;
        let mut h = Vec::with_capacity((2 * taps + 1) as usize);
        for j in -taps..=taps {
            let tau = frac - j as f64;
            let w = if tau.abs() < half {
                0.5 + 0.5 * (PI * tau / half).cos()
            } else {
                0.0
            };
            let arg = PI * fc * tau;
            let s = if arg == 0.0 { 1.0 } else { arg.sin() / arg };
            h.push(fc * s * w);
        }
        phases.push(h);
    }

    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len as u64 {
        let num = n * down;
        let base = (num / up) as isize;
        let h = &phases[(num % up) as usize];
        let mut acc = 0.0;
        for (idx, j) in (-taps..=taps).enumerate() {
            let k = base + j;
            if k >= 0 && (k as usize) < x.len() {
                acc += x[k as usize] * h[idx];
            }
        }
        out.push(acc);
    }
    Ok(AudioSignal::new(out, target_rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(f: f64, rate: u32, n: usize) -> AudioSignal {
        AudioSignal::new(
            (0..n)
                .map(|i| (2.0 * PI * f * i as f64 / rate as f64).sin())
                .collect(),
            rate,
        )
    }

    #[test]
    fn passband_tone_survives() {
        let y = resample(&tone(440.0, 16000, 16000), 10000).unwrap();
        assert_eq!(y.len(), 10000);
        let want = tone(440.0, 10000, 10000);
        for i in 200..9800 {
            assert!((y.samples[i] - want.samples[i]).abs() < 2e-3, "sample {i}");
        }
    }

    #[test]
    fn stopband_tone_is_removed() {
        // 7 kHz is above the 5 kHz output Nyquist
        let y = resample(&tone(7000.0, 16000, 16000), 10000).unwrap();
        let rms = (y.samples[200..9800].iter().map(|v| v * v).sum::<f64>() / 9600.0).sqrt();
        assert!(rms < 0.02, "{rms}");
    }

    #[test]
    fn identity_rate_is_a_copy() {
        let x = tone(100.0, 8000, 50);
        assert_eq!(resample(&x, 8000).unwrap(), x);
    }
}
