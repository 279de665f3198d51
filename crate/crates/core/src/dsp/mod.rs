//! Audio feature pipeline: peak normalization, STFT, mel filterbank and
//! log compression, plus the inverse path (mel pseudo-inverse and
//! Griffin–Lim phase reconstruction) used as the vocoder.
//!
//! Everything here runs in 64-bit regardless of the model precision.

mod griffin_lim;
mod mel;
mod resample;
mod stft;
pub mod wav;

pub use griffin_lim::{griffin_lim, griffin_lim_raw, spectral_convergence, DEFAULT_GL_ITERS};
pub use mel::{
    hz_to_mel, log_mel, mel_to_hz, mel_to_linear, MelFilterbank, MelSpectrogram, LOG_FLOOR,
    MEL_CLIP,
};
pub use resample::resample;
pub use stft::{hann_window, istft, magnitude, stft, Spectrogram, StftConfig};

#[derive(Debug, thiserror::Error)]
pub enum DspError {
    #[error("empty audio buffer")]
    Empty,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("mel filterbank gram matrix is singular")]
    Singular,
    #[error("overlap-add window sum vanishes at sample {0}")]
    WindowSum(usize),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Wav(#[from] hound::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DspError>;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Divides by the peak absolute sample. Silence is returned unchanged.
pub fn normalize(audio: &AudioSignal) -> Result<AudioSignal> {
    if audio.is_empty() {
        return Err(DspError::Empty);
    }
    let peak = audio.peak();
    if peak == 0.0 {
        return Ok(audio.clone());
    }
    Ok(AudioSignal {
        samples: audio.samples.iter().map(|x| x / peak).collect(),
        sample_rate: audio.sample_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_scales_by_peak() {
        let a = normalize(&AudioSignal::new(vec![0.5, -0.25], 16000)).unwrap();
        assert_eq!(a.samples, vec![1.0, -0.5]);
        let z = normalize(&AudioSignal::new(vec![0.0; 4], 16000)).unwrap();
        assert_eq!(z.samples, vec![0.0; 4]);
        assert!(matches!(
            normalize(&AudioSignal::new(vec![], 16000)),
            Err(DspError::Empty)
        ));
    }

    proptest! {
        #[test]
        fn normalized_peak_is_one(v in proptest::collection::vec(-5.0f64..5.0, 1..200)) {
            prop_assume!(v.iter().any(|x| *x != 0.0));
            let a = normalize(&AudioSignal::new(v, 16000)).unwrap();
            prop_assert_eq!(a.peak(), 1.0);
        }
    }
}
