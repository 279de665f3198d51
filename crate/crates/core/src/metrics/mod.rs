//! Objective scores: intelligibility (ESTOI), mel-domain squared error and
//! word/character error rates.

mod edit;
mod estoi;
pub mod report;

pub use edit::{edit_distance, tokenize, wer_cer, EditOps, Unit};
pub use estoi::{estoi, estoi_with, EstoiConfig};
pub use report::{write_report, EvalRecord, EvalStatus, REPORT_HEADER};

use crate::dsp::{DspError, MelSpectrogram};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("signal too short after silence removal; need at least {min_seconds:.4} s of non-silent audio")]
    TooShort { min_seconds: f64 },
    #[error("sample rates differ: {0} Hz vs {1} Hz")]
    SampleRate(u32, u32),
    #[error("signals are not time-aligned: {0} vs {1} samples")]
    Length(usize, usize),
    #[error("reference transcript is empty")]
    EmptyReference,
    #[error("mel channel counts differ: {0} vs {1}")]
    ChannelMismatch(usize, usize),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Mean squared difference of two mel spectrograms. Unequal frame counts
/// are compared over the shorter length and flagged in `truncated`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MelMse {
    pub value: f64,
    pub frames: usize,
    pub truncated: bool,
}

pub fn mel_mse(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<MelMse> {
    if a.channels != b.channels {
        return Err(MetricsError::ChannelMismatch(a.channels, b.channels));
    }
    let frames = a.frames.min(b.frames);
    let n = frames * a.channels;
    let value = if n == 0 {
        0.0
    } else {
        a.data[..n]
            .iter()
            .zip(&b.data[..n])
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / n as f64
    };
    Ok(MelMse {
        value,
        frames,
        truncated: a.frames != b.frames,
    })
}
