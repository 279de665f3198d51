//! Dataset plumbing: manifest and frame container formats, the synthetic
//! corpus generator, clip preprocessing, augmentation and batching.

mod batch;
mod container;
mod manifest;
mod preprocess;
mod synth;

pub use batch::{batch_collate, masked_mse, Batch};
pub use container::{VideoClip, CONTAINER_VERSION};
pub use manifest::{load_manifest, parse_manifest, write_manifest, ClipRecord, Manifest};
pub use preprocess::{
    audio_features, augment_hflip, frames_tensor, hflip, preprocess_clip, preprocess_with,
    PreparedClip, PreprocessConfig,
};
pub use synth::{
    decode_audio_symbols, decode_video_symbols, synth_clips, synth_generate, SynthClip, SynthSpec,
    Tone,
};

use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("frame container: {0}")]
    Container(String),
    #[error("audio: {0}")]
    Dsp(String),
    #[error("invalid data configuration: {0}")]
    Config(String),
    #[error("clip `{id}`: {source}")]
    Clip {
        id: String,
        #[source]
        source: Box<DataError>,
    },
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io {
            path: PathBuf::new(),
            source: e,
        }
    }
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// True when the root cause is a filesystem failure.
    pub fn is_io(&self) -> bool {
        match self {
            DataError::Io { .. } => true,
            DataError::Clip { source, .. } => source.is_io(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, DataError>;
