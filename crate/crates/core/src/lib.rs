//! Silent-video-to-speech synthesis: a video encoder and attention decoder
//! predicting log-mel frames, trained with a from-scratch reverse-mode
//! autodiff tape, and vocoded with Griffin–Lim.

// `!(x > 0.0)` checks reject NaN on purpose; `as f64` casts matter under `f32`.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::unnecessary_cast,
    clippy::iter_cloned_collect
)]

pub mod cli;
pub mod data;
pub mod dsp;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod train;

use std::path::PathBuf;

/// Process exit statuses shared by the command line and the C interface.
pub mod exit {
    pub const OK: i32 = 0;
    /// Anything not covered below.
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
    pub const NON_FINITE: i32 = 4;
    /// Inference ran into the step cap under `--strict`.
    pub const MAX_STEPS: i32 = 5;
    pub const GRADCHECK: i32 = 6;
}

/// Any failure of the library, tagged with the exit status it maps to.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Dsp(#[from] dsp::DspError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("decoding hit the step cap without detecting the end of the clip")]
    MaxSteps,
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("{0}")]
    Strict(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use tensor::TensorError as T;
        match self {
            Error::Io { .. } | Error::Strict(_) => exit::IO,
            Error::Tensor(T::Io(_)) | Error::Dsp(dsp::DspError::Io(_)) => exit::IO,
            Error::Model(model::ModelError::Tensor(T::Io(_))) => exit::IO,
            Error::Data(d) if d.is_io() => exit::IO,
            Error::Train(t) if t.is_io() => exit::IO,
            Error::Train(t) if t.is_non_finite() => exit::NON_FINITE,
            Error::NonFinite(_) => exit::NON_FINITE,
            Error::MaxSteps => exit::MAX_STEPS,
            Error::GradCheck(_) => exit::GRADCHECK,
            Error::Config(_)
            | Error::Model(_)
            | Error::Data(_)
            | Error::Train(_)
            | Error::Dsp(_) => exit::CONFIG,
            Error::Tensor(_) | Error::Metrics(_) => exit::FAILURE,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
