//! Fine-tuning a small byte-level transformer with noise injected into its
//! token embeddings, and measuring what that does.
//!
//! The pieces, bottom up: [`tensor`] (f64 tensors with a reverse-mode tape),
//! [`model`] (decoder-only transformer), [`noise`] (additive and symmetric
//! embedding noise), [`data`] (instruction JSONL, byte tokenizer, loss
//! masks), [`trainer`] (training loops, AdamW, checkpoints), [`probe`]
//! (central-difference curvature probe), [`textmetrics`] (length,
//! repetition, diversity) and [`ablation`] (setting-by-setting comparison).

pub mod ablation;
pub mod checkpoint;
pub mod data;
pub mod model;
pub mod noise;
pub mod probe;
pub mod rng;
pub mod tensor;
pub mod textmetrics;
pub mod trainer;

use thiserror::Error;

/// Any error from this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Noise(#[from] noise::NoiseError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
    #[error(transparent)]
    Probe(#[from] probe::ProbeError),
    #[error(transparent)]
    Metrics(#[from] textmetrics::MetricsError),
}

/// Coarse failure classes, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad configuration or arguments.
    Usage,
    /// Unreadable or malformed input.
    Data,
    /// A loss or probe went non-finite.
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use trainer::TrainError as T;
        match self {
            Error::Train(T::NonFinite { .. }) | Error::Probe(probe::ProbeError::NonFinite { .. }) => ErrorClass::Numeric,
            Error::Train(T::Config(_)) | Error::Probe(probe::ProbeError::Config(_)) => ErrorClass::Usage,
            Error::Model(model::ModelError::InvalidConfig(_)) | Error::Noise(noise::NoiseError::BadAlpha(_)) => {
                ErrorClass::Usage
            }
            Error::Noise(noise::NoiseError::UnknownKind(_)) => ErrorClass::Usage,
            Error::Metrics(textmetrics::MetricsError::BadK { .. }) => ErrorClass::Usage,
            _ => ErrorClass::Data,
        }
    }
}
