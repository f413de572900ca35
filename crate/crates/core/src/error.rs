use thiserror::Error;

use crate::cot::CotError;
use crate::cpm::CpmError;
use crate::encoders::EncoderError;
use crate::eval::EvalError;
use crate::lm::LmError;
use crate::synth::SynthError;
use crate::tensor::TensorError;

/// Error type of the model, trainer and evaluation drivers.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Cpm(#[from] CpmError),
    #[error(transparent)]
    Cot(#[from] CotError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("sample {id}: {reason}")]
    DatasetIntegrity { id: String, reason: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
