//! Forgery detection with structured reasoning on a small, fully local
//! stack: tensors with reverse-mode gradients, frozen dual encoders,
//! attention-biased fusion, a decoder with a classification mapper, and
//! the data, training and evaluation around them.

pub mod cot;
pub mod cpm;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod faff;
pub mod gradcheck;
pub mod lm;
pub mod model;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use cot::{CoTDocument, CotError, Label, Outcome};
pub use cpm::{ClassTokens, ClassificationOutcome, ClassificationPattern, CpmError};
pub use encoders::{EncoderConfig, SyntheticImage};
pub use error::{Error, Result};
pub use eval::{EvalReport, SampleResult};
pub use lm::{Checkpoint, SequenceBatch, Vocabulary};
pub use model::{Architecture, EncodedImage, ForgeryReasoner, FusionMode, ModelConfig};
pub use nn::Parameters;
pub use rng::SplitMix64;
pub use synth::{DatasetRecord, Sample, SyntheticSample};
pub use tensor::{Scalar, Tensor, TensorError};
pub use train::{EvalOptions, LossMode, LossRecord, Supervision, TrainConfig};
