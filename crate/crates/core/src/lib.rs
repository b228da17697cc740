//! Hourglass audio-visual speech recognition.
//!
//! Video is temporally downsampled before the expensive visual front-end and
//! encoder, then restored to the audio frame rate by a context and residual
//! aware upsampler whose alignment attention is trained with a windowed
//! visual-audio alignment loss. The crate also carries an analytic FLOP
//! model and a synthetic corpus harness for training and evaluation.

pub mod config;
pub mod costmodel;
pub mod data;
pub mod encoders;
pub mod error;
pub mod frontends;
pub mod fusion_decoder;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod upsampler;

pub use error::{Error, Result};

pub use config::{Mode, ModelConfig};
pub use costmodel::{CostInput, CostReport};
pub use data::{Checkpoint, EvalReport, MetricRecord, RunConfig, Sample};
pub use frontends::AVBatch;
pub use model::HourglassModel;
pub use numerics::{Graph, ParamStore, Tensor};
