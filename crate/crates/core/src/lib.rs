//! Time-series classification foundation model built on a small
//! reverse-mode autodiff engine.
//!
//! Channels are resized to a fixed length, tokenised into fused patch
//! features, and encoded by a transformer whose class token is the
//! embedding. Around the encoder sit contrastive pre-training, supervised
//! fine-tuning regimes, channel adapters for multivariate inputs, and
//! post-hoc probability calibration.

pub mod adapters;
pub mod autograd;
pub mod calibration;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod finetune;
pub mod gradcheck;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod params;
pub mod preprocessing;
pub mod pretrain;
pub mod tensor;
pub mod tokenizer;
pub mod vit;

pub use adapters::{Adapter, AdapterKind};
pub use autograd::{Gradients, Tape, Var};
pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::MantisModel;
pub use optim::{LrSchedule, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use preprocessing::RawSeries;
pub use tensor::{Element, Tensor};
