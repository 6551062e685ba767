//! Object-aware visual question answering on synthetic geospatial scenes.
//!
//! The crate bundles a small reverse-mode autodiff tensor library, a
//! procedural scene generator with a rule-based relational QA annotator, the
//! SOBA model (segmentation prompts, object-guided channel attention, visual
//! self-attention and bidirectional cross-attention), and the losses,
//! optimizer and metrics used to train and score it.

pub mod autograd;
pub mod checks;
pub mod corpus;
pub mod error;
pub mod geo;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod qa;
pub mod scalar;
pub mod tensor;

pub use autograd::{BnMode, Segments, Tape, Var};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport};
pub use model::{BcaOrder, ModelConfig, OgaVariant, Soba};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Double precision tensor, the default throughout training and checks.
pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Soba64 = Soba<f64>;
