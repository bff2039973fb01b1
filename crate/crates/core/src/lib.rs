//! Knowledge distillation under covariate shift on synthetic group-shift
//! worlds, with confidence-guided latent augmentation and numerical checks
//! of the generalization-gap bounds.
//!
//! The numeric core ([`diffcore`], [`models`]) is generic over [`scalar::Real`];
//! the aliases below fix the precision for the common cases.

pub mod diffcore;
pub mod error;
pub mod scalar;
pub mod classifier;
pub mod seed;
pub mod synthworld;
pub mod models;
pub mod distill;
pub mod augment;
pub mod metrics;
pub mod theory;
pub mod experiment;

pub type Tape64 = diffcore::Tape<f64>;
pub type Tape32 = diffcore::Tape<f32>;
pub type Tensor64 = diffcore::Tensor<f64>;
pub type Tensor32 = diffcore::Tensor<f32>;
pub type Mlp = models::MlpClassifier<f64>;
pub type Mlp32 = models::MlpClassifier<f32>;

pub use error::{Error, Result};
