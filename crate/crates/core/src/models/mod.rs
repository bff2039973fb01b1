//! Student networks, teachers, the AdamW optimizer and the cosine schedule.

mod calibrate;
pub mod checkpoint;
mod mlp;
mod optim;
mod teacher;

pub use calibrate::{calibrate_temperature, TemperatureScaled, TEMPERATURE_RANGE};
pub use mlp::{init_mlp, Activation, LogitModel, MlpClassifier};
pub use optim::{cosine_lr, AdamWConfig, OptimizerState};
pub use teacher::{Differentiable, Teacher};

#[cfg(test)]
mod tests;
