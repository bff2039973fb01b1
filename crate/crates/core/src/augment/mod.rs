//! Latent-space augmentation: an invertible decoder standing in for a
//! generative model, the confidence-guided generator, four baselines, and
//! assembly of augmented training sets.

mod batch;
mod generator;
mod methods;

pub use batch::{
    build_augmented_dataset, generate_batch, mixture_weight, AugmentationBatch, AugmentedSample, Participants,
    BATCH_SCHEMA, TRACE_SCHEMA,
};
pub use generator::{DecoderKind, Generator, GeneratorConfig};
pub use methods::{
    baseline_generate, config_generate, config_objective, config_objective_tape, AugmentMethod, AugmentParams,
    ClassLatentPrior, Generated,
};
