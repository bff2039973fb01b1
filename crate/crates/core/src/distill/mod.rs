//! Student training: label risk, distilled risk against teacher
//! probabilities, their sum, and optional input mixing.

mod loss;
mod mix;
mod train;

pub use loss::{clamp_events, clamped_ln, combined_loss, edrm_loss, entropy, erm_loss, EdrmForm};
pub use mix::{convex_mix, convex_mix_with, mask_mix, mask_mix_with, Mixed};
pub use train::{
    grid_search, hparam_grid, train_student, EpochRecord, LossMode, MixMode, TrainConfig, TrainReport,
    TRAIN_REPORT_SCHEMA,
};

#[cfg(test)]
mod tests;
