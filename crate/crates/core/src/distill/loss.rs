use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::synthworld::PROB_FLOOR;

static CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Number of probabilities clamped to the floor since process start.
pub fn clamp_events() -> u64 {
    CLAMP_EVENTS.load(Ordering::Relaxed)
}

/// `ln p` with `p` floored at `1e-300`; every flooring is counted.
pub fn clamped_ln(p: f64) -> f64 {
    if p < PROB_FLOOR {
        CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
        PROB_FLOOR.ln()
    } else {
        p.ln()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdrmForm {
    CrossEntropy,
    Kl,
}

/// `-ln pred[y]`.
pub fn erm_loss(pred: &[f64], y: usize) -> f64 {
    -clamped_ln(pred[y])
}

/// Distillation loss against teacher probabilities. The two forms differ by
/// the teacher entropy, which does not depend on `pred`.
pub fn edrm_loss(pred: &[f64], teacher: &[f64], form: EdrmForm) -> f64 {
    let ce: f64 = teacher
        .iter()
        .zip(pred)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, p)| -t * clamped_ln(*p))
        .sum();
    match form {
        EdrmForm::CrossEntropy => ce,
        EdrmForm::Kl => ce - entropy(teacher),
    }
}

pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|v| **v > 0.0).map(|v| -v * v.ln()).sum()
}

/// Unweighted sum of the label and cross-entropy distillation losses.
pub fn combined_loss(pred: &[f64], y: usize, teacher: &[f64]) -> f64 {
    erm_loss(pred, y) + edrm_loss(pred, teacher, EdrmForm::CrossEntropy)
}
