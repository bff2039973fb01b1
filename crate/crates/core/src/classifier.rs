use crate::error::{Error, Result};

/// Anything that maps an input vector to a probability vector over classes.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;

    fn predict(&self, x: &[f64]) -> Vec<f64>;

    fn predict_many(&self, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        xs.iter().map(|x| self.predict(x)).collect()
    }
}

impl<C: Classifier + ?Sized> Classifier for &C {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn predict(&self, x: &[f64]) -> Vec<f64> {
        (**self).predict(x)
    }
    fn predict_many(&self, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        (**self).predict_many(xs)
    }
}

/// Adapts a closure into a [`Classifier`].
pub struct FnClassifier<F> {
    classes: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> Vec<f64> + Sync> FnClassifier<F> {
    pub fn new(classes: usize, f: F) -> Self {
        Self { classes, f }
    }
}

impl<F: Fn(&[f64]) -> Vec<f64> + Sync> Classifier for FnClassifier<F> {
    fn num_classes(&self) -> usize {
        self.classes
    }
    fn predict(&self, x: &[f64]) -> Vec<f64> {
        (self.f)(x)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn check_probability(p: &[f64], classes: usize) -> Result<()> {
    if p.len() != classes {
        return Err(Error::NotProbability(format!(
            "expected {classes} entries, got {}",
            p.len()
        )));
    }
    let sum: f64 = p.iter().sum();
    if p.iter().any(|v| !(-1e-9..=1.0 + 1e-9).contains(v)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::NotProbability(format!("{p:?}")));
    }
    Ok(())
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return vec![1.0 / logits.len() as f64; logits.len()];
    }
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn probability_check_rejects_bad_vectors() {
        assert!(check_probability(&[0.3, 0.7], 2).is_ok());
        assert!(check_probability(&[0.3, 0.6], 2).is_err());
        assert!(check_probability(&[1.3, -0.3], 2).is_err());
        assert!(check_probability(&[1.0], 2).is_err());
    }
}
