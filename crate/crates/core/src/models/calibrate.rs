use crate::classifier::{softmax, Classifier};
use crate::error::{Error, Result};
use crate::synthworld::GroupedDataset;

use super::mlp::LogitModel;

pub const TEMPERATURE_RANGE: (f64, f64) = (0.05, 20.0);

/// A model whose logits are divided by `temperature` before the softmax.
#[derive(Clone, Debug)]
pub struct TemperatureScaled<M> {
    pub model: M,
    pub temperature: f64,
}

impl<M: LogitModel + Classifier> Classifier for TemperatureScaled<M> {
    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    fn predict(&self, x: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = self.model.logits(x).into_iter().map(|v| v / self.temperature).collect();
        softmax(&z)
    }
}

fn nll(logits: &[(Vec<f64>, usize)], t: f64) -> f64 {
    logits
        .iter()
        .map(|(z, y)| {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / t;
            let lse = m + z.iter().map(|v| (v / t - m).exp()).sum::<f64>().ln();
            lse - z[*y] / t
        })
        .sum::<f64>()
        / logits.len() as f64
}

/// Temperature in [0.05, 20] minimizing validation cross-entropy, by golden-section search.
pub fn calibrate_temperature<M: LogitModel + ?Sized>(model: &M, val: &GroupedDataset) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let first = val.examples()[0].y;
    if val.examples().iter().all(|e| e.y == first) {
        log::warn!("single-class validation set; temperature left at 1");
        return Ok(1.0);
    }
    let logits: Vec<(Vec<f64>, usize)> = val.examples().iter().map(|e| (model.logits(&e.x), e.y)).collect();
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = TEMPERATURE_RANGE;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (nll(&logits, c), nll(&logits, d));
    while b - a > 1e-7 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = nll(&logits, c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = nll(&logits, d);
        }
    }
    Ok(0.5 * (a + b))
}
