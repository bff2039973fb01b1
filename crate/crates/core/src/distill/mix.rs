use rand::Rng;

use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct Mixed {
    pub x: Vec<f64>,
    pub soft_label: Vec<f64>,
}

fn one_hot_blend(y1: usize, y2: usize, w1: f64, classes: usize) -> Vec<f64> {
    let mut s = vec![0.0; classes];
    s[y1] += w1;
    s[y2] += 1.0 - w1;
    s
}

/// Coordinate-mask mixing with an explicit mask; the weight on `y1` is the
/// fraction of coordinates taken from `x1`.
pub fn mask_mix_with(x1: &[f64], y1: usize, x2: &[f64], y2: usize, classes: usize, mask: &[bool]) -> Mixed {
    assert_eq!(x1.len(), x2.len(), "mixed inputs must share a dimension");
    assert_eq!(mask.len(), x1.len(), "mask dimension");
    let x = x1
        .iter()
        .zip(x2)
        .zip(mask)
        .map(|((a, b), m)| if *m { *a } else { *b })
        .collect();
    let frac = mask.iter().filter(|m| **m).count() as f64 / mask.len() as f64;
    Mixed {
        x,
        soft_label: one_hot_blend(y1, y2, frac, classes),
    }
}

/// Vector analog of CutMix: `lambda ~ U(0, 1)`, mask entries `~ Bernoulli(lambda)`.
pub fn mask_mix(x1: &[f64], y1: usize, x2: &[f64], y2: usize, classes: usize, seed: u64) -> Mixed {
    let mut rng = seed::rng(seed);
    let lambda: f64 = rng.random();
    let mask: Vec<bool> = (0..x1.len()).map(|_| rng.random::<f64>() < lambda).collect();
    mask_mix_with(x1, y1, x2, y2, classes, &mask)
}

pub fn convex_mix_with(x1: &[f64], y1: usize, x2: &[f64], y2: usize, classes: usize, lambda: f64) -> Mixed {
    assert_eq!(x1.len(), x2.len(), "mixed inputs must share a dimension");
    Mixed {
        x: x1.iter().zip(x2).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect(),
        soft_label: one_hot_blend(y1, y2, lambda, classes),
    }
}

/// MixUp: `lambda ~ Beta(1, 1)`, i.e. uniform on `[0, 1]`.
pub fn convex_mix(x1: &[f64], y1: usize, x2: &[f64], y2: usize, classes: usize, seed: u64) -> Mixed {
    let lambda: f64 = seed::rng(seed).random();
    convex_mix_with(x1, y1, x2, y2, classes, lambda)
}
