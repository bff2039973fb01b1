use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            _ => Err(Error::Parse(format!("unknown activation `{s}`"))),
        }
    }
}

/// Fully connected classifier with a log-softmax head.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpClassifier<T> {
    widths: Vec<usize>,
    activation: Activation,
    weights: Vec<Tensor<T>>,
    biases: Vec<Tensor<T>>,
}

/// Uniform fan-in initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn init_mlp<T: Real>(widths: &[usize], activation: Activation, seed: u64) -> Result<MlpClassifier<T>> {
    if widths.len() < 2 {
        return Err(Error::InvalidArgument("an MLP needs input and output widths".into()));
    }
    if widths.iter().any(|w| *w < 1) {
        return Err(Error::InvalidArgument(format!("layer widths must be >= 1: {widths:?}")));
    }
    let mut rng = seed::rng(seed);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for pair in widths.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<T> { (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect() };
        weights.push(Tensor::from_vec(fan_out, fan_in, draw(fan_out * fan_in)));
        biases.push(Tensor::column(draw(fan_out)));
    }
    Ok(MlpClassifier {
        widths: widths.to_vec(),
        activation,
        weights,
        biases,
    })
}

impl<T: Real> MlpClassifier<T> {
    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    /// Weight and bias tensors interleaved per layer: `w0, b0, w1, b1, ...`.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<T> {
        self.params().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for t in self.params_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Output logits for a single input.
    pub fn logits_of(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.input_dim(), "input dimension");
        let mut h = x.to_vec();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut next: Vec<T> = (0..w.rows())
                .map(|r| {
                    let row = &w.data()[r * w.cols()..(r + 1) * w.cols()];
                    row.iter().zip(&h).fold(b.get(r, 0), |s, (&a, &v)| s + a * v)
                })
                .collect();
            if l < last {
                for v in &mut next {
                    *v = match self.activation {
                        Activation::Relu => v.max(T::zero()),
                        Activation::Tanh => v.tanh(),
                    };
                }
            }
            h = next;
        }
        h
    }

    /// Records the network on `tape` for an input node of shape `d x n`.
    /// Returns the parameter leaves (same order as [`Self::params`]) and the
    /// logits node (`L x n`).
    pub fn record(&self, tape: &mut Tape<T>, x: Var) -> (Vec<Var>, Var) {
        let mut leaves = Vec::new();
        let mut h = x;
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let wv = tape.leaf(w.clone());
            let bv = tape.leaf(b.clone());
            leaves.push(wv);
            leaves.push(bv);
            h = tape.affine(wv, h, Some(bv));
            if l < last {
                h = match self.activation {
                    Activation::Relu => tape.relu(h),
                    Activation::Tanh => tape.tanh(h),
                };
            }
        }
        (leaves, h)
    }
}

impl<T: Real> Classifier for MlpClassifier<T> {
    fn num_classes(&self) -> usize {
        self.output_dim()
    }

    fn predict(&self, x: &[f64]) -> Vec<f64> {
        let xt: Vec<T> = x.iter().map(|&v| T::of(v)).collect();
        let logits: Vec<f64> = self.logits_of(&xt).into_iter().map(Real::as_f64).collect();
        crate::classifier::softmax(&logits)
    }
}

/// Models exposing pre-softmax scores, for temperature scaling.
pub trait LogitModel: Sync {
    fn logits(&self, x: &[f64]) -> Vec<f64>;
}

impl<T: Real> LogitModel for MlpClassifier<T> {
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let xt: Vec<T> = x.iter().map(|&v| T::of(v)).collect();
        self.logits_of(&xt).into_iter().map(Real::as_f64).collect()
    }
}
