use std::sync::Arc;

use crate::classifier::{softmax, Classifier};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed;
use crate::synthworld::{GroupKey, Split, World};

use super::mlp::{LogitModel, MlpClassifier};

/// Classifiers whose class probabilities can be recorded on a tape as a
/// function of an input node, so gradients flow back to the input.
pub trait Differentiable: Classifier {
    /// Records `x -> probabilities` for an input node of shape `d x n`;
    /// returns an `L x n` node.
    fn record_probs(&self, tape: &mut Tape<f64>, x: Var) -> Result<Var>;

    /// Records class log-probabilities, where the model exposes them directly.
    fn record_log_probs(&self, _tape: &mut Tape<f64>, _x: Var) -> Result<Var> {
        Err(Error::NotDifferentiable("log-probability output"))
    }
}

impl Differentiable for MlpClassifier<f64> {
    fn record_probs(&self, tape: &mut Tape<f64>, x: Var) -> Result<Var> {
        let lp = self.record_log_probs(tape, x)?;
        Ok(tape.exp(lp))
    }

    fn record_log_probs(&self, tape: &mut Tape<f64>, x: Var) -> Result<Var> {
        let (_, logits) = self.record(tape, x);
        Ok(tape.log_softmax(logits))
    }
}

#[derive(Clone, Debug)]
pub enum Teacher {
    /// The world's exact posterior under `split`.
    ExactBayes { world: Arc<World>, split: Split },
    /// Exact posterior with its finite logits shifted by deterministic
    /// pseudo-noise in `[-level, level]`, keyed by a hash of `x`.
    NoisyBayes { world: Arc<World>, split: Split, level: f64 },
    /// A fixed network with temperature-scaled softmax.
    FrozenMlp { mlp: MlpClassifier<f64>, temperature: f64 },
}

impl Teacher {
    pub fn exact(world: Arc<World>, split: Split) -> Self {
        Teacher::ExactBayes { world, split }
    }

    /// Noisy teacher whose declared sup-norm deviation from the exact
    /// posterior is `delta`.
    pub fn noisy_with_delta(world: Arc<World>, split: Split, delta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&delta) {
            return Err(Error::InvalidArgument(format!("delta {delta} outside [0, 1)")));
        }
        Ok(Teacher::NoisyBayes {
            world,
            split,
            level: 2.0 * delta.atanh(),
        })
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            Teacher::ExactBayes { .. } => "exact_bayes",
            Teacher::NoisyBayes { .. } => "noisy_bayes",
            Teacher::FrozenMlp { .. } => "frozen_mlp",
        }
    }

    /// Guaranteed bound on `|t(x) - posterior(x)|_inf`, when one exists.
    ///
    /// Shifting each logit by at most `e` moves any softmax entry by at most
    /// `tanh(e / 2)`.
    pub fn declared_delta(&self) -> Option<f64> {
        match self {
            Teacher::ExactBayes { .. } => Some(0.0),
            Teacher::NoisyBayes { level, .. } => Some((level / 2.0).tanh()),
            Teacher::FrozenMlp { .. } => None,
        }
    }

    pub fn is_differentiable(&self) -> bool {
        !matches!(self, Teacher::NoisyBayes { .. })
    }
}

fn noise_unit(x: &[f64], class: usize) -> f64 {
    let h = seed::hash_f64s(x, 0x7e57_0000 + class as u64);
    // 53 random bits mapped to [-1, 1]
    ((h >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
}

impl Classifier for Teacher {
    fn num_classes(&self) -> usize {
        match self {
            Teacher::ExactBayes { world, .. } | Teacher::NoisyBayes { world, .. } => world.num_classes(),
            Teacher::FrozenMlp { mlp, .. } => mlp.output_dim(),
        }
    }

    fn predict(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Teacher::ExactBayes { world, split } => world.bayes_posterior(x, *split),
            Teacher::NoisyBayes { world, split, level } => {
                if *level == 0.0 {
                    return world.bayes_posterior(x, *split);
                }
                let logits: Vec<f64> = world
                    .posterior_logits(x, *split)
                    .into_iter()
                    .enumerate()
                    .map(|(c, l)| if l.is_finite() { l + level * noise_unit(x, c) } else { l })
                    .collect();
                softmax(&logits)
            }
            Teacher::FrozenMlp { mlp, temperature } => {
                let z: Vec<f64> = mlp.logits(x).into_iter().map(|v| v / temperature).collect();
                softmax(&z)
            }
        }
    }
}

impl Differentiable for Teacher {
    fn record_probs(&self, tape: &mut Tape<f64>, x: Var) -> Result<Var> {
        match self {
            Teacher::ExactBayes { world, split } => record_bayes(world, *split, tape, x),
            Teacher::NoisyBayes { .. } => Err(Error::NotDifferentiable("noisy_bayes")),
            Teacher::FrozenMlp { mlp, temperature } => {
                let (_, logits) = mlp.record(tape, x);
                let scaled = tape.combine(&[(logits, 1.0 / temperature)], 0.0);
                let lp = tape.log_softmax(scaled);
                Ok(tape.exp(lp))
            }
        }
    }
}

/// The posterior as `membership * exp(log_softmax(A x + c))`: the shared
/// `|x|^2` term cancels, leaving per-group affine logits
/// `mu_g . x / s^2 - |mu_g|^2 / (2 s^2) + ln prior_g`.
fn record_bayes(world: &World, split: Split, tape: &mut Tape<f64>, x: Var) -> Result<Var> {
    let priors = world.priors(split);
    let k = world.num_spurious_bits();
    let d = world.input_dim();
    let s2 = world.spec().noise_std.powi(2);
    let active: Vec<GroupKey> = world
        .groups()
        .filter(|g| priors[g.index(k)] > 0.0)
        .collect();
    let mut a = Vec::with_capacity(active.len() * d);
    let mut c = Vec::with_capacity(active.len());
    for g in &active {
        let mu = world.group_mean(*g);
        a.extend(mu.iter().map(|m| m / s2));
        let norm2: f64 = mu.iter().map(|m| m * m).sum();
        c.push(priors[g.index(k)].ln() - norm2 / (2.0 * s2));
    }
    let l = world.num_classes();
    let mut member = Tensor::zeros(l, active.len());
    for (j, g) in active.iter().enumerate() {
        member.set(g.class_label, j, 1.0);
    }
    let av = tape.leaf(Tensor::from_vec(active.len(), d, a));
    let cv = tape.leaf(Tensor::column(c));
    let mv = tape.leaf(member);
    let logits = tape.affine(av, x, Some(cv));
    let lp = tape.log_softmax(logits);
    let gp = tape.exp(lp);
    Ok(tape.affine(mv, gp, None))
}
