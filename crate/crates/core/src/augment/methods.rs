use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{AdamWConfig, Differentiable, OptimizerState};
use crate::scalar::Real;
use crate::seed;
use crate::synthworld::GroupedDataset;

use super::generator::Generator;

/// `t^gamma + (1 - f)^gamma`.
pub fn config_objective<T: Real>(t_y: T, f_y: T, gamma: T) -> T {
    t_y.powf(gamma) + (T::one() - f_y).powf(gamma)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentMethod {
    None,
    Config,
    Unconditional,
    NoiseResample,
    LatentPerturb,
    StudentAdversarial,
}

impl AugmentMethod {
    pub const GENERATORS: [AugmentMethod; 5] = [
        AugmentMethod::Config,
        AugmentMethod::Unconditional,
        AugmentMethod::NoiseResample,
        AugmentMethod::LatentPerturb,
        AugmentMethod::StudentAdversarial,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AugmentMethod::None => "none",
            AugmentMethod::Config => "config",
            AugmentMethod::Unconditional => "unconditional",
            AugmentMethod::NoiseResample => "noise-resample",
            AugmentMethod::LatentPerturb => "latent-perturb",
            AugmentMethod::StudentAdversarial => "student-adversarial",
        }
    }
}

impl fmt::Display for AugmentMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AugmentMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('_', "-");
        [AugmentMethod::None]
            .into_iter()
            .chain(AugmentMethod::GENERATORS)
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| Error::Parse(format!("unknown augmentation method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    pub steps: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    /// Noise scale shared by the sampling baselines.
    pub rho: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            steps: 5,
            learning_rate: 0.01,
            gamma: 2.0,
            rho: 0.3,
        }
    }
}

/// One generated input with its optimization trace.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub x: Vec<f64>,
    pub steps: usize,
    /// `(t_y, f_y)` at the start and after every step; `t_y` is NaN when no
    /// teacher takes part in the optimization.
    pub trace: Vec<(f64, f64)>,
}

enum Objective {
    Confidence { gamma: f64 },
    StudentLoss,
}

struct LatentProgram {
    tape: Tape<f64>,
    z: Var,
    x: Var,
    t_y: Option<Var>,
    f_y: Var,
}

fn pick(tape: &mut Tape<f64>, probs: Var, y: usize, classes: usize) -> Var {
    let mut row = Tensor::zeros(1, classes);
    row.set(0, y, 1.0);
    let r = tape.leaf(row);
    tape.affine(r, probs, None)
}

fn record_program(
    gen: &Generator,
    teacher: Option<&dyn Differentiable>,
    student: &dyn Differentiable,
    y: usize,
    z0: &[f64],
    objective: &Objective,
) -> Result<LatentProgram> {
    let classes = student.num_classes();
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::column(z0.to_vec()));
    let x = gen.record_decode(&mut tape, z);
    let fp = student.record_probs(&mut tape, x)?;
    let f_y = pick(&mut tape, fp, y, classes);
    let t_y = match teacher {
        Some(t) => {
            let tp = t.record_probs(&mut tape, x)?;
            Some(pick(&mut tape, tp, y, classes))
        }
        None => None,
    };
    match objective {
        Objective::Confidence { gamma } => {
            let t_y = t_y.ok_or(Error::InvalidArgument("confidence objective needs a teacher".into()))?;
            let a = tape.pow(t_y, *gamma);
            let one_minus = tape.combine(&[(f_y, -1.0)], 1.0);
            let b = tape.pow(one_minus, *gamma);
            tape.combine(&[(a, 1.0), (b, 1.0)], 0.0);
        }
        Objective::StudentLoss => {
            let lp = student.record_log_probs(&mut tape, x)?;
            let l = pick(&mut tape, lp, y, classes);
            tape.combine(&[(l, -1.0)], 0.0);
        }
    }
    Ok(LatentProgram { tape, z, x, t_y, f_y })
}

/// Ascends the program's scalar output in `z` with AdamW (no decay).
fn ascend(program: &mut LatentProgram, z0: &[f64], steps: usize, lr: f64) -> Result<Generated> {
    let mut z = Tensor::column(z0.to_vec());
    let mut opt = OptimizerState::new(AdamWConfig::default().learning_rate(lr).weight_decay(0.0));
    let mut trace = Vec::with_capacity(steps + 1);
    let mut x = Vec::new();
    for step in 0..=steps {
        program.tape.forward_with(&[(program.z, z.clone())])?;
        let read = |v: Var| program.tape.value(v).expect("evaluated").item();
        let t = program.t_y.map_or(f64::NAN, read);
        trace.push((t, read(program.f_y)));
        x = program.tape.value(program.x).expect("evaluated").data().to_vec();
        if step == steps {
            break;
        }
        let g = program.tape.backward()?.wrt(program.z).map(|v| -v);
        opt.step(&mut [&mut z], &[&g])?;
    }
    Ok(Generated { x, steps, trace })
}

/// Confidence-guided generation: inverts `x`, then moves the latent to raise
/// the teacher's confidence in `y` while lowering the student's.
pub fn config_generate(
    x: &[f64],
    y: usize,
    teacher: &dyn Differentiable,
    student: &dyn Differentiable,
    gen: &Generator,
    params: &AugmentParams,
    seed: u64,
) -> Result<Generated> {
    if !(params.gamma > 0.0) {
        return Err(Error::InvalidArgument("gamma must be positive".into()));
    }
    let z0 = gen.invert(x, seed)?;
    let mut program = record_program(gen, Some(teacher), student, y, &z0, &Objective::Confidence { gamma: params.gamma })?;
    ascend(&mut program, &z0, params.steps, params.learning_rate)
}

/// Objective `t_y^gamma + (1 - f_y)^gamma` as a tape over the latent code;
/// returns the tape and the latent leaf.
pub fn config_objective_tape(
    z: &[f64],
    y: usize,
    teacher: &dyn Differentiable,
    student: &dyn Differentiable,
    gen: &Generator,
    gamma: f64,
) -> Result<(Tape<f64>, Var)> {
    let p = record_program(gen, Some(teacher), student, y, z, &Objective::Confidence { gamma })?;
    Ok((p.tape, p.z))
}

/// Per-class Gaussian fit of inverted training latents.
///
/// Inverted codes are `W s + n` with `n` a standard normal null-space draw,
/// so the fit is carried out on the effective coordinates `s` and the null
/// component keeps its standard normal law.
#[derive(Clone, Debug)]
pub struct ClassLatentPrior {
    means: Vec<DVector<f64>>,
    factors: Vec<DMatrix<f64>>,
}

impl ClassLatentPrior {
    pub fn fit(gen: &Generator, data: &GroupedDataset, seed: u64) -> Result<Self> {
        let d = gen.input_dim();
        let mut means = Vec::new();
        let mut factors = Vec::new();
        for c in 0..data.num_classes() {
            let coords: Vec<DVector<f64>> = data
                .examples()
                .iter()
                .enumerate()
                .filter(|(_, e)| e.y == c)
                .map(|(i, e)| {
                    gen.invert(&e.x, seed::derive_index(seed, i as u64))
                        .map(|z| DVector::from_vec(gen.effective(&z)))
                })
                .collect::<Result<_>>()?;
            if coords.is_empty() {
                return Err(Error::Empty("class in training data"));
            }
            let n = coords.len() as f64;
            let mean = coords.iter().fold(DVector::zeros(d), |a, v| a + v) / n;
            let mut cov = DMatrix::<f64>::zeros(d, d);
            for v in &coords {
                let r = v - &mean;
                cov += &r * r.transpose();
            }
            cov /= (n - 1.0).max(1.0);
            // small ridge keeps the factorization defined for tiny classes
            cov += DMatrix::identity(d, d) * 1e-9;
            let chol = cov
                .cholesky()
                .ok_or_else(|| Error::InvalidArgument("class latent covariance is not positive definite".into()))?;
            means.push(mean);
            factors.push(chol.l());
        }
        Ok(Self { means, factors })
    }

    pub fn sample(&self, gen: &Generator, class: usize, seed: u64) -> Vec<f64> {
        let d = gen.input_dim();
        let mut rng = seed::rng(seed);
        let e = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let s = &self.means[class] + &self.factors[class] * e;
        gen.from_effective(s.as_slice(), seed::derive(seed, "null"))
    }
}

fn sampled(x: Vec<f64>) -> Generated {
    Generated { x, steps: 0, trace: Vec::new() }
}

/// Baseline generators. `student` is needed only by the adversarial
/// baseline and `prior` only by the unconditional one.
#[allow(clippy::too_many_arguments)]
pub fn baseline_generate(
    kind: AugmentMethod,
    x: &[f64],
    y: usize,
    student: Option<&dyn Differentiable>,
    prior: Option<&ClassLatentPrior>,
    gen: &Generator,
    params: &AugmentParams,
    seed: u64,
) -> Result<Generated> {
    let noise_seed = seed::derive(seed, "baseline-noise");
    match kind {
        AugmentMethod::Unconditional => {
            let prior = prior.ok_or(Error::InvalidArgument("unconditional sampling needs a class prior".into()))?;
            Ok(sampled(gen.decode(&prior.sample(gen, y, noise_seed))))
        }
        AugmentMethod::NoiseResample => {
            let mut z = gen.invert(x, seed)?;
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = params.rho * norm / (z.len() as f64).sqrt();
            let mut rng = seed::rng(noise_seed);
            for v in &mut z {
                *v += scale * rng.sample::<f64, _>(StandardNormal);
            }
            Ok(sampled(gen.decode(&z)))
        }
        AugmentMethod::LatentPerturb => {
            let mut z = gen.invert(x, seed)?;
            let mut rng = seed::rng(noise_seed);
            for v in &mut z {
                let u = if params.rho > 0.0 { rng.random_range(-params.rho..=params.rho) } else { 0.0 };
                *v *= 1.0 + u;
            }
            Ok(sampled(gen.decode(&z)))
        }
        AugmentMethod::StudentAdversarial => {
            let student = student.ok_or(Error::InvalidArgument("adversarial baseline needs a student".into()))?;
            let z0 = gen.invert(x, seed)?;
            let mut program = record_program(gen, None, student, y, &z0, &Objective::StudentLoss)?;
            ascend(&mut program, &z0, params.steps, params.learning_rate)
        }
        AugmentMethod::Config | AugmentMethod::None => Err(Error::InvalidArgument(format!(
            "`{kind}` is not a baseline generator"
        ))),
    }
}
