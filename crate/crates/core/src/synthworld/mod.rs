//! Synthetic group-shift worlds with a closed-form Bayes posterior.
//!
//! Every group is a class label plus `k` spurious bits. A group's inputs are
//! isotropic Gaussians around
//! `class_scale * class_dir[y] + spurious_scale * sum_j bit_j * spurious_dir[j]`.
//! Train and test differ only through the group priors, so dropping groups
//! from the train priors produces covariate shift with a known `p*`.

mod dataset;
pub mod quadrature;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::classifier::{check_probability, Classifier};
use crate::error::{Error, Result};
use crate::seed;

pub use dataset::{Example, GroupedDataset};

/// Half-width, in noise standard deviations, of the quadrature box per component.
const QUAD_RADIUS: f64 = 8.5;
/// Floor used whenever a log of a probability is taken.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub class_label: usize,
    pub spurious_bits: u32,
}

impl GroupKey {
    pub fn new(class_label: usize, spurious_bits: u32) -> Self {
        Self {
            class_label,
            spurious_bits,
        }
    }

    /// Dense index `class * 2^k + bits`.
    pub fn index(&self, k: usize) -> usize {
        (self.class_label << k) | self.spurious_bits as usize
    }

    pub fn from_index(i: usize, k: usize) -> Self {
        Self::new(i >> k, (i & ((1usize << k) - 1)) as u32)
    }

    pub fn bit(&self, j: usize) -> bool {
        self.spurious_bits >> j & 1 == 1
    }

    /// Bits as a string, bit 0 first. Empty when `k == 0`.
    pub fn bits_string(&self, k: usize) -> String {
        (0..k).map(|j| if self.bit(j) { '1' } else { '0' }).collect()
    }

    pub fn parse_bits(s: &str) -> Result<u32> {
        s.chars().enumerate().try_fold(0u32, |acc, (j, c)| match c {
            '0' => Ok(acc),
            '1' => Ok(acc | 1 << j),
            _ => Err(Error::Parse(format!("bad group bits `{s}`"))),
        })
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "y{}:s{:b}", self.class_label, self.spurious_bits)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    ValRestricted,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::ValRestricted => "val_restricted",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => Split::Train,
            "val" => Split::Val,
            "val_restricted" => Split::ValRestricted,
            "test" => Split::Test,
            _ => return Err(Error::Parse(format!("unknown split `{s}`"))),
        })
    }
}

fn default_reference() -> Split {
    Split::Test
}

/// Missing fields in a serialized spec take their value from
/// [`WorldSpec::celeba_toy`] with one spurious bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub num_classes: usize,
    pub num_spurious_bits: usize,
    pub input_dim: usize,
    pub class_directions: Vec<Vec<f64>>,
    pub spurious_directions: Vec<Vec<f64>>,
    pub class_scale: f64,
    pub spurious_scale: f64,
    pub noise_std: f64,
    /// Indexed by [`GroupKey::index`].
    pub train_priors: Vec<f64>,
    pub test_priors: Vec<f64>,
    pub latent_dim: usize,
    /// Split whose posterior is treated as the data-generating `p*`.
    #[serde(default = "default_reference")]
    pub reference_split: Split,
}

fn unit(d: usize, i: usize, sign: f64) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = sign;
    v
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self::celeba_toy(1)
    }
}

impl WorldSpec {
    /// Two classes along `±e0`, `k` spurious bits along `e1..ek`. Train
    /// priors keep only the aligned groups (class 0 with all bits clear,
    /// class 1 with all bits set); test priors are uniform.
    pub fn celeba_toy(k: usize) -> Self {
        assert!((1..=8).contains(&k), "celeba_toy supports 1..=8 spurious bits");
        let d = 1 + k;
        let groups = 2usize << k;
        let all_set = (1u32 << k) - 1;
        let mut train = vec![0.0; groups];
        train[GroupKey::new(0, 0).index(k)] = 0.5;
        train[GroupKey::new(1, all_set).index(k)] = 0.5;
        Self {
            num_classes: 2,
            num_spurious_bits: k,
            input_dim: d,
            class_directions: vec![unit(d, 0, -1.0), unit(d, 0, 1.0)],
            spurious_directions: (1..=k).map(|i| unit(d, i, 1.0)).collect(),
            class_scale: 1.25,
            spurious_scale: 5.0,
            noise_std: 0.6,
            train_priors: train,
            test_priors: vec![1.0 / groups as f64; groups],
            latent_dim: 4096,
            reference_split: Split::Test,
        }
    }

    pub fn num_groups(&self) -> usize {
        self.num_classes << self.num_spurious_bits
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.num_classes < 2 {
            return bad("need at least two classes".into());
        }
        if self.num_spurious_bits > 16 {
            return bad("at most 16 spurious bits".into());
        }
        if self.class_directions.len() != self.num_classes {
            return bad(format!(
                "{} class directions for {} classes",
                self.class_directions.len(),
                self.num_classes
            ));
        }
        if self.spurious_directions.len() != self.num_spurious_bits {
            return bad(format!(
                "{} spurious directions for {} bits",
                self.spurious_directions.len(),
                self.num_spurious_bits
            ));
        }
        let all = self.class_directions.iter().chain(&self.spurious_directions);
        for v in all {
            if v.len() != self.input_dim {
                return bad(format!("direction of length {} in dimension {}", v.len(), self.input_dim));
            }
            if (dot(v, v) - 1.0).abs() > 1e-10 {
                return bad("direction vectors must have unit norm".into());
            }
        }
        for (i, a) in self.spurious_directions.iter().enumerate() {
            for b in &self.spurious_directions[i + 1..] {
                if dot(a, b).abs() > 1e-10 {
                    return bad("spurious directions must be orthonormal".into());
                }
            }
            for c in &self.class_directions {
                if dot(a, c).abs() > 1e-10 {
                    return bad("spurious directions must be orthogonal to class directions".into());
                }
            }
        }
        for (i, a) in self.class_directions.iter().enumerate() {
            for b in &self.class_directions[i + 1..] {
                if dot(a, b) > 1.0 - 1e-10 {
                    return bad("class directions must be distinct".into());
                }
            }
        }
        if !(self.class_scale > 0.0) || !(self.spurious_scale >= 0.0) || !(self.noise_std > 0.0) {
            return bad("scales must be positive (spurious_scale may be zero)".into());
        }
        for (name, p) in [("train", &self.train_priors), ("test", &self.test_priors)] {
            if p.len() != self.num_groups() {
                return bad(format!("{name} priors have {} entries, expected {}", p.len(), self.num_groups()));
            }
            if p.iter().any(|v| !(*v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad(format!("{name} priors must be nonnegative and sum to 1"));
            }
        }
        if self.latent_dim < self.input_dim {
            return bad("latent_dim must be at least input_dim".into());
        }
        Ok(())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Monte-Carlo or quadrature estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_err: f64,
    /// Number of Monte-Carlo samples, 0 for quadrature.
    pub samples: usize,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self {
            value,
            std_err: 0.0,
            samples: 0,
        }
    }

    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::exact(f64::NAN);
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            value: mean,
            std_err: (var / n as f64).sqrt(),
            samples: n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Estimator {
    MonteCarlo { samples: usize, seed: u64 },
    /// Deterministic adaptive quadrature; input dimension must be at most 2.
    Quadrature { tol: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskLoss {
    /// `-log f(x)_y` with `y` the label of the sampled group.
    CeVsLabel,
    /// `-p*(x)^T log f(x)`.
    CeVsPstar,
}

#[derive(Clone, Debug)]
pub struct World {
    spec: WorldSpec,
    seed: u64,
    means: Vec<Vec<f64>>,
}

/// Validates `spec` and precomputes the group means.
pub fn make_world(spec: WorldSpec, seed: u64) -> Result<World> {
    spec.validate()?;
    let k = spec.num_spurious_bits;
    let means = (0..spec.num_groups())
        .map(|i| {
            let g = GroupKey::from_index(i, k);
            let mut mu: Vec<f64> = spec.class_directions[g.class_label]
                .iter()
                .map(|v| spec.class_scale * v)
                .collect();
            for j in 0..k {
                if g.bit(j) {
                    for (m, v) in mu.iter_mut().zip(&spec.spurious_directions[j]) {
                        *m += spec.spurious_scale * v;
                    }
                }
            }
            mu
        })
        .collect();
    Ok(World { spec, seed, means })
}

impl World {
    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn num_spurious_bits(&self) -> usize {
        self.spec.num_spurious_bits
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn num_groups(&self) -> usize {
        self.spec.num_groups()
    }

    pub fn groups(&self) -> impl Iterator<Item = GroupKey> + '_ {
        let k = self.spec.num_spurious_bits;
        (0..self.num_groups()).map(move |i| GroupKey::from_index(i, k))
    }

    pub fn group_mean(&self, g: GroupKey) -> &[f64] {
        &self.means[g.index(self.spec.num_spurious_bits)]
    }

    /// Group priors of `split`. Validation draws from the test priors;
    /// the restricted validation split keeps only groups present in train.
    pub fn priors(&self, split: Split) -> Vec<f64> {
        match split {
            Split::Train => self.spec.train_priors.clone(),
            Split::Val | Split::Test => self.spec.test_priors.clone(),
            Split::ValRestricted => {
                let mut p: Vec<f64> = self
                    .spec
                    .test_priors
                    .iter()
                    .zip(&self.spec.train_priors)
                    .map(|(t, tr)| if *tr > 0.0 { *t } else { 0.0 })
                    .collect();
                let s: f64 = p.iter().sum();
                if s > 0.0 {
                    p.iter_mut().for_each(|v| *v /= s);
                }
                p
            }
        }
    }

    /// Groups with positive train prior.
    pub fn train_groups(&self) -> Vec<GroupKey> {
        self.groups()
            .filter(|g| self.spec.train_priors[g.index(self.spec.num_spurious_bits)] > 0.0)
            .collect()
    }

    fn log_joint(&self, x: &[f64], priors: &[f64]) -> Vec<f64> {
        let inv = 0.5 / (self.spec.noise_std * self.spec.noise_std);
        let mut per_class = vec![Vec::new(); self.spec.num_classes];
        for (i, mu) in self.means.iter().enumerate() {
            if priors[i] <= 0.0 {
                continue;
            }
            let d2: f64 = x.iter().zip(mu).map(|(a, b)| (a - b).powi(2)).sum();
            let g = GroupKey::from_index(i, self.spec.num_spurious_bits);
            per_class[g.class_label].push(priors[i].ln() - d2 * inv);
        }
        per_class
            .into_iter()
            .map(|ls| {
                let m = ls.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if m == f64::NEG_INFINITY {
                    m
                } else {
                    m + ls.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
                }
            })
            .collect()
    }

    /// Exact class posterior under the priors of `split`, computed in the log domain.
    pub fn bayes_posterior(&self, x: &[f64], split: Split) -> Vec<f64> {
        assert_eq!(x.len(), self.spec.input_dim, "input dimension");
        let lj = self.log_joint(x, &self.priors(split));
        crate::classifier::softmax(&lj)
    }

    /// Class log-posterior logits (unnormalized) under `split`; `-inf` for impossible classes.
    pub fn posterior_logits(&self, x: &[f64], split: Split) -> Vec<f64> {
        self.log_joint(x, &self.priors(split))
    }

    /// The data-generating conditional `p*`, i.e. the posterior under the reference split.
    pub fn pstar(&self, x: &[f64]) -> Vec<f64> {
        self.bayes_posterior(x, self.spec.reference_split)
    }

    /// Largest sup-norm gap between the train and test posteriors over `probes`.
    pub fn posterior_discrepancy(&self, probes: &[Vec<f64>]) -> f64 {
        probes
            .iter()
            .map(|x| {
                let a = self.bayes_posterior(x, Split::Train);
                let b = self.bayes_posterior(x, Split::Test);
                a.iter().zip(&b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }

    fn draw_around(&self, g: GroupKey, rng: &mut seed::Rng) -> Vec<f64> {
        let s = self.spec.noise_std;
        self.group_mean(g)
            .iter()
            .map(|m| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn draw_group(priors: &[f64], k: usize, rng: &mut seed::Rng) -> GroupKey {
        let total: f64 = priors.iter().sum();
        let u: f64 = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut last = 0;
        for (i, p) in priors.iter().enumerate() {
            if *p <= 0.0 {
                continue;
            }
            acc += p;
            last = i;
            if u < acc {
                return GroupKey::from_index(i, k);
            }
        }
        GroupKey::from_index(last, k)
    }

    /// `n` i.i.d. draws: group by prior, then `x ~ N(mu_g, noise_std^2 I)`.
    pub fn sample_split(&self, split: Split, n: usize, seed: u64) -> GroupedDataset {
        let priors = self.priors(split);
        let k = self.spec.num_spurious_bits;
        let mut rng = seed::rng(seed);
        let examples = (0..n)
            .map(|_| {
                let g = Self::draw_group(&priors, k, &mut rng);
                Example {
                    x: self.draw_around(g, &mut rng),
                    y: g.class_label,
                    group: g,
                }
            })
            .collect();
        GroupedDataset::new(examples, split, self.num_classes(), k)
    }

    /// Equal count per class (remainder to the lowest classes); within a
    /// class the group follows the split's within-class prior.
    pub fn sample_split_balanced(&self, split: Split, n: usize, seed: u64) -> Result<GroupedDataset> {
        let priors = self.priors(split);
        let k = self.spec.num_spurious_bits;
        let l = self.num_classes();
        let per_class: Vec<Vec<f64>> = (0..l)
            .map(|c| {
                priors
                    .iter()
                    .enumerate()
                    .map(|(i, p)| if GroupKey::from_index(i, k).class_label == c { *p } else { 0.0 })
                    .collect()
            })
            .collect();
        if per_class.iter().any(|p| p.iter().sum::<f64>() <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "class-balanced sampling of {split} needs every class to have prior mass"
            )));
        }
        let mut labels: Vec<usize> = (0..l).flat_map(|c| std::iter::repeat_n(c, n / l + usize::from(c < n % l))).collect();
        let mut rng = seed::rng(seed);
        rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
        let examples = labels
            .into_iter()
            .map(|c| {
                let g = Self::draw_group(&per_class[c], k, &mut rng);
                Example {
                    x: self.draw_around(g, &mut rng),
                    y: c,
                    group: g,
                }
            })
            .collect();
        Ok(GroupedDataset::new(examples, split, l, k))
    }

    /// `n` inputs from group `g` alone.
    pub fn sample_group(&self, g: GroupKey, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seed::rng(seed);
        (0..n).map(|_| self.draw_around(g, &mut rng)).collect()
    }

    /// Per-class pairs `(spurious_only, class_set)`: the first set carries the
    /// class's train-associated spurious bits with the causal component of the
    /// next class; the second set is class `c` under the test priors.
    pub fn spurious_probe_sets(&self, n: usize, seed: u64) -> Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let k = self.spec.num_spurious_bits;
        let l = self.num_classes();
        let test = self.priors(Split::Test);
        (0..l)
            .map(|c| {
                let s = seed::derive_index(seed, c as u64);
                let associated = self
                    .groups()
                    .filter(|g| g.class_label == c)
                    .max_by(|a, b| {
                        self.spec.train_priors[a.index(k)]
                            .total_cmp(&self.spec.train_priors[b.index(k)])
                            .then(b.spurious_bits.cmp(&a.spurious_bits))
                    });
                let spurious_only = match associated {
                    Some(g) if self.spec.train_priors[g.index(k)] > 0.0 => {
                        self.sample_group(GroupKey::new((c + 1) % l, g.spurious_bits), n, s)
                    }
                    _ => Vec::new(),
                };
                let class_priors: Vec<f64> = test
                    .iter()
                    .enumerate()
                    .map(|(i, p)| if GroupKey::from_index(i, k).class_label == c { *p } else { 0.0 })
                    .collect();
                let mut rng = seed::rng(seed::derive_index(s, 1));
                let class_set = if class_priors.iter().sum::<f64>() > 0.0 {
                    (0..n)
                        .map(|_| {
                            let g = Self::draw_group(&class_priors, k, &mut rng);
                            self.draw_around(g, &mut rng)
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                (spurious_only, class_set)
            })
            .collect()
    }

    /// `E[h(x, y)]` over the joint distribution of `split`.
    pub fn expectation<H>(&self, split: Split, h: H, estimator: Estimator) -> Result<Estimate>
    where
        H: Fn(&[f64], usize) -> f64 + Sync,
    {
        match estimator {
            Estimator::MonteCarlo { samples, seed } => {
                if samples == 0 {
                    return Err(Error::InvalidArgument("Monte-Carlo needs at least one sample".into()));
                }
                let data = self.sample_split(split, samples, seed);
                let values: Vec<f64> = data.examples().iter().map(|e| h(&e.x, e.y)).collect();
                Ok(Estimate::from_samples(&values))
            }
            Estimator::Quadrature { tol } => {
                let d = self.input_dim();
                if d > 2 {
                    return Err(Error::InvalidArgument(format!(
                        "quadrature is only available for input_dim <= 2 (got {d})"
                    )));
                }
                let priors = self.priors(split);
                let s = self.spec.noise_std;
                let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
                let phi = |u: f64| norm * (-0.5 * u * u).exp();
                let active = priors.iter().filter(|p| **p > 0.0).count().max(1);
                let mut total = 0.0;
                for g in self.groups() {
                    let p = priors[g.index(self.spec.num_spurious_bits)];
                    if p <= 0.0 {
                        continue;
                    }
                    let mu = self.group_mean(g);
                    let y = g.class_label;
                    let tol_g = tol / (active as f64 * p);
                    let v = if d == 1 {
                        quadrature::integrate(
                            |u| phi(u) * h(&[mu[0] + s * u], y),
                            -QUAD_RADIUS,
                            QUAD_RADIUS,
                            tol_g,
                            34,
                        )
                    } else {
                        quadrature::integrate_2d(
                            |u, v| phi(u) * phi(v) * h(&[mu[0] + s * u, mu[1] + s * v], y),
                            -QUAD_RADIUS,
                            QUAD_RADIUS,
                            tol_g,
                            34,
                        )
                    };
                    total += p * v;
                }
                Ok(Estimate::exact(total))
            }
        }
    }
}

/// `E[p*(x)^T l(f(x))]` (or the label form) for `classifier` under `split`.
pub fn true_risk<C: Classifier + ?Sized>(
    world: &World,
    classifier: &C,
    split: Split,
    loss: RiskLoss,
    estimator: Estimator,
) -> Result<Estimate> {
    let l = world.num_classes();
    if classifier.num_classes() != l {
        return Err(Error::NotProbability(format!(
            "classifier emits {} classes, world has {l}",
            classifier.num_classes()
        )));
    }
    // Reject classifiers that do not emit probability vectors on a probe draw.
    for e in world.sample_split(split, 16, seed::derive(world.seed(), "risk-probe")).examples() {
        check_probability(&classifier.predict(&e.x), l)?;
    }
    world.expectation(
        split,
        |x, y| {
            let f = classifier.predict(x);
            match loss {
                RiskLoss::CeVsLabel => -f[y].max(PROB_FLOOR).ln(),
                RiskLoss::CeVsPstar => {
                    let p = world.pstar(x);
                    p.iter()
                        .zip(&f)
                        .filter(|(pi, _)| **pi > 0.0)
                        .map(|(pi, fi)| -pi * fi.max(PROB_FLOOR).ln())
                        .sum()
                }
            }
        },
        estimator,
    )
}
