//! Numerical checks of the generalization-gap bounds for confidence-guided
//! augmentation: teacher and student sup-norm errors, the confidence
//! witnesses `tau` and `sigma`, `epsilon_aug`, `Theta`, and the risk gaps
//! `Omega`, `Omega_aug`, `Psi`, `Delta`.
//!
//! Risks on the train and test splits are expectations of `-p*(x)^T ln h(x)`
//! (labels drawn from `p*`). Risks on the augmentation distribution `Q` use
//! the labels attached to its samples, since `Q` is defined through them.

use std::fmt;
use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;

use crate::augment::AugmentationBatch;
use crate::classifier::Classifier;
use crate::distill::clamped_ln;
use crate::error::Result;
use crate::seed;
use crate::synthworld::{Estimate, Estimator, Split, World};

pub const THEORY_SCHEMA: &str = "# shiftkd theory-report v1";

/// Labeled samples treated as the empirical augmentation distribution.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QSamples {
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<usize>,
}

impl QSamples {
    pub fn from_batch(batch: &AugmentationBatch) -> Self {
        Self {
            xs: batch.samples.iter().map(|s| s.x.clone()).collect(),
            ys: batch.samples.iter().map(|s| s.y).collect(),
        }
    }

    /// Keeps samples with `t_y >= tau_min` and `f_y <= sigma_max`.
    pub fn filtered<T, S>(&self, teacher: &T, student: &S, tau_min: f64, sigma_max: f64) -> Self
    where
        T: Classifier + ?Sized,
        S: Classifier + ?Sized,
    {
        let keep: Vec<bool> = self
            .xs
            .par_iter()
            .zip(&self.ys)
            .map(|(x, &y)| teacher.predict(x)[y] >= tau_min && student.predict(x)[y] <= sigma_max)
            .collect();
        let mut out = Self::default();
        for ((x, y), k) in self.xs.iter().zip(&self.ys).zip(keep) {
            if k {
                out.xs.push(x.clone());
                out.ys.push(*y);
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// Sample mean and standard error of `h(x, y)` over the samples.
    pub fn mean<H: Fn(&[f64], usize) -> f64 + Sync>(&self, h: H) -> Estimate {
        let v: Vec<f64> = self.xs.par_iter().zip(&self.ys).map(|(x, &y)| h(x, y)).collect();
        Estimate::from_samples(&v)
    }
}

fn sup_gap<A, B>(a: &A, b: &B, probes: &[Vec<f64>]) -> f64
where
    A: Classifier + ?Sized,
    B: Classifier + ?Sized,
{
    probes
        .par_iter()
        .map(|x| {
            let (p, q) = (a.predict(x), b.predict(x));
            p.iter().zip(&q).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max)
}

/// Probe-maximized sup-norm errors. Both are lower bounds on the true
/// suprema over the supports.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Deltas {
    /// `max |t - p*|` over train, test and `Q` probes.
    pub delta_t: f64,
    /// `max |f - t|` over train probes.
    pub delta_s: f64,
    pub teacher_probes: usize,
    pub student_probes: usize,
}

/// `probe_budget` draws from each of the train and test splits (nested in
/// the budget for a fixed seed) plus the points of `q`.
pub fn measure_deltas<T, S>(
    world: &World,
    teacher: &T,
    student: &S,
    q: &QSamples,
    probe_budget: usize,
    seed: u64,
) -> Deltas
where
    T: Classifier + ?Sized,
    S: Classifier + ?Sized,
{
    let pstar = crate::classifier::FnClassifier::new(world.num_classes(), |x: &[f64]| world.pstar(x));
    let train = world.sample_split(Split::Train, probe_budget, seed::derive(seed, "train-probes")).xs();
    let test = world.sample_split(Split::Test, probe_budget, seed::derive(seed, "test-probes")).xs();
    let dt = sup_gap(teacher, &pstar, &train)
        .max(sup_gap(teacher, &pstar, &test))
        .max(sup_gap(teacher, &pstar, &q.xs));
    Deltas {
        delta_t: dt,
        delta_s: sup_gap(student, teacher, &train),
        teacher_probes: 2 * probe_budget + q.len(),
        student_probes: probe_budget,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TauSigma {
    /// Smallest teacher confidence in the attached label.
    pub tau: f64,
    /// Largest student confidence in the attached label.
    pub sigma: f64,
}

impl TauSigma {
    pub fn ordered(&self) -> bool {
        self.sigma < self.tau
    }
}

/// `None` for an empty sample set.
pub fn measure_tau_sigma<T, S>(q: &QSamples, teacher: &T, student: &S) -> Option<TauSigma>
where
    T: Classifier + ?Sized,
    S: Classifier + ?Sized,
{
    if q.is_empty() {
        return None;
    }
    let pairs: Vec<(f64, f64)> = q
        .xs
        .par_iter()
        .zip(&q.ys)
        .map(|(x, &y)| (teacher.predict(x)[y], student.predict(x)[y]))
        .collect();
    Some(TauSigma {
        tau: pairs.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
        sigma: pairs.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
    })
}

fn difference(a: Estimate, b: Estimate) -> Estimate {
    Estimate {
        value: a.value - b.value,
        std_err: a.std_err.hypot(b.std_err),
        samples: a.samples.max(b.samples),
    }
}

fn absolute(e: Estimate) -> Estimate {
    Estimate { value: e.value.abs(), ..e }
}

/// `E[-p*^T ln p*]` under `split` (the risk of `p*` with labels from `p*`).
fn pstar_risk(world: &World, split: Split, estimator: Estimator) -> Result<Estimate> {
    world.expectation(
        split,
        |x, _| world.pstar(x).iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum(),
        estimator,
    )
}

fn q_risk<C: Classifier + ?Sized>(model: &C, q: &QSamples) -> Estimate {
    q.mean(|x, y| -clamped_ln(model.predict(x)[y]))
}

fn soft_risk<C: Classifier + ?Sized>(world: &World, model: &C, split: Split, estimator: Estimator) -> Result<Estimate> {
    crate::synthworld::true_risk(world, model, split, crate::synthworld::RiskLoss::CeVsPstar, estimator)
}

/// `|R_train(p*) - R_Q(p*)|` with its standard error.
pub fn epsilon_aug(world: &World, q: &QSamples, estimator: Estimator) -> Result<Estimate> {
    let pstar = crate::classifier::FnClassifier::new(world.num_classes(), |x: &[f64]| world.pstar(x));
    let train = pstar_risk(world, Split::Train, estimator)?;
    Ok(absolute(difference(train, q_risk(&pstar, q))))
}

/// Why `theta` has no value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Unsatisfied(pub String);

impl fmt::Display for Unsatisfied {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "assumptions unsatisfied: {}", self.0)
    }
}

/// `ln(tau / sigma) - delta_s / (1/L - delta_t - 2 delta_s)
///  - (2 ln(1 / (1 - delta_t L)) + eps_aug)`.
pub fn theta(
    tau: f64,
    sigma: f64,
    delta_s: f64,
    delta_t: f64,
    num_classes: usize,
    eps_aug: f64,
) -> std::result::Result<f64, Unsatisfied> {
    let l = num_classes as f64;
    if !(sigma > 0.0 && sigma < tau) {
        return Err(Unsatisfied(format!("need 0 < sigma < tau, got sigma {sigma}, tau {tau}")));
    }
    if !(delta_t * l < 1.0) {
        return Err(Unsatisfied(format!("need delta_t L < 1, got {}", delta_t * l)));
    }
    let denom = 1.0 / l - delta_t - 2.0 * delta_s;
    if !(denom > 0.0) {
        return Err(Unsatisfied(format!("need 1/L - delta_t - 2 delta_s > 0, got {denom}")));
    }
    Ok((tau / sigma).ln() - delta_s / denom - (lemma_log_term(delta_t, num_classes) + eps_aug))
}

/// `2 ln(1 / (1 - delta_t L))`.
pub fn lemma_log_term(delta_t: f64, num_classes: usize) -> f64 {
    -2.0 * (1.0 - delta_t * num_classes as f64).ln()
}

/// `Omega - alpha (R_Q - R_train)`.
pub fn augmented_gap(omega: f64, alpha: f64, risk_gap: f64) -> f64 {
    omega - alpha * risk_gap
}

/// Risks of the student and the derived gaps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OmegaQuantities {
    pub r_test: Estimate,
    pub r_train: Estimate,
    pub r_q: Estimate,
    /// `E_train[-t^T ln f]`.
    pub r_d_train: Estimate,
    pub alpha: f64,
    pub omega: Estimate,
    pub omega_aug: Estimate,
    pub psi: Estimate,
    pub delta: Estimate,
}

impl OmegaQuantities {
    /// `R_test - [(1 - alpha) R_train + alpha R_Q]`, evaluated term by term.
    pub fn omega_aug_direct(&self) -> f64 {
        self.r_test.value - ((1.0 - self.alpha) * self.r_train.value + self.alpha * self.r_q.value)
    }
}

/// Train-split expectations share `estimator` (and therefore its samples),
/// so `Delta = Omega + Psi` holds to rounding.
pub fn omega_quantities<T, S>(
    world: &World,
    teacher: &T,
    student: &S,
    q: &QSamples,
    alpha: f64,
    estimator: Estimator,
) -> Result<OmegaQuantities>
where
    T: Classifier + ?Sized,
    S: Classifier + ?Sized,
{
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(crate::error::Error::InvalidArgument(format!("alpha {alpha} outside (0, 1]")));
    }
    let test_estimator = match estimator {
        Estimator::MonteCarlo { samples, seed: s } => Estimator::MonteCarlo {
            samples,
            seed: seed::derive(s, "test"),
        },
        q => q,
    };
    let r_test = soft_risk(world, student, Split::Test, test_estimator)?;
    let r_train = soft_risk(world, student, Split::Train, estimator)?;
    let r_d_train = world.expectation(
        Split::Train,
        |x, _| {
            let f = student.predict(x);
            teacher
                .predict(x)
                .iter()
                .zip(&f)
                .filter(|(t, _)| **t > 0.0)
                .map(|(t, p)| -t * clamped_ln(*p))
                .sum()
        },
        estimator,
    )?;
    let r_q = q_risk(student, q);
    let omega = difference(r_test, r_train);
    let gap = difference(r_q, r_train);
    let omega_aug = Estimate {
        value: augmented_gap(omega.value, alpha, gap.value),
        std_err: (r_test.std_err.powi(2)
            + ((1.0 - alpha) * r_train.std_err).powi(2)
            + (alpha * r_q.std_err).powi(2))
        .sqrt(),
        samples: omega.samples,
    };
    let psi = difference(r_train, r_d_train);
    let delta = Estimate {
        value: omega.value + psi.value,
        std_err: difference(r_test, r_d_train).std_err,
        samples: omega.samples,
    };
    Ok(OmegaQuantities {
        r_test,
        r_train,
        r_q,
        r_d_train,
        alpha,
        omega,
        omega_aug,
        psi,
        delta,
    })
}

/// Everything needed to evaluate the bounds on a concrete configuration.
pub struct TheoryScenario<'a> {
    pub world: Arc<World>,
    pub teacher: &'a (dyn Classifier + 'a),
    pub student: &'a (dyn Classifier + 'a),
    pub q: QSamples,
    pub alpha: f64,
    pub probe_budget: usize,
    pub risk_samples: usize,
    pub seed: u64,
}

impl TheoryScenario<'_> {
    fn estimator(&self) -> Estimator {
        Estimator::MonteCarlo {
            samples: self.risk_samples,
            seed: seed::derive(self.seed, "risk"),
        }
    }
}

/// Estimates carry 3 standard errors of slack in every bound check.
pub const SLACK_SE: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TheoryReport {
    pub num_classes: usize,
    pub deltas: Deltas,
    pub tau_sigma: Option<TauSigma>,
    pub q_size: usize,
    pub eps_aug: Estimate,
    pub theta: std::result::Result<f64, Unsatisfied>,
    pub quantities: OmegaQuantities,
}

impl TheoryReport {
    pub fn omega_positive(&self) -> bool {
        self.quantities.omega.value > 0.0
    }

    pub fn deltas_small(&self) -> bool {
        self.deltas.delta_t + self.deltas.delta_s < 1.0 / self.num_classes as f64
    }

    pub fn support_ordered(&self) -> bool {
        self.tau_sigma.is_some_and(|ts| ts.ordered())
    }

    pub fn theta_positive(&self) -> bool {
        matches!(self.theta, Ok(t) if t > 0.0)
    }

    /// `alpha <= min{1, Omega / (2 Theta)}`.
    pub fn alpha_admissible(&self) -> bool {
        match self.theta {
            Ok(t) if t > 0.0 => self.quantities.alpha <= 1f64.min(self.quantities.omega.value / (2.0 * t)),
            _ => false,
        }
    }

    pub fn assumptions_hold(&self) -> bool {
        self.omega_positive()
            && self.deltas_small()
            && self.support_ordered()
            && self.theta_positive()
            && self.alpha_admissible()
    }

    /// `min{Omega - Theta, Omega / 2}`, when `Theta` exists.
    pub fn bound(&self) -> Option<f64> {
        let om = self.quantities.omega.value;
        self.theta.as_ref().ok().map(|t| (om - t).min(om / 2.0))
    }

    /// `Omega - alpha Theta`, the intermediate upper bound on `Omega_aug`.
    pub fn omega_minus_alpha_theta(&self) -> Option<f64> {
        self.theta
            .as_ref()
            .ok()
            .map(|t| self.quantities.omega.value - self.quantities.alpha * t)
    }

    /// Standard error of `|Omega_aug| - bound`.
    pub fn bound_std_err(&self) -> f64 {
        let q = &self.quantities;
        q.omega_aug.std_err.hypot(q.omega.std_err).hypot(self.eps_aug.std_err)
    }

    /// `|Omega_aug| <= bound` up to the slack; `None` if the assumptions fail.
    pub fn bound_holds(&self) -> Option<bool> {
        if !self.assumptions_hold() {
            return None;
        }
        let b = self.bound()?;
        Some(self.quantities.omega_aug.value.abs() <= b + SLACK_SE * self.bound_std_err())
    }

    /// `|Omega_aug - (Omega - alpha (R_Q - R_train))|`, computed from the raw risks.
    pub fn identity_residual(&self) -> f64 {
        (self.quantities.omega_aug_direct() - self.quantities.omega_aug.value).abs()
    }

    pub fn failed_assumptions(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if !self.omega_positive() {
            out.push("omega_positive");
        }
        if !self.deltas_small() {
            out.push("deltas_small");
        }
        if !self.support_ordered() {
            out.push("sigma_below_tau");
        }
        if !self.theta_positive() {
            out.push("theta_positive");
        }
        if !self.alpha_admissible() {
            out.push("alpha_admissible");
        }
        out
    }

    /// `key value [std_err]` lines; flags are recomputed on every call.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{THEORY_SCHEMA}");
        let q = &self.quantities;
        let mut est = |k: &str, e: &Estimate| {
            let _ = writeln!(out, "{k} {:.17e} {:.17e}", e.value, e.std_err);
        };
        est("omega", &q.omega);
        est("omega_aug", &q.omega_aug);
        est("psi", &q.psi);
        est("delta", &q.delta);
        est("r_test", &q.r_test);
        est("r_train", &q.r_train);
        est("r_q", &q.r_q);
        est("r_d_train", &q.r_d_train);
        est("eps_aug", &self.eps_aug);
        let _ = writeln!(out, "alpha {:.17e}", q.alpha);
        let _ = writeln!(out, "num_classes {}", self.num_classes);
        let _ = writeln!(out, "delta_t {:.17e}", self.deltas.delta_t);
        let _ = writeln!(out, "delta_s {:.17e}", self.deltas.delta_s);
        let _ = writeln!(out, "teacher_probes {}", self.deltas.teacher_probes);
        let _ = writeln!(out, "student_probes {}", self.deltas.student_probes);
        let _ = writeln!(out, "q_size {}", self.q_size);
        match self.tau_sigma {
            Some(ts) => {
                let _ = writeln!(out, "tau {:.17e}\nsigma {:.17e}", ts.tau, ts.sigma);
            }
            None => out.push_str("tau none\nsigma none\n"),
        }
        match &self.theta {
            Ok(t) => {
                let _ = writeln!(out, "theta {t:.17e}");
            }
            Err(u) => {
                let _ = writeln!(out, "theta none ({})", u.0);
            }
        }
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |v| format!("{v:.17e}"));
        let _ = writeln!(out, "bound {}", opt(self.bound()));
        let _ = writeln!(out, "omega_minus_alpha_theta {}", opt(self.omega_minus_alpha_theta()));
        let _ = writeln!(out, "bound_std_err {:.17e}", self.bound_std_err());
        let _ = writeln!(out, "identity_residual {:.17e}", self.identity_residual());
        let flag = |b: bool| if b { "true" } else { "false" };
        let _ = writeln!(out, "flag omega_positive {}", flag(self.omega_positive()));
        let _ = writeln!(out, "flag deltas_small {}", flag(self.deltas_small()));
        let _ = writeln!(out, "flag sigma_below_tau {}", flag(self.support_ordered()));
        let _ = writeln!(out, "flag theta_positive {}", flag(self.theta_positive()));
        let _ = writeln!(out, "flag alpha_admissible {}", flag(self.alpha_admissible()));
        let _ = writeln!(
            out,
            "flag bound_holds {}",
            self.bound_holds().map_or("not_applicable", flag)
        );
        out
    }
}

/// Computes every quantity of the scenario. Assumption failures show up as
/// report flags, never as errors.
pub fn verify_proposition(s: &TheoryScenario<'_>) -> Result<TheoryReport> {
    let est = s.estimator();
    let deltas = measure_deltas(&s.world, s.teacher, s.student, &s.q, s.probe_budget, s.seed);
    let tau_sigma = measure_tau_sigma(&s.q, s.teacher, s.student);
    let eps_aug = epsilon_aug(&s.world, &s.q, est)?;
    let l = s.world.num_classes();
    let theta_v = match tau_sigma {
        Some(ts) => theta(ts.tau, ts.sigma, deltas.delta_s, deltas.delta_t, l, eps_aug.value),
        None => Err(Unsatisfied("empty augmentation sample".into())),
    };
    let quantities = omega_quantities(&s.world, s.teacher, s.student, &s.q, s.alpha, est)?;
    Ok(TheoryReport {
        num_classes: l,
        deltas,
        tau_sigma,
        q_size: s.q.len(),
        eps_aug,
        theta: theta_v,
        quantities,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LemmaReport {
    pub delta_t: f64,
    pub num_classes: usize,
    /// `|R_train(t) - R_Q(t)|`.
    pub lhs: Estimate,
    pub eps_aug: Estimate,
}

impl LemmaReport {
    /// `delta_t L < 1` and a finite left side (an empty `Q` has none).
    pub fn applicable(&self) -> bool {
        self.delta_t * (self.num_classes as f64) < 1.0 && self.lhs.value.is_finite()
    }

    pub fn rhs(&self) -> f64 {
        lemma_log_term(self.delta_t, self.num_classes) + self.eps_aug.value
    }

    pub fn holds(&self) -> Option<bool> {
        self.applicable().then(|| {
            let se = self.lhs.std_err.hypot(self.eps_aug.std_err);
            self.lhs.value <= self.rhs() + SLACK_SE * se
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{THEORY_SCHEMA}");
        let _ = writeln!(out, "lemma_delta_t {:.17e}", self.delta_t);
        let _ = writeln!(out, "lemma_lhs {:.17e} {:.17e}", self.lhs.value, self.lhs.std_err);
        let _ = writeln!(out, "lemma_eps_aug {:.17e} {:.17e}", self.eps_aug.value, self.eps_aug.std_err);
        let _ = writeln!(out, "lemma_rhs {:.17e}", self.rhs());
        let _ = writeln!(
            out,
            "flag lemma_holds {}",
            self.holds().map_or("not_applicable", |b| if b { "true" } else { "false" })
        );
        out
    }
}

/// Both sides of the teacher-risk lemma. `delta_t` is the measured teacher
/// error (use [`measure_deltas`]) or a declared bound.
pub fn verify_lemma(s: &TheoryScenario<'_>, delta_t: f64) -> Result<LemmaReport> {
    let est = s.estimator();
    let train = soft_risk(&s.world, s.teacher, Split::Train, est)?;
    let lhs = absolute(difference(train, q_risk(s.teacher, &s.q)));
    Ok(LemmaReport {
        delta_t,
        num_classes: s.world.num_classes(),
        lhs,
        eps_aug: epsilon_aug(&s.world, &s.q, est)?,
    })
}
