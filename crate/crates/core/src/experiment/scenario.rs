//! The constructed scenario checked by `verify-theory`: exact teacher, an
//! EDRM student, and a ConfiG batch restricted to the support filter
//! `t_y >= tau_min, f_y <= sigma_max`.

use std::fmt::Write as _;

use crate::augment::{generate_batch, AugmentMethod, Generator, Participants};
use crate::distill::LossMode;
use crate::error::Result;
use crate::models::{MlpClassifier, Teacher};
use crate::seed;
use crate::theory::{verify_lemma, verify_proposition, LemmaReport, QSamples, TheoryReport, TheoryScenario};

use super::config::{ExperimentConfig, TeacherSpec};
use super::run::{prepare, train_tagged, Prepared};

pub struct TheoryOutcome {
    pub report: TheoryReport,
    pub lemmas: Vec<LemmaReport>,
    /// ConfiG samples before the support filter.
    pub generated: usize,
    pub student: MlpClassifier<f64>,
    pub q: QSamples,
}

impl TheoryOutcome {
    /// Proposition report followed by one block per lemma point.
    pub fn to_text(&self) -> String {
        let mut out = self.report.to_text();
        let _ = writeln!(out, "generated {}", self.generated);
        for l in &self.lemmas {
            let body = l.to_text();
            // drop the repeated schema line
            out.push_str(body.split_once('\n').map_or("", |(_, rest)| rest));
        }
        out
    }

    /// The proposition bound holds (with its assumptions) and every lemma point holds.
    pub fn passed(&self) -> bool {
        self.report.bound_holds() == Some(true) && self.lemmas.iter().all(|l| l.holds() != Some(false))
    }
}

/// Default mixing weight `min{1, Omega / (2 Theta)} / 2`; `None` without a positive `Theta` and `Omega`.
pub fn default_alpha(report: &TheoryReport) -> Option<f64> {
    let omega = report.quantities.omega.value;
    match report.theta {
        Ok(t) if t > 0.0 && omega > 0.0 => Some(1f64.min(omega / (2.0 * t)) / 2.0),
        _ => None,
    }
}

fn scenario<'a>(p: &Prepared, cfg: &ExperimentConfig, teacher: &'a Teacher, student: &'a MlpClassifier<f64>, q: QSamples, alpha: f64) -> TheoryScenario<'a> {
    TheoryScenario {
        world: p.world.clone(),
        teacher,
        student,
        q,
        alpha,
        probe_budget: cfg.theory.probe_budget,
        risk_samples: cfg.theory.risk_samples,
        seed: seed::derive(p.seed, "theory"),
    }
}

pub fn constructed_scenario(cfg: &ExperimentConfig, seed: u64) -> Result<TheoryOutcome> {
    let mut exact = cfg.clone();
    exact.world = cfg.theory.world.clone();
    exact.teacher = TeacherSpec::ExactBayes;
    exact.data.train = cfg.theory.train_samples;
    exact.student.hidden = cfg.theory.student_hidden.clone();
    let p = prepare(&exact, seed)?;
    let (student, _) = train_tagged(&p, &exact, &p.train, LossMode::Edrm, cfg.theory.student_epochs, "theory")
        .map_err(|e| e.in_stage("theory-student"))?;
    let batch = (|| -> Result<_> {
        let generator = Generator::with_config(&p.world, cfg.augment.generator.clone(), seed::derive(seed, "generator"))?;
        let who = Participants {
            teacher: &p.teacher,
            student: &student,
            generator: &generator,
        };
        generate_batch(AugmentMethod::Config, &p.train, &who, &cfg.theory.augment, 1, seed::derive(seed, "theory-augment"))
    })()
    .map_err(|e| e.in_stage("theory-augment"))?;
    let q = QSamples::from_batch(&batch).filtered(&p.teacher, &student, cfg.theory.tau_min, cfg.theory.sigma_max);

    let run = || -> Result<_> {
        let probe = verify_proposition(&scenario(&p, cfg, &p.teacher, &student, q.clone(), 1.0))?;
        let alpha = cfg.theory.alpha.or_else(|| default_alpha(&probe)).unwrap_or(0.5);
        let report = verify_proposition(&scenario(&p, cfg, &p.teacher, &student, q.clone(), alpha))?;
        let mut lemmas = Vec::new();
        for &delta in &cfg.theory.lemma_deltas {
            let teacher = Teacher::noisy_with_delta(p.world.clone(), p.world.spec().reference_split, delta)?;
            let declared = teacher.declared_delta().unwrap_or(delta);
            lemmas.push(verify_lemma(&scenario(&p, cfg, &teacher, &student, q.clone(), alpha), declared)?);
        }
        Ok((report, lemmas))
    };
    let (report, lemmas) = run().map_err(|e| e.in_stage("theory"))?;
    Ok(TheoryOutcome {
        report,
        lemmas,
        generated: batch.len(),
        student,
        q,
    })
}
