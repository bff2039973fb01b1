//! Experiment orchestration behind the command-line tool: configuration,
//! seeded stages, and the artifacts each command writes.
//!
//! Output layout: `<out>/config.toml` holds the full configuration; per-seed
//! artifacts go to `<out>/seed-<n>/`. Every table starts with a schema
//! comment, and no file contains timestamps, so reruns are byte-identical.

mod config;
mod run;
mod scenario;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

pub use config::{AugmentSpec, DataSpec, ExperimentConfig, MetricsSpec, StudentSpec, TeacherSpec, TheorySpec, CONFIG_SCHEMA};
pub use run::{
    aux_stage, augment_stage, difficulty_csv, evaluate, final_stage, prepare, run_from_aux, run_pipeline, train_tagged,
    Evaluation, FinalStage, PipelineRun, Prepared, DIFFICULTY_SCHEMA, SUMMARY_SCHEMA,
};
pub use scenario::{constructed_scenario, default_alpha, TheoryOutcome};

use crate::augment::AugmentMethod;
use crate::distill::{LossMode, TrainReport};
use crate::error::{Error, Result};
use crate::metrics::{difficulty_scores, DifficultyScores};
use crate::models::{checkpoint, MlpClassifier};
use run::{create_dir, write_file};

pub const SWEEP_SCHEMA: &str = "# shiftkd multiplicity-sweep v1";
pub const COMPARISON_SCHEMA: &str = "# shiftkd method-comparison v1";

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Writes `config.toml` into `out`.
pub fn dump_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    write_file(&out.join("config.toml"), &cfg.to_toml())
}

/// Writes the four splits of `seed` as CSV files.
pub fn cmd_bench(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<Prepared> {
    let p = prepare(cfg, seed)?;
    let dir = seed_dir(out, seed);
    create_dir(&dir)?;
    p.train.write_csv(&dir.join("train.csv"))?;
    p.val.write_csv(&dir.join("val.csv"))?;
    p.val_restricted.write_csv(&dir.join("val_restricted.csv"))?;
    p.test.write_csv(&dir.join("test.csv"))?;
    Ok(p)
}

pub struct TrainOutcome {
    pub student: MlpClassifier<f64>,
    pub report: TrainReport,
    pub eval: Evaluation,
}

/// Trains a student on the real training split with the configured loss.
/// Uses the seeds of the pipeline's final stage, so it matches a pipeline
/// run with method `none`.
pub fn cmd_train(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<TrainOutcome> {
    let p = prepare(cfg, seed)?;
    let (student, report) = train_tagged(&p, cfg, &p.train, cfg.train.loss_mode, cfg.train.epochs, "final")
        .map_err(|e| e.in_stage("final"))?;
    let eval = evaluate(&p, cfg, &student)?;
    let dir = seed_dir(out, seed);
    create_dir(&dir)?;
    let k = p.world.num_spurious_bits();
    checkpoint::save(&dir.join("student.ckpt"), &student, 1.0)?;
    write_file(&dir.join("train_report.txt"), &report.to_text())?;
    write_file(&dir.join("train_curve.csv"), &report.to_csv())?;
    write_file(&dir.join("metrics.csv"), &eval.metrics.to_csv(k))?;
    write_file(&dir.join("agreement.csv"), &eval.agreement.to_csv(k))?;
    Ok(TrainOutcome { student, report, eval })
}

/// Stages 1 and 2: auxiliary student and augmentation batch.
pub fn cmd_augment(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<Option<DifficultyScores>> {
    let p = prepare(cfg, seed)?;
    let (aux, report) = aux_stage(&p, cfg)?;
    let batch = augment_stage(&p, cfg, &aux)?;
    let dir = seed_dir(out, seed);
    create_dir(&dir)?;
    checkpoint::save(&dir.join("aux_student.ckpt"), &aux, 1.0)?;
    write_file(&dir.join("aux_train_report.txt"), &report.to_text())?;
    batch.write(&dir.join("augmentation_batch.csv"), &dir.join("augmentation_trace.txt"))?;
    if batch.is_empty() {
        return Ok(None);
    }
    let d = difficulty_scores(&aux, &batch, &p.teacher)?;
    write_file(&dir.join("difficulty.csv"), &difficulty_csv(&d))?;
    Ok(Some(d))
}

/// All three stages; artifacts go to `<out>/seed-<n>/`.
pub fn cmd_pipeline(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<PipelineRun> {
    let p = prepare(cfg, seed)?;
    let run = run_pipeline(&p, cfg)?;
    run.write(&seed_dir(out, seed), cfg, seed)?;
    Ok(run)
}

/// One row of the multiplicity sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub multiplicity: usize,
    pub seed: u64,
    pub worst_group: f64,
    pub group_mean: f64,
    pub sample_mean: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{SWEEP_SCHEMA}");
    out.push_str("multiplicity,seed,worst_group,group_mean,sample_mean\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.17e},{:.17e},{:.17e}",
            r.multiplicity, r.seed, r.worst_group, r.group_mean, r.sample_mean
        );
    }
    out
}

/// Runs the pipeline for every multiplicity and seed (`m = 0` disables
/// augmentation). Seeds run in parallel and share one auxiliary student
/// across multiplicities.
pub fn cmd_sweep_multiplicity(cfg: &ExperimentConfig, multiplicities: &[usize], out: &Path) -> Result<Vec<SweepRow>> {
    if multiplicities.is_empty() {
        return Err(Error::InvalidArgument("multiplicity list is empty".into()));
    }
    let per_seed: Vec<Result<Vec<SweepRow>>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let p = prepare(cfg, seed)?;
            let (aux, aux_report) = aux_stage(&p, cfg)?;
            let aux_eval = evaluate(&p, cfg, &aux)?;
            let mut rows = Vec::new();
            for &m in multiplicities {
                let method = if m == 0 { AugmentMethod::None } else { cfg.augment.method };
                let c = cfg.clone().with_method(method, Some(m));
                let run = run_from_aux(&p, &c, aux.clone(), aux_report.clone(), aux_eval.clone())?;
                run.write(&out.join(format!("m-{m}")).join(format!("seed-{seed}")), &c, seed)?;
                let f = &run.final_eval.metrics;
                rows.push(SweepRow {
                    multiplicity: m,
                    seed,
                    worst_group: f.worst_group,
                    group_mean: f.group_mean,
                    sample_mean: f.sample_mean,
                });
            }
            Ok(rows)
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_seed {
        rows.extend(r?);
    }
    rows.sort_by_key(|r| (r.multiplicity, r.seed));
    create_dir(out)?;
    write_file(&out.join("sweep_multiplicity.csv"), &sweep_csv(&rows))?;
    Ok(rows)
}

/// Builds the constructed scenario and writes `theory_report.txt`.
pub fn cmd_verify_theory(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<TheoryOutcome> {
    let outcome = constructed_scenario(cfg, seed)?;
    let dir = seed_dir(out, seed);
    create_dir(&dir)?;
    write_file(&dir.join("theory_report.txt"), &outcome.to_text())?;
    Ok(outcome)
}

/// Evaluates a saved checkpoint on the test split of `seed`.
pub fn cmd_eval(cfg: &ExperimentConfig, seed: u64, checkpoint_path: &Path, out: &Path) -> Result<Evaluation> {
    let (mlp, temperature) = checkpoint::load::<f64>(checkpoint_path)?;
    let p = prepare(cfg, seed)?;
    let model = crate::models::TemperatureScaled { model: mlp, temperature };
    let eval = evaluate(&p, cfg, &model)?;
    let dir = seed_dir(out, seed);
    create_dir(&dir)?;
    let k = p.world.num_spurious_bits();
    write_file(&dir.join("eval_metrics.csv"), &eval.metrics.to_csv(k))?;
    write_file(&dir.join("eval_agreement.csv"), &eval.agreement.to_csv(k))?;
    Ok(eval)
}

/// Worst-group results of the method comparison for one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    /// `erm`, `edrm`, `erm+edrm` (no augmentation) or a generation method name (with EDRM).
    pub name: String,
    pub seed: u64,
    pub worst_group: f64,
    pub group_mean: f64,
    pub difficulty: Option<DifficultyScores>,
}

/// Plain students for each loss plus every generation method followed by
/// EDRM, all sharing one auxiliary student per seed.
pub fn compare_methods(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<ComparisonRow>> {
    let p = prepare(cfg, seed)?;
    let mut rows = Vec::new();
    for loss in [LossMode::Erm, LossMode::Edrm, LossMode::ErmPlusEdrm] {
        let (student, _) = train_tagged(&p, cfg, &p.train, loss, cfg.train.epochs, "final").map_err(|e| e.in_stage("final"))?;
        let m = evaluate(&p, cfg, &student)?.metrics;
        rows.push(ComparisonRow {
            name: loss.as_str().to_string(),
            seed,
            worst_group: m.worst_group,
            group_mean: m.group_mean,
            difficulty: None,
        });
    }
    let (aux, aux_report) = aux_stage(&p, cfg)?;
    let aux_eval = evaluate(&p, cfg, &aux)?;
    for method in AugmentMethod::GENERATORS {
        let c = cfg.clone().with_method(method, None).with_loss(LossMode::Edrm);
        let run = run_from_aux(&p, &c, aux.clone(), aux_report.clone(), aux_eval.clone())?;
        rows.push(ComparisonRow {
            name: method.as_str().to_string(),
            seed,
            worst_group: run.final_eval.metrics.worst_group,
            group_mean: run.final_eval.metrics.group_mean,
            difficulty: run.difficulty,
        });
    }
    Ok(rows)
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{COMPARISON_SCHEMA}");
    out.push_str("name,seed,worst_group,group_mean,acc_s,mean_r,mean_r_d\n");
    for r in rows {
        let d = |f: fn(&DifficultyScores) -> f64| r.difficulty.as_ref().map_or(String::new(), |d| format!("{:.17e}", f(d)));
        let _ = writeln!(
            out,
            "{},{},{:.17e},{:.17e},{},{},{}",
            r.name,
            r.seed,
            r.worst_group,
            r.group_mean,
            d(|d| d.acc_s),
            d(|d| d.mean_r),
            d(|d| d.mean_r_d)
        );
    }
    out
}

/// Runs `f` for every seed in parallel; results come back in seed order.
pub fn run_seeds<T, F>(seeds: &[u64], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    seeds.par_iter().map(|&s| f(s)).collect()
}
