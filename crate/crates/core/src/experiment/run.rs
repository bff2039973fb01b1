//! Pipeline stages. Every stage takes its randomness from sub-seeds of the
//! master seed, so a stage's output depends only on the config, the master
//! seed and the outputs of the stages it consumes.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use crate::augment::{build_augmented_dataset, generate_batch, AugmentationBatch, Generator, Participants};
use crate::distill::{train_student, LossMode, TrainConfig, TrainReport};
use crate::error::{Error, Result};
use crate::metrics::{agreement, difficulty_scores, group_metrics, spurious_mean_auc, AgreementReport, DifficultyScores, GroupMetricsReport};
use crate::models::{calibrate_temperature, checkpoint, init_mlp, MlpClassifier, Teacher};
use crate::seed;
use crate::synthworld::{make_world, GroupedDataset, Split, World};

use super::config::{ExperimentConfig, TeacherSpec};

pub const SUMMARY_SCHEMA: &str = "# shiftkd pipeline-summary v1";
pub const DIFFICULTY_SCHEMA: &str = "# shiftkd difficulty v1";

/// World, teacher and data splits of one master seed.
pub struct Prepared {
    pub seed: u64,
    pub world: Arc<World>,
    pub teacher: Teacher,
    pub train: GroupedDataset,
    pub val: GroupedDataset,
    pub val_restricted: GroupedDataset,
    pub test: GroupedDataset,
}

fn build_teacher(cfg: &ExperimentConfig, world: &Arc<World>, val: &GroupedDataset, seed: u64) -> Result<Teacher> {
    let reference = world.spec().reference_split;
    match &cfg.teacher {
        TeacherSpec::ExactBayes => Ok(Teacher::exact(world.clone(), reference)),
        TeacherSpec::NoisyBayes { delta } => Teacher::noisy_with_delta(world.clone(), reference, *delta),
        TeacherSpec::FrozenMlp { hidden, samples, epochs } => {
            let data = world.sample_split(reference, *samples, seed::derive(seed, "teacher-data"));
            let widths: Vec<usize> = std::iter::once(world.input_dim())
                .chain(hidden.iter().copied())
                .chain(std::iter::once(world.num_classes()))
                .collect();
            let init = init_mlp::<f64>(&widths, cfg.student.activation, seed::derive(seed, "teacher-init"))?;
            let tc = TrainConfig {
                loss_mode: LossMode::Erm,
                epochs: *epochs,
                seed: seed::derive(seed, "teacher-train"),
                ..cfg.train.clone()
            };
            let (mlp, _) = train_student(init, &data, None, val, &tc)?;
            let temperature = calibrate_temperature(&mlp, val)?;
            Ok(Teacher::FrozenMlp { mlp, temperature })
        }
    }
}

pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let data = || -> Result<_> {
        let world = Arc::new(make_world(cfg.world.clone(), seed::derive(seed, "world"))?);
        let train = world.sample_split(Split::Train, cfg.data.train, seed::derive(seed, "train"));
        let val = world.sample_split(Split::Val, cfg.data.val, seed::derive(seed, "val"));
        let val_restricted = world.sample_split(Split::ValRestricted, cfg.data.val, seed::derive(seed, "val-restricted"));
        let test = world.sample_split_balanced(Split::Test, cfg.data.test, seed::derive(seed, "test"))?;
        Ok((world, train, val, val_restricted, test))
    };
    let (world, train, val, val_restricted, test) = data().map_err(|e| e.in_stage("data"))?;
    let teacher = build_teacher(cfg, &world, &val, seed).map_err(|e| e.in_stage("teacher"))?;
    Ok(Prepared {
        seed,
        world,
        teacher,
        train,
        val,
        val_restricted,
        test,
    })
}

/// Trains a student on `data` with the configured schedule. `tag` names
/// the stage and keys its initialization and shuffling seeds.
pub fn train_tagged(
    p: &Prepared,
    cfg: &ExperimentConfig,
    data: &GroupedDataset,
    loss: LossMode,
    epochs: usize,
    tag: &str,
) -> Result<(MlpClassifier<f64>, TrainReport)> {
    let widths: Vec<usize> = std::iter::once(p.world.input_dim())
        .chain(cfg.student.hidden.iter().copied())
        .chain(std::iter::once(p.world.num_classes()))
        .collect();
    let init = init_mlp::<f64>(&widths, cfg.student.activation, seed::derive(p.seed, &format!("{tag}-init")))?;
    let tc = TrainConfig {
        loss_mode: loss,
        epochs,
        seed: seed::derive(p.seed, &format!("{tag}-train")),
        ..cfg.train.clone()
    };
    let teacher = loss.needs_teacher().then_some(&p.teacher as &dyn crate::classifier::Classifier);
    train_student(init, data, teacher, &p.val_restricted, &tc)
}

/// Stage 1: auxiliary student, always EDRM on the real data.
pub fn aux_stage(p: &Prepared, cfg: &ExperimentConfig) -> Result<(MlpClassifier<f64>, TrainReport)> {
    train_tagged(p, cfg, &p.train, LossMode::Edrm, cfg.train.epochs, "aux").map_err(|e| e.in_stage("aux"))
}

/// Stage 2: `m` augmentations per real example with the configured method.
pub fn augment_stage(p: &Prepared, cfg: &ExperimentConfig, aux: &MlpClassifier<f64>) -> Result<AugmentationBatch> {
    let run = || -> Result<_> {
        let generator = Generator::with_config(&p.world, cfg.augment.generator.clone(), seed::derive(p.seed, "generator"))?;
        let who = Participants {
            teacher: &p.teacher,
            student: aux,
            generator: &generator,
        };
        generate_batch(
            cfg.augment.method,
            &p.train,
            &who,
            &cfg.augment.params,
            cfg.augment.multiplicity,
            seed::derive(p.seed, "augment"),
        )
    };
    run().map_err(|e| e.in_stage("augment"))
}

pub struct FinalStage {
    pub student: MlpClassifier<f64>,
    pub report: TrainReport,
    pub alpha: f64,
    pub joint_size: usize,
}

/// Stage 3: final student on the real data plus the batch.
pub fn final_stage(p: &Prepared, cfg: &ExperimentConfig, batch: &AugmentationBatch) -> Result<FinalStage> {
    let run = || -> Result<_> {
        let (joint, alpha) = build_augmented_dataset(&p.train, batch, batch.multiplicity)?;
        let (student, report) = train_tagged(p, cfg, &joint, cfg.train.loss_mode, cfg.train.epochs, "final")?;
        Ok(FinalStage {
            student,
            report,
            alpha,
            joint_size: joint.len(),
        })
    };
    run().map_err(|e| e.in_stage("final"))
}

/// Test-split metrics of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: GroupMetricsReport,
    /// Argmax agreement with the teacher.
    pub agreement: AgreementReport,
    pub spurious_auc: Option<f64>,
}

pub fn evaluate<C: crate::classifier::Classifier + ?Sized>(p: &Prepared, cfg: &ExperimentConfig, model: &C) -> Result<Evaluation> {
    let run = || -> Result<_> {
        let spurious_auc = if cfg.metrics.spurious_auc {
            let sets = p.world.spurious_probe_sets(cfg.metrics.auc_probes, seed::derive(p.seed, "auc-probes"));
            Some(spurious_mean_auc(model, &sets)?)
        } else {
            None
        };
        Ok(Evaluation {
            metrics: group_metrics(model, &p.test)?,
            agreement: agreement(model, &p.teacher, &p.test)?,
            spurious_auc,
        })
    };
    run().map_err(|e| e.in_stage("evaluate"))
}

/// Everything one pipeline run produces.
pub struct PipelineRun {
    pub aux: MlpClassifier<f64>,
    pub aux_report: TrainReport,
    pub aux_eval: Evaluation,
    pub batch: AugmentationBatch,
    pub difficulty: Option<DifficultyScores>,
    pub final_stage: FinalStage,
    pub final_eval: Evaluation,
}

/// Stages 2 and 3 on top of an existing auxiliary student.
pub fn run_from_aux(
    p: &Prepared,
    cfg: &ExperimentConfig,
    aux: MlpClassifier<f64>,
    aux_report: TrainReport,
    aux_eval: Evaluation,
) -> Result<PipelineRun> {
    let batch = augment_stage(p, cfg, &aux)?;
    let difficulty = if batch.is_empty() {
        None
    } else {
        Some(difficulty_scores(&aux, &batch, &p.teacher).map_err(|e| e.in_stage("evaluate"))?)
    };
    let final_stage = final_stage(p, cfg, &batch)?;
    let final_eval = evaluate(p, cfg, &final_stage.student)?;
    Ok(PipelineRun {
        aux,
        aux_report,
        aux_eval,
        batch,
        difficulty,
        final_stage,
        final_eval,
    })
}

pub fn run_pipeline(p: &Prepared, cfg: &ExperimentConfig) -> Result<PipelineRun> {
    let (aux, aux_report) = aux_stage(p, cfg)?;
    let aux_eval = evaluate(p, cfg, &aux)?;
    run_from_aux(p, cfg, aux, aux_report, aux_eval)
}

pub(crate) fn write_file(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| Error::io(path, e))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn difficulty_csv(d: &DifficultyScores) -> String {
    format!(
        "{DIFFICULTY_SCHEMA}\nacc_s,mean_r,mean_r_d\n{:.17e},{:.17e},{:.17e}\n",
        d.acc_s, d.mean_r, d.mean_r_d
    )
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.17e}"))
}

impl PipelineRun {
    /// Single-row summary of the run.
    pub fn summary_csv(&self, cfg: &ExperimentConfig, seed: u64) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{SUMMARY_SCHEMA}");
        out.push_str(
            "seed,method,multiplicity,loss,alpha,train_size,joint_size,skipped,\
             worst_group,group_mean,sample_mean,spurious_mauc,\
             aux_worst_group,aux_group_mean,aux_sample_mean,acc_s,mean_r,mean_r_d\n",
        );
        let f = &self.final_eval.metrics;
        let a = &self.aux_eval.metrics;
        let d = self.difficulty;
        let _ = writeln!(
            out,
            "{seed},{},{},{},{:.17e},{},{},{},{:.17e},{:.17e},{:.17e},{},{:.17e},{:.17e},{:.17e},{},{},{}",
            cfg.augment.method,
            self.batch.multiplicity,
            cfg.train.loss_mode.as_str(),
            self.final_stage.alpha,
            self.final_stage.joint_size - self.batch.len(),
            self.final_stage.joint_size,
            self.batch.skipped,
            f.worst_group,
            f.group_mean,
            f.sample_mean,
            opt(self.final_eval.spurious_auc),
            a.worst_group,
            a.group_mean,
            a.sample_mean,
            opt(d.map(|d| d.acc_s)),
            opt(d.map(|d| d.mean_r)),
            opt(d.map(|d| d.mean_r_d)),
        );
        out
    }

    /// Writes checkpoints, the batch, reports and metric tables into `dir`.
    pub fn write(&self, dir: &Path, cfg: &ExperimentConfig, seed: u64) -> Result<()> {
        create_dir(dir)?;
        let k = self.batch.num_spurious_bits;
        checkpoint::save(&dir.join("aux_student.ckpt"), &self.aux, 1.0)?;
        checkpoint::save(&dir.join("final_student.ckpt"), &self.final_stage.student, 1.0)?;
        write_file(&dir.join("aux_train_report.txt"), &self.aux_report.to_text())?;
        write_file(&dir.join("aux_train_curve.csv"), &self.aux_report.to_csv())?;
        write_file(&dir.join("final_train_report.txt"), &self.final_stage.report.to_text())?;
        write_file(&dir.join("final_train_curve.csv"), &self.final_stage.report.to_csv())?;
        self.batch.write(&dir.join("augmentation_batch.csv"), &dir.join("augmentation_trace.txt"))?;
        write_file(&dir.join("aux_metrics.csv"), &self.aux_eval.metrics.to_csv(k))?;
        write_file(&dir.join("final_metrics.csv"), &self.final_eval.metrics.to_csv(k))?;
        write_file(&dir.join("aux_agreement.csv"), &self.aux_eval.agreement.to_csv(k))?;
        write_file(&dir.join("final_agreement.csv"), &self.final_eval.agreement.to_csv(k))?;
        if let Some(d) = &self.difficulty {
            write_file(&dir.join("difficulty.csv"), &difficulty_csv(d))?;
        }
        write_file(&dir.join("summary.csv"), &self.summary_csv(cfg, seed))
    }
}
