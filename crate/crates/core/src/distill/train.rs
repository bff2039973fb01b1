use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, Classifier};
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::models::{cosine_lr, AdamWConfig, MlpClassifier, OptimizerState};
use crate::seed;
use crate::synthworld::GroupedDataset;

use super::loss::{combined_loss, edrm_loss, entropy, erm_loss, EdrmForm};
use super::mix::{convex_mix, mask_mix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Erm,
    Edrm,
    ErmPlusEdrm,
}

impl LossMode {
    pub fn needs_teacher(&self) -> bool {
        !matches!(self, LossMode::Erm)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LossMode::Erm => "erm",
            LossMode::Edrm => "edrm",
            LossMode::ErmPlusEdrm => "erm+edrm",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixMode {
    None,
    Mask,
    Convex,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss_mode: LossMode,
    pub edrm_form: EdrmForm,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub mix_mode: MixMode,
    pub mix_probability: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_mode: LossMode::Edrm,
            edrm_form: EdrmForm::Kl,
            epochs: 100,
            batch_size: 128,
            base_lr: 1e-2,
            weight_decay: 1e-4,
            mix_mode: MixMode::None,
            mix_probability: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub learning_rate: f64,
    pub val_restricted_acc: f64,
    /// Configured loss on `val_restricted`; breaks accuracy ties.
    pub val_restricted_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Configured loss on the unmixed training set before the first update.
    pub initial_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
    /// Empirical label risk of the selected checkpoint on the training data.
    pub train_erm_risk: f64,
    /// Empirical distilled risk (cross-entropy form) on the training data, when a teacher exists.
    pub train_edrm_risk: Option<f64>,
}

pub const TRAIN_REPORT_SCHEMA: &str = "# shiftkd train-report v1";

impl TrainReport {
    pub fn best_val_acc(&self) -> f64 {
        self.epochs[self.selected_epoch].val_restricted_acc
    }

    /// One `key value` record per line; epochs as `epoch <i> loss <l> lr <lr> val_restricted_acc <a>`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{TRAIN_REPORT_SCHEMA}");
        let _ = writeln!(out, "initial_loss {:.17e}", self.initial_loss);
        let _ = writeln!(out, "selected_epoch {}", self.selected_epoch);
        let _ = writeln!(out, "train_erm_risk {:.17e}", self.train_erm_risk);
        match self.train_edrm_risk {
            Some(r) => {
                let _ = writeln!(out, "train_edrm_risk {r:.17e}");
            }
            None => out.push_str("train_edrm_risk none\n"),
        }
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "epoch {} loss {:.17e} lr {:.17e} val_restricted_acc {:.17e} val_restricted_loss {:.17e}",
                e.epoch, e.loss, e.learning_rate, e.val_restricted_acc, e.val_restricted_loss
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{TRAIN_REPORT_SCHEMA}");
        out.push_str("epoch,loss,learning_rate,val_restricted_acc,val_restricted_loss,selected\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{}",
                e.epoch,
                e.loss,
                e.learning_rate,
                e.val_restricted_acc,
                e.val_restricted_loss,
                u8::from(e.epoch == self.selected_epoch)
            );
        }
        out
    }
}

fn accuracy<C: Classifier + ?Sized>(model: &C, data: &GroupedDataset) -> f64 {
    let correct = data
        .examples()
        .iter()
        .filter(|e| argmax(&model.predict(&e.x)) == e.y)
        .count();
    correct as f64 / data.len() as f64
}

struct Targets {
    /// Summed target distribution per example (`L x b`).
    matrix: Tensor<f64>,
    /// Constant offset that turns the cross-entropy value into the configured form.
    offset: f64,
}

fn example_targets(
    mode: LossMode,
    form: EdrmForm,
    label: &[f64],
    teacher: Option<&[f64]>,
) -> (Vec<f64>, f64) {
    let mut t = vec![0.0; label.len()];
    let mut offset = 0.0;
    if matches!(mode, LossMode::Erm | LossMode::ErmPlusEdrm) {
        t.iter_mut().zip(label).for_each(|(a, b)| *a += b);
    }
    if mode.needs_teacher() {
        let tp = teacher.expect("teacher checked");
        t.iter_mut().zip(tp).for_each(|(a, b)| *a += b);
        if form == EdrmForm::Kl && mode == LossMode::Edrm {
            offset -= entropy(tp);
        }
    }
    (t, offset)
}

/// Mean configured loss of `model` on `data` without mixing.
fn dataset_loss(
    model: &MlpClassifier<f64>,
    data: &GroupedDataset,
    teacher_probs: Option<&[Vec<f64>]>,
    cfg: &TrainConfig,
) -> f64 {
    data.examples()
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let p = model.predict(&e.x);
            match cfg.loss_mode {
                LossMode::Erm => erm_loss(&p, e.y),
                LossMode::Edrm => edrm_loss(&p, &teacher_probs.expect("teacher")[i], cfg.edrm_form),
                LossMode::ErmPlusEdrm => combined_loss(&p, e.y, &teacher_probs.expect("teacher")[i]),
            }
        })
        .sum::<f64>()
        / data.len() as f64
}

/// Minibatch AdamW training with a cosine schedule; keeps the epoch with the
/// best accuracy on `val_restricted`. Accuracy ties go to the lower
/// validation loss, then to the earlier epoch: on easy restricted splits the
/// accuracy saturates within the first epoch.
pub fn train_student(
    student: MlpClassifier<f64>,
    data: &GroupedDataset,
    teacher: Option<&(dyn Classifier + '_)>,
    val_restricted: &GroupedDataset,
    cfg: &TrainConfig,
) -> Result<(MlpClassifier<f64>, TrainReport)> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if val_restricted.is_empty() {
        return Err(Error::Empty("restricted validation set"));
    }
    if cfg.loss_mode.needs_teacher() && teacher.is_none() {
        return Err(Error::InvalidArgument(format!("loss mode {} needs a teacher", cfg.loss_mode.as_str())));
    }
    if !(0.0..=1.0).contains(&cfg.mix_probability) {
        return Err(Error::InvalidArgument("mix_probability must lie in [0, 1]".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("epochs and batch_size must be positive".into()));
    }
    let l = data.num_classes();
    let n = data.len();
    let teacher_probs: Option<Vec<Vec<f64>>> = teacher.map(|t| data.examples().par_iter().map(|e| t.predict(&e.x)).collect());
    let val_teacher: Option<Vec<Vec<f64>>> =
        teacher.map(|t| val_restricted.examples().par_iter().map(|e| t.predict(&e.x)).collect());

    let mut model = student;
    let initial_loss = dataset_loss(&model, data, teacher_probs.as_deref(), cfg);
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut opt = OptimizerState::new(AdamWConfig {
        learning_rate: cfg.base_lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut best: Option<(f64, f64, usize, Vec<f64>)> = None;
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = seed::rng(seed::derive_index(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut lr = cfg.base_lr;
        for batch in order.chunks(cfg.batch_size) {
            let mut columns = Vec::with_capacity(batch.len());
            let mut targets = Tensor::zeros(l, batch.len());
            let mut offset = 0.0;
            for (j, &i) in batch.iter().enumerate() {
                let e = &data.examples()[i];
                let mix = cfg.mix_mode != MixMode::None && rng.random::<f64>() < cfg.mix_probability;
                let (x, label, tp) = if mix {
                    let partner = &data.examples()[rng.random_range(0..n)];
                    let s = rng.random::<u64>();
                    let m = match cfg.mix_mode {
                        MixMode::Mask => mask_mix(&e.x, e.y, &partner.x, partner.y, l, s),
                        _ => convex_mix(&e.x, e.y, &partner.x, partner.y, l, s),
                    };
                    // teacher targets come from the mixed input itself
                    let tp = teacher.map(|t| t.predict(&m.x));
                    (m.x, m.soft_label, tp)
                } else {
                    let mut oh = vec![0.0; l];
                    oh[e.y] = 1.0;
                    (e.x.clone(), oh, teacher_probs.as_ref().map(|tp| tp[i].clone()))
                };
                let (t, off) = example_targets(cfg.loss_mode, cfg.edrm_form, &label, tp.as_deref());
                for (c, v) in t.into_iter().enumerate() {
                    targets.set(c, j, v);
                }
                offset += off;
                columns.push(x);
            }
            let tg = Targets {
                matrix: targets,
                offset: offset / batch.len() as f64,
            };
            let mut tape = Tape::new();
            let xv = tape.leaf(Tensor::from_columns(&columns));
            let (leaves, logits) = model.record(&mut tape, xv);
            let lp = tape.log_softmax(logits);
            let tv = tape.leaf(tg.matrix);
            let prod = tape.mul(tv, lp);
            let s = tape.sum(prod);
            tape.combine(&[(s, -1.0 / batch.len() as f64)], 0.0);
            let value = tape.forward()?.item();
            let grads = tape.backward()?;
            let gs: Vec<&Tensor<f64>> = leaves.iter().map(|v| grads.wrt(*v)).collect();
            lr = cosine_lr(cfg.base_lr, global_step, total_steps)?;
            opt.set_learning_rate(lr);
            opt.step(&mut model.params_mut(), &gs)?;
            global_step += 1;
            epoch_loss += (value + tg.offset) * batch.len() as f64;
        }
        let val_acc = accuracy(&model, val_restricted);
        let val_loss = dataset_loss(&model, val_restricted, val_teacher.as_deref(), cfg);
        if best
            .as_ref()
            .is_none_or(|(a, l, _, _)| val_acc > *a || (val_acc == *a && val_loss < *l))
        {
            best = Some((val_acc, val_loss, epoch, model.flat_params()));
        }
        records.push(EpochRecord {
            epoch,
            loss: epoch_loss / n as f64,
            learning_rate: lr,
            val_restricted_acc: val_acc,
            val_restricted_loss: val_loss,
        });
    }
    let (_, _, selected_epoch, params) = best.expect("at least one epoch");
    model.set_flat_params(&params)?;
    let train_erm_risk = data
        .examples()
        .iter()
        .map(|e| erm_loss(&model.predict(&e.x), e.y))
        .sum::<f64>()
        / n as f64;
    let train_edrm_risk = teacher_probs.as_ref().map(|tp| {
        data.examples()
            .iter()
            .zip(tp)
            .map(|(e, t)| edrm_loss(&model.predict(&e.x), t, EdrmForm::CrossEntropy))
            .sum::<f64>()
            / n as f64
    });
    Ok((
        model,
        TrainReport {
            initial_loss,
            epochs: records,
            selected_epoch,
            train_erm_risk,
            train_edrm_risk,
        },
    ))
}

/// Learning rates and weight decays searched by [`grid_search`].
pub fn hparam_grid() -> Vec<(f64, f64)> {
    let lrs = [1e-2, 1e-3, 1e-4, 1e-5];
    let wds = [1e0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7];
    lrs.iter().flat_map(|lr| wds.iter().map(move |wd| (*lr, *wd))).collect()
}

/// Trains one student per grid point in parallel and returns the one with
/// the best restricted-validation accuracy (ties: earliest grid point).
pub fn grid_search(
    student: &MlpClassifier<f64>,
    data: &GroupedDataset,
    teacher: Option<&(dyn Classifier + '_)>,
    val_restricted: &GroupedDataset,
    base: &TrainConfig,
    grid: &[(f64, f64)],
) -> Result<(usize, MlpClassifier<f64>, TrainReport)> {
    let runs: Vec<Result<(MlpClassifier<f64>, TrainReport)>> = grid
        .par_iter()
        .map(|&(lr, wd)| {
            let cfg = TrainConfig {
                base_lr: lr,
                weight_decay: wd,
                ..base.clone()
            };
            train_student(student.clone(), data, teacher, val_restricted, &cfg)
        })
        .collect();
    let mut best: Option<(usize, MlpClassifier<f64>, TrainReport)> = None;
    for (i, r) in runs.into_iter().enumerate() {
        let (m, rep) = r?;
        if best.as_ref().is_none_or(|(_, _, b)| rep.best_val_acc() > b.best_val_acc()) {
            best = Some((i, m, rep));
        }
    }
    best.ok_or(Error::Empty("hyperparameter grid"))
}
