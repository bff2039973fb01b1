//! Evaluation metrics: accuracies aggregated over samples and groups,
//! prediction agreement, augmentation difficulty and class-wise spurious AUC.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentationBatch;
use crate::classifier::{argmax, Classifier};
use crate::distill::{edrm_loss, erm_loss, EdrmForm};
use crate::error::{Error, Result};
use crate::synthworld::{GroupKey, GroupedDataset};

pub const METRICS_SCHEMA: &str = "# shiftkd group-metrics v1";
pub const AGREEMENT_SCHEMA: &str = "# shiftkd agreement v1";

/// Correct and total counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub hits: usize,
    pub total: usize,
}

impl Tally {
    pub fn rate(&self) -> f64 {
        self.hits as f64 / self.total as f64
    }
}

fn tally_by_group<F>(data: &GroupedDataset, hit: F) -> Result<BTreeMap<GroupKey, Tally>>
where
    F: Fn(&[f64], usize) -> bool + Sync,
{
    if data.is_empty() {
        return Err(Error::Empty("evaluation data"));
    }
    let hits: Vec<bool> = data.examples().par_iter().map(|e| hit(&e.x, e.y)).collect();
    let mut map: BTreeMap<GroupKey, Tally> = BTreeMap::new();
    for (e, h) in data.examples().iter().zip(hits) {
        let t = map.entry(e.group).or_default();
        t.total += 1;
        t.hits += usize::from(h);
    }
    Ok(map)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Mean of `hits / total` over tallies, summed as an exact fraction and
/// divided once, so equal-sized groups reproduce the pooled rate bit for
/// bit. `None` when the fraction does not fit.
fn exact_mean_rate<'a>(tallies: impl Iterator<Item = &'a Tally> + Clone) -> Option<f64> {
    let mut lcm: u128 = 1;
    let mut k: u128 = 0;
    for t in tallies.clone() {
        let n = t.total as u128;
        lcm = lcm.checked_mul(n / gcd(lcm, n))?;
        k += 1;
    }
    let mut num: u128 = 0;
    for t in tallies {
        num = num.checked_add((t.hits as u128).checked_mul(lcm / t.total as u128)?)?;
    }
    let den = lcm.checked_mul(k)?;
    let g = gcd(num, den).max(1);
    let (num, den) = (num / g, den / g);
    const EXACT: u128 = 1 << 53;
    (num <= EXACT && den <= EXACT).then(|| num as f64 / den as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetricsReport {
    pub per_group: BTreeMap<GroupKey, Tally>,
    pub sample_mean: f64,
    pub group_mean: f64,
    pub worst_group: f64,
}

impl GroupMetricsReport {
    fn from_tallies(per_group: BTreeMap<GroupKey, Tally>) -> Self {
        let (hits, total) = per_group
            .values()
            .fold((0, 0), |(h, n), t| (h + t.hits, n + t.total));
        let rates: Vec<f64> = per_group.values().map(Tally::rate).collect();
        let group_mean = exact_mean_rate(per_group.values())
            .unwrap_or_else(|| rates.iter().sum::<f64>() / rates.len() as f64);
        Self {
            sample_mean: hits as f64 / total as f64,
            group_mean,
            worst_group: rates.iter().cloned().fold(f64::INFINITY, f64::min),
            per_group,
        }
    }

    pub fn best_group(&self) -> f64 {
        self.per_group.values().map(Tally::rate).fold(f64::NEG_INFINITY, f64::max)
    }

    /// One row per group followed by the three summary rows.
    pub fn to_csv(&self, num_spurious_bits: usize) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{METRICS_SCHEMA}");
        out.push_str("row,class,group_bits,correct,size,accuracy\n");
        for (g, t) in &self.per_group {
            let _ = writeln!(
                out,
                "group,{},{},{},{},{:.17e}",
                g.class_label,
                g.bits_string(num_spurious_bits),
                t.hits,
                t.total,
                t.rate()
            );
        }
        let total: usize = self.per_group.values().map(|t| t.total).sum();
        for (name, v) in [
            ("sample_mean", self.sample_mean),
            ("group_mean", self.group_mean),
            ("worst_group", self.worst_group),
        ] {
            let _ = writeln!(out, "{name},,,,{total},{v:.17e}");
        }
        out
    }
}

pub fn group_metrics<C: Classifier + ?Sized>(model: &C, data: &GroupedDataset) -> Result<GroupMetricsReport> {
    let per_group = tally_by_group(data, |x, y| argmax(&model.predict(x)) == y)?;
    Ok(GroupMetricsReport::from_tallies(per_group))
}

/// Fraction of examples classified correctly.
pub fn sample_mean_acc<C: Classifier + ?Sized>(model: &C, data: &GroupedDataset) -> Result<f64> {
    group_metrics(model, data).map(|r| r.sample_mean)
}

/// Unweighted mean of per-group accuracies over the groups present.
pub fn group_mean_acc<C: Classifier + ?Sized>(model: &C, data: &GroupedDataset) -> Result<f64> {
    group_metrics(model, data).map(|r| r.group_mean)
}

pub fn worst_group_acc<C: Classifier + ?Sized>(model: &C, data: &GroupedDataset) -> Result<f64> {
    group_metrics(model, data).map(|r| r.worst_group)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub overall: f64,
    pub per_group: BTreeMap<GroupKey, Tally>,
}

impl AgreementReport {
    pub fn to_csv(&self, num_spurious_bits: usize) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{AGREEMENT_SCHEMA}");
        out.push_str("row,class,group_bits,agree,size,agreement\n");
        for (g, t) in &self.per_group {
            let _ = writeln!(
                out,
                "group,{},{},{},{},{:.17e}",
                g.class_label,
                g.bits_string(num_spurious_bits),
                t.hits,
                t.total,
                t.rate()
            );
        }
        let total: usize = self.per_group.values().map(|t| t.total).sum();
        let _ = writeln!(out, "overall,,,,{total},{:.17e}", self.overall);
        out
    }
}

/// Fraction of examples on which both models predict the same class.
pub fn agreement<A, B>(a: &A, b: &B, data: &GroupedDataset) -> Result<AgreementReport>
where
    A: Classifier + ?Sized,
    B: Classifier + ?Sized,
{
    let per_group = tally_by_group(data, |x, _| argmax(&a.predict(x)) == argmax(&b.predict(x)))?;
    let (hits, total) = per_group.values().fold((0, 0), |(h, n), t| (h + t.hits, n + t.total));
    Ok(AgreementReport {
        overall: hits as f64 / total as f64,
        per_group,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyScores {
    /// Student accuracy against the preserved labels.
    pub acc_s: f64,
    /// Mean `-ln f_y`.
    pub mean_r: f64,
    /// Mean `-t^T ln f` with teacher outputs on the generated inputs.
    pub mean_r_d: f64,
}

pub fn difficulty_scores<S, T>(student: &S, batch: &AugmentationBatch, teacher: &T) -> Result<DifficultyScores>
where
    S: Classifier + ?Sized,
    T: Classifier + ?Sized,
{
    if batch.is_empty() {
        return Err(Error::Empty("augmentation batch"));
    }
    let rows: Vec<(f64, f64, f64)> = batch
        .samples
        .par_iter()
        .map(|s| {
            let f = student.predict(&s.x);
            let t = teacher.predict(&s.x);
            (
                f64::from(u8::from(argmax(&f) == s.y)),
                erm_loss(&f, s.y),
                edrm_loss(&f, &t, EdrmForm::CrossEntropy),
            )
        })
        .collect();
    let n = rows.len() as f64;
    let (a, r, rd) = rows
        .iter()
        .fold((0.0, 0.0, 0.0), |acc, v| (acc.0 + v.0, acc.1 + v.1, acc.2 + v.2));
    Ok(DifficultyScores {
        acc_s: a / n,
        mean_r: r / n,
        mean_r_d: rd / n,
    })
}

/// Probability that a positive score exceeds a negative one, ties counting
/// one half, via midranks of the pooled sample.
pub fn auc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::Empty("score set"));
    }
    let mut pooled: Vec<(f64, bool)> = positive
        .iter()
        .map(|v| (*v, true))
        .chain(negative.iter().map(|v| (*v, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * pooled[i..=j].iter().filter(|p| p.1).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (positive.len() as f64, negative.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Class-wise AUC separating class-`c` inputs (positives) from inputs that
/// carry only class `c`'s spurious feature (negatives), scored by the
/// model's probability of `c`, averaged over classes. Classes with an empty
/// set are skipped with a warning.
pub fn spurious_mean_auc<C: Classifier + ?Sized>(
    model: &C,
    per_class: &[(Vec<Vec<f64>>, Vec<Vec<f64>>)],
) -> Result<f64> {
    let mut aucs = Vec::new();
    for (c, (spurious_only, class_set)) in per_class.iter().enumerate() {
        if spurious_only.is_empty() || class_set.is_empty() {
            log::warn!("class {c}: empty probe set, skipped in spurious AUC");
            continue;
        }
        let score = |xs: &Vec<Vec<f64>>| -> Vec<f64> { xs.iter().map(|x| model.predict(x)[c]).collect() };
        aucs.push(auc(&score(class_set), &score(spurious_only))?);
    }
    if aucs.is_empty() {
        return Err(Error::Empty("spurious probe sets"));
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}
