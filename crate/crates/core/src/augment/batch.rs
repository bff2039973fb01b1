use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::Differentiable;
use crate::seed;
use crate::synthworld::{Example, GroupKey, GroupedDataset, Split};

use super::generator::Generator;
use super::methods::{baseline_generate, config_generate, AugmentMethod, AugmentParams, ClassLatentPrior};

pub const BATCH_SCHEMA: &str = "# shiftkd augmentation-batch v1";
pub const TRACE_SCHEMA: &str = "# shiftkd augmentation-trace v1";

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSample {
    pub x: Vec<f64>,
    /// Label of the source example, never reassigned.
    pub y: usize,
    /// Group of the source example.
    pub source_group: GroupKey,
    pub source_index: usize,
    pub method: AugmentMethod,
    pub steps: usize,
    pub trace: Vec<(f64, f64)>,
    /// Teacher confidence in `y` at the generated input.
    pub teacher_conf: f64,
    /// Auxiliary-student confidence in `y` at the generated input.
    pub student_conf: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationBatch {
    pub method: AugmentMethod,
    pub multiplicity: usize,
    pub samples: Vec<AugmentedSample>,
    /// Source examples whose inversion failed; their slots stay empty.
    pub skipped: usize,
    pub num_classes: usize,
    pub num_spurious_bits: usize,
}

pub struct Participants<'a> {
    pub teacher: &'a dyn Differentiable,
    pub student: &'a dyn Differentiable,
    pub generator: &'a Generator,
}

/// Generates `multiplicity` samples per source example. Each (example,
/// copy) pair draws from its own derived seed, so the batch is the same
/// regardless of thread scheduling.
pub fn generate_batch(
    method: AugmentMethod,
    data: &GroupedDataset,
    who: &Participants<'_>,
    params: &AugmentParams,
    multiplicity: usize,
    seed: u64,
) -> Result<AugmentationBatch> {
    let prior = if method == AugmentMethod::Unconditional {
        Some(ClassLatentPrior::fit(who.generator, data, seed::derive(seed, "class-prior"))?)
    } else {
        None
    };
    let jobs: Vec<(usize, usize)> = if method == AugmentMethod::None {
        Vec::new()
    } else {
        (0..data.len()).flat_map(|i| (0..multiplicity).map(move |j| (i, j))).collect()
    };
    let results: Vec<Result<Option<AugmentedSample>>> = jobs
        .par_iter()
        .map(|&(i, j)| {
            let e = &data.examples()[i];
            let s = seed::derive_index(seed::derive_index(seed, i as u64), j as u64);
            let generated = match method {
                AugmentMethod::Config => config_generate(&e.x, e.y, who.teacher, who.student, who.generator, params, s),
                _ => baseline_generate(method, &e.x, e.y, Some(who.student), prior.as_ref(), who.generator, params, s),
            };
            let g = match generated {
                Ok(g) => g,
                Err(Error::Reconstruction { residual, .. }) => {
                    log::warn!("skipping source {i}: reconstruction error {residual:.3e}");
                    return Ok(None);
                }
                Err(e) => return Err(e),
            };
            let teacher_conf = who.teacher.predict(&g.x)[e.y];
            let student_conf = who.student.predict(&g.x)[e.y];
            Ok(Some(AugmentedSample {
                x: g.x,
                y: e.y,
                source_group: e.group,
                source_index: i,
                method,
                steps: g.steps,
                trace: g.trace,
                teacher_conf,
                student_conf,
            }))
        })
        .collect();
    let mut samples = Vec::with_capacity(results.len());
    let mut skipped = 0;
    for r in results {
        match r? {
            Some(s) => samples.push(s),
            None => skipped += 1,
        }
    }
    if method == AugmentMethod::Config {
        let collapsed = samples.iter().filter(|s| s.teacher_conf < 0.5).count();
        if collapsed > 0 {
            log::info!("{collapsed} confidence-guided samples ended with teacher confidence below 0.5; kept");
        }
    }
    Ok(AugmentationBatch {
        method,
        multiplicity,
        samples,
        skipped,
        num_classes: data.num_classes(),
        num_spurious_bits: data.num_spurious_bits(),
    })
}

/// Mixing weight of the augmentation distribution for `m` samples per real example.
pub fn mixture_weight(m: usize) -> f64 {
    m as f64 / (1 + m) as f64
}

/// Appends the batch to `train`. Requires exactly `m` samples per source
/// example; returns the joint dataset and its mixing weight `m / (1 + m)`.
pub fn build_augmented_dataset(
    train: &GroupedDataset,
    batch: &AugmentationBatch,
    multiplicity: usize,
) -> Result<(GroupedDataset, f64)> {
    if multiplicity == 0 {
        if !batch.samples.is_empty() {
            return Err(Error::InvalidArgument("multiplicity 0 with a nonempty batch".into()));
        }
        return Ok((train.clone(), 0.0));
    }
    let mut counts = vec![0usize; train.len()];
    for s in &batch.samples {
        let src = train
            .examples()
            .get(s.source_index)
            .ok_or_else(|| Error::InvalidArgument(format!("source index {} out of range", s.source_index)))?;
        if src.y != s.y {
            return Err(Error::InvalidArgument(format!("sample from source {} changed its label", s.source_index)));
        }
        counts[s.source_index] += 1;
    }
    if let Some(i) = counts.iter().position(|c| *c != multiplicity) {
        return Err(Error::InvalidArgument(format!(
            "source {i} has {} augmentations, expected {multiplicity}",
            counts[i]
        )));
    }
    let extra = batch.samples.iter().map(|s| Example {
        x: s.x.clone(),
        y: s.y,
        group: s.source_group,
    });
    Ok((train.extended(extra), mixture_weight(multiplicity)))
}

impl AugmentationBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn as_dataset(&self) -> GroupedDataset {
        let examples = self
            .samples
            .iter()
            .map(|s| Example {
                x: s.x.clone(),
                y: s.y,
                group: s.source_group,
            })
            .collect();
        GroupedDataset::new(examples, Split::Train, self.num_classes, self.num_spurious_bits)
    }

    /// Rows `x0..,y,group_bits,source_index,method,steps,teacher_conf,student_conf`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{BATCH_SCHEMA}");
        let _ = writeln!(out, "# method {} multiplicity {} skipped {}", self.method, self.multiplicity, self.skipped);
        let d = self.samples.first().map_or(0, |s| s.x.len());
        for i in 0..d {
            let _ = write!(out, "x{i},");
        }
        out.push_str("y,group_bits,source_index,method,steps,teacher_conf,student_conf\n");
        for s in &self.samples {
            for v in &s.x {
                let _ = write!(out, "{v:.17e},");
            }
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.17e},{:.17e}",
                s.y,
                s.source_group.bits_string(self.num_spurious_bits),
                s.source_index,
                s.method,
                s.steps,
                s.teacher_conf,
                s.student_conf
            );
        }
        out
    }

    /// Long-format confidence traces: `sample,step,teacher_conf,student_conf`.
    pub fn trace_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{TRACE_SCHEMA}");
        let _ = writeln!(out, "# method {}", self.method);
        out.push_str("sample,source_index,step,teacher_conf,student_conf\n");
        for (k, s) in self.samples.iter().enumerate() {
            for (step, (t, f)) in s.trace.iter().enumerate() {
                let _ = writeln!(out, "{k},{},{step},{t:.17e},{f:.17e}", s.source_index);
            }
        }
        out
    }

    pub fn write(&self, csv: &Path, trace: &Path) -> Result<()> {
        std::fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))?;
        std::fs::write(trace, self.trace_text()).map_err(|e| Error::io(trace, e))
    }
}
