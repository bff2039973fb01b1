use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

use super::{GroupKey, Split};

pub const DATASET_SCHEMA: &str = "# shiftkd dataset v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: usize,
    pub group: GroupKey,
}

/// Labeled examples that each carry their group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedDataset {
    examples: Vec<Example>,
    split: Split,
    num_classes: usize,
    num_spurious_bits: usize,
}

impl GroupedDataset {
    pub fn new(examples: Vec<Example>, split: Split, num_classes: usize, num_spurious_bits: usize) -> Self {
        debug_assert!(examples.iter().all(|e| e.y == e.group.class_label));
        Self {
            examples,
            split,
            num_classes,
            num_spurious_bits,
        }
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_spurious_bits(&self) -> usize {
        self.num_spurious_bits
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.examples.first().map_or(0, |e| e.x.len())
    }

    pub fn xs(&self) -> Vec<Vec<f64>> {
        self.examples.iter().map(|e| e.x.clone()).collect()
    }

    pub fn groups_present(&self) -> BTreeSet<GroupKey> {
        self.examples.iter().map(|e| e.group).collect()
    }

    pub fn group_counts(&self) -> Vec<(GroupKey, usize)> {
        let mut counts = std::collections::BTreeMap::new();
        for e in &self.examples {
            *counts.entry(e.group).or_insert(0) += 1;
        }
        counts.into_iter().collect()
    }

    /// Examples whose group is in `keep`, relabeled with `split`.
    pub fn restrict(&self, keep: &BTreeSet<GroupKey>, split: Split) -> Self {
        Self {
            examples: self.examples.iter().filter(|e| keep.contains(&e.group)).cloned().collect(),
            split,
            ..*self
        }
    }

    /// Appends `extra` examples; the split tag is kept.
    pub fn extended(&self, extra: impl IntoIterator<Item = Example>) -> Self {
        let mut examples = self.examples.clone();
        examples.extend(extra);
        Self { examples, ..*self }
    }

    /// Comma-separated rows `x0..x{d-1},y,group_bits,split` after a schema comment and header.
    pub fn to_csv(&self) -> String {
        let d = self.input_dim();
        let mut out = String::new();
        out.push_str(DATASET_SCHEMA);
        out.push('\n');
        for i in 0..d {
            let _ = write!(out, "x{i},");
        }
        out.push_str("y,group_bits,split\n");
        for e in &self.examples {
            for v in &e.x {
                let _ = write!(out, "{v:.17e},");
            }
            let _ = writeln!(out, "{},{},{}", e.y, e.group.bits_string(self.num_spurious_bits), self.split);
        }
        out
    }

    pub fn from_csv(text: &str, num_classes: usize, num_spurious_bits: usize) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let header = lines.next().ok_or(Error::Parse("missing dataset header".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[cols.len() - 3..] != ["y", "group_bits", "split"] {
            return Err(Error::Parse(format!("unexpected dataset header `{header}`")));
        }
        let d = cols.len() - 3;
        let mut split = None;
        let mut examples = Vec::new();
        for (row, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != d + 3 {
                return Err(Error::Parse(format!("row {row}: expected {} fields", d + 3)));
            }
            let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("row {row}: {e}")));
            let x = f[..d].iter().map(|s| parse(s)).collect::<Result<Vec<_>>>()?;
            let y: usize = f[d].parse().map_err(|e| Error::Parse(format!("row {row}: {e}")))?;
            if y >= num_classes {
                return Err(Error::Parse(format!("row {row}: label {y} out of range")));
            }
            if f[d + 1].len() != num_spurious_bits {
                return Err(Error::Parse(format!("row {row}: expected {num_spurious_bits} group bits")));
            }
            let bits = GroupKey::parse_bits(f[d + 1])?;
            split = Some(f[d + 2].parse::<Split>()?);
            examples.push(Example {
                x,
                y,
                group: GroupKey::new(y, bits),
            });
        }
        Ok(Self::new(examples, split.unwrap_or(Split::Train), num_classes, num_spurious_bits))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, num_classes: usize, num_spurious_bits: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, num_classes, num_spurious_bits)
    }
}
