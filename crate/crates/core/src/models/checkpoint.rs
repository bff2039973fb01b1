//! Plain-text checkpoints.
//!
//! ```text
//! # shiftkd checkpoint v1
//! kind mlp
//! widths 2 32 32 2
//! activation relu
//! temperature 1
//! params 1218
//! <one value per line, 17 significant digits, layer by layer: W row-major then b>
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;

use super::mlp::{init_mlp, Activation, MlpClassifier};

pub const CHECKPOINT_SCHEMA: &str = "# shiftkd checkpoint v1";

pub fn to_text<T: Real>(mlp: &MlpClassifier<T>, temperature: f64) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{CHECKPOINT_SCHEMA}");
    let _ = writeln!(out, "kind mlp");
    let widths: Vec<String> = mlp.widths().iter().map(ToString::to_string).collect();
    let _ = writeln!(out, "widths {}", widths.join(" "));
    let _ = writeln!(out, "activation {}", mlp.activation());
    let _ = writeln!(out, "temperature {temperature:.16e}");
    let _ = writeln!(out, "params {}", mlp.num_params());
    for p in mlp.flat_params() {
        let _ = writeln!(out, "{:.16e}", p.as_f64());
    }
    out
}

pub fn from_text<T: Real>(text: &str) -> Result<(MlpClassifier<T>, f64)> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let mut field = |name: &str| -> Result<String> {
        let line = lines.next().ok_or_else(|| Error::Parse(format!("missing `{name}`")))?;
        line.strip_prefix(name)
            .map(|s| s.trim().to_string())
            .ok_or_else(|| Error::Parse(format!("expected `{name}`, found `{line}`")))
    };
    let kind = field("kind")?;
    if kind != "mlp" {
        return Err(Error::Parse(format!("unsupported model kind `{kind}`")));
    }
    let widths = field("widths")?
        .split_whitespace()
        .map(|w| w.parse::<usize>().map_err(|e| Error::Parse(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let activation: Activation = field("activation")?.parse()?;
    let temperature: f64 = field("temperature")?.parse().map_err(|e| Error::Parse(format!("{e}")))?;
    let count: usize = field("params")?.parse().map_err(|e| Error::Parse(format!("{e}")))?;
    let values = lines
        .map(|l| l.trim().parse::<f64>().map(T::of).map_err(|e| Error::Parse(e.to_string())))
        .collect::<Result<Vec<T>>>()?;
    if values.len() != count {
        return Err(Error::Parse(format!("declared {count} parameters, found {}", values.len())));
    }
    let mut mlp = init_mlp::<T>(&widths, activation, 0)?;
    mlp.set_flat_params(&values)?;
    Ok((mlp, temperature))
}

pub fn save<T: Real>(path: &Path, mlp: &MlpClassifier<T>, temperature: f64) -> Result<()> {
    std::fs::write(path, to_text(mlp, temperature)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<(MlpClassifier<T>, f64)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text)
}
