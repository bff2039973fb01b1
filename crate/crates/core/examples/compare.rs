//! Worst-group accuracy of every method on one seed of the default benchmark.
//!
//!     cargo run --release -p shiftkd --example compare -- 3

use shiftkd::experiment::{comparison_csv, compare_methods, ExperimentConfig};

fn main() -> shiftkd::error::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let rows = compare_methods(&ExperimentConfig::default(), seed)?;
    print!("{}", comparison_csv(&rows));
    Ok(())
}
