use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use shiftkd::augment::AugmentMethod;
use shiftkd::distill::{LossMode, MixMode};
use shiftkd::experiment::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "shiftkd", version, about = "Confidence-guided augmentation for distillation under covariate shift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration; defaults are used for anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run only this master seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[arg(long, global = true)]
    method: Option<MethodArg>,
    #[arg(long, global = true)]
    multiplicity: Option<usize>,
    #[arg(long, global = true)]
    loss: Option<LossArg>,
    #[arg(long, global = true)]
    mix: Option<MixArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the train, val, val_restricted and test splits.
    Bench,
    /// Train a student on the real training data.
    Train,
    /// Train the auxiliary student and generate an augmentation batch.
    Augment,
    /// Auxiliary student, augmentation, final student, evaluation.
    Pipeline,
    /// Pipeline runs for several multiplicities.
    SweepMultiplicity {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,5,10")]
        multiplicities: Vec<usize>,
    },
    /// Check the generalization-gap bounds on the constructed scenario.
    /// Exits with status 2 if an applicable bound fails.
    VerifyTheory {
        /// Mixing weight of the augmentation distribution.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Evaluate a saved checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    None,
    Config,
    Unconditional,
    NoiseResample,
    LatentPerturb,
    StudentAdversarial,
}

impl From<MethodArg> for AugmentMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::None => AugmentMethod::None,
            MethodArg::Config => AugmentMethod::Config,
            MethodArg::Unconditional => AugmentMethod::Unconditional,
            MethodArg::NoiseResample => AugmentMethod::NoiseResample,
            MethodArg::LatentPerturb => AugmentMethod::LatentPerturb,
            MethodArg::StudentAdversarial => AugmentMethod::StudentAdversarial,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Erm,
    Edrm,
    #[value(name = "erm+edrm")]
    ErmPlusEdrm,
}

#[derive(Clone, Copy, ValueEnum)]
enum MixArg {
    None,
    Mask,
    Convex,
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if cli.method.is_some() || cli.multiplicity.is_some() {
        let method = cli.method.map_or(cfg.augment.method, AugmentMethod::from);
        cfg = cfg.with_method(method, cli.multiplicity);
    }
    if let Some(loss) = cli.loss {
        cfg.train.loss_mode = match loss {
            LossArg::Erm => LossMode::Erm,
            LossArg::Edrm => LossMode::Edrm,
            LossArg::ErmPlusEdrm => LossMode::ErmPlusEdrm,
        };
    }
    if let Some(mix) = cli.mix {
        cfg.train.mix_mode = match mix {
            MixArg::None => MixMode::None,
            MixArg::Mask => MixMode::Mask,
            MixArg::Convex => MixMode::Convex,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let cfg = build_config(cli)?;
    let out: &Path = &cli.out;
    experiment::dump_config(&cfg, out)?;
    match &cli.command {
        Command::Bench => {
            experiment::run_seeds(&cfg.seeds, |s| experiment::cmd_bench(&cfg, s, out).map(|_| ()))?;
            println!("wrote splits for {} seed(s) under {}", cfg.seeds.len(), out.display());
        }
        Command::Train => {
            let outcomes = experiment::run_seeds(&cfg.seeds, |s| experiment::cmd_train(&cfg, s, out))?;
            for (s, o) in cfg.seeds.iter().zip(&outcomes) {
                println!(
                    "seed {s}: loss {} worst_group {:.4} group_mean {:.4} selected_epoch {}",
                    cfg.train.loss_mode.as_str(),
                    o.eval.metrics.worst_group,
                    o.eval.metrics.group_mean,
                    o.report.selected_epoch
                );
            }
        }
        Command::Augment => {
            let scores = experiment::run_seeds(&cfg.seeds, |s| experiment::cmd_augment(&cfg, s, out))?;
            for (s, d) in cfg.seeds.iter().zip(&scores) {
                match d {
                    Some(d) => println!(
                        "seed {s}: method {} acc_s {:.4} mean_r {:.4} mean_r_d {:.4}",
                        cfg.augment.method, d.acc_s, d.mean_r, d.mean_r_d
                    ),
                    None => println!("seed {s}: method {} produced no samples", cfg.augment.method),
                }
            }
        }
        Command::Pipeline => {
            let runs = experiment::run_seeds(&cfg.seeds, |s| experiment::cmd_pipeline(&cfg, s, out))?;
            for (s, r) in cfg.seeds.iter().zip(&runs) {
                println!(
                    "seed {s}: method {} m {} alpha {:.4} worst_group {:.4} (aux {:.4})",
                    cfg.augment.method,
                    r.batch.multiplicity,
                    r.final_stage.alpha,
                    r.final_eval.metrics.worst_group,
                    r.aux_eval.metrics.worst_group
                );
            }
        }
        Command::SweepMultiplicity { multiplicities } => {
            let rows = experiment::cmd_sweep_multiplicity(&cfg, multiplicities, out)?;
            print!("{}", experiment::sweep_csv(&rows));
        }
        Command::VerifyTheory { alpha } => {
            let mut cfg = cfg.clone();
            if alpha.is_some() {
                cfg.theory.alpha = *alpha;
            }
            let outcomes = experiment::run_seeds(&cfg.seeds, |s| experiment::cmd_verify_theory(&cfg, s, out))?;
            let mut failed = false;
            for (s, o) in cfg.seeds.iter().zip(&outcomes) {
                let status = match o.report.bound_holds() {
                    Some(true) => "holds".to_string(),
                    Some(false) => "VIOLATED".to_string(),
                    None => format!("not applicable ({})", o.report.failed_assumptions().join(", ")),
                };
                println!("seed {s}: bound {status}; lemma points holding {}/{}", o.lemmas.iter().filter(|l| l.holds() == Some(true)).count(), o.lemmas.len());
                failed |= o.report.bound_holds() == Some(false) || o.lemmas.iter().any(|l| l.holds() == Some(false));
            }
            if failed {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Eval { checkpoint } => {
            let evals = experiment::run_seeds(&cfg.seeds, |s| experiment::cmd_eval(&cfg, s, checkpoint, out))?;
            for (s, e) in cfg.seeds.iter().zip(&evals) {
                println!(
                    "seed {s}: worst_group {:.4} group_mean {:.4} sample_mean {:.4} teacher_agreement {:.4}",
                    e.metrics.worst_group, e.metrics.group_mean, e.metrics.sample_mean, e.agreement.overall
                );
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
