use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentMethod, AugmentParams, GeneratorConfig};
use crate::distill::{LossMode, TrainConfig};
use crate::error::{Error, Result};
use crate::models::Activation;
use crate::synthworld::WorldSpec;

pub const CONFIG_SCHEMA: &str = "# shiftkd experiment-config v1";

/// How the teacher is obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TeacherSpec {
    /// The exact posterior of the reference split.
    ExactBayes,
    /// Exact posterior with logit noise of declared sup-norm error `delta`.
    NoisyBayes { delta: f64 },
    /// An MLP trained with ERM on reference-split draws, then
    /// temperature-calibrated on the validation split.
    FrozenMlp { hidden: Vec<usize>, samples: usize, epochs: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for StudentSpec {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            activation: Activation::Relu,
        }
    }
}

/// Split sizes. The test split is class-balanced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            train: 1000,
            val: 500,
            test: 4000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub method: AugmentMethod,
    pub multiplicity: usize,
    pub params: AugmentParams,
    pub generator: GeneratorConfig,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            method: AugmentMethod::Config,
            multiplicity: 2,
            params: AugmentParams::default(),
            generator: GeneratorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSpec {
    /// Also report the spurious mean AUC.
    pub spurious_auc: bool,
    /// Inputs per probe set for the spurious AUC.
    pub auc_probes: usize,
}

impl Default for MetricsSpec {
    fn default() -> Self {
        Self {
            spurious_auc: true,
            auc_probes: 500,
        }
    }
}

/// Settings of the constructed scenario behind `verify-theory`.
///
/// The scenario has its own world and ascent settings. It needs a student
/// that matches a saturated teacher on the training support yet leans on
/// the spurious coordinate elsewhere, and a confidence ascent whose student
/// term does not vanish at saturation (`gamma = 1`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheorySpec {
    pub world: WorldSpec,
    pub augment: AugmentParams,
    pub probe_budget: usize,
    pub risk_samples: usize,
    /// Support filter of the augmentation distribution: `t_y >= tau_min`.
    pub tau_min: f64,
    /// Support filter of the augmentation distribution: `f_y <= sigma_max`.
    pub sigma_max: f64,
    pub student_epochs: usize,
    pub student_hidden: Vec<usize>,
    /// Training-set size of the scenario's student.
    pub train_samples: usize,
    /// Overrides the default `min{1, Omega / (2 Theta)} / 2`.
    pub alpha: Option<f64>,
    /// Declared teacher errors of the lemma sweep.
    pub lemma_deltas: Vec<f64>,
}

impl Default for TheorySpec {
    fn default() -> Self {
        let mut world = WorldSpec::celeba_toy(1);
        world.class_scale = 1.0;
        world.spurious_scale = 12.0;
        world.noise_std = 0.2;
        Self {
            world,
            augment: AugmentParams {
                gamma: 1.0,
                ..AugmentParams::default()
            },
            probe_budget: 1000,
            risk_samples: 20_000,
            tau_min: 0.8,
            sigma_max: 0.2,
            student_epochs: 100,
            student_hidden: vec![64, 64],
            train_samples: 2000,
            alpha: None,
            lemma_deltas: vec![0.0, 0.01, 0.05],
        }
    }
}

/// Everything a run depends on besides the master seed. The `seed` field
/// of `train` is ignored: training seeds derive from the master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub world: WorldSpec,
    pub teacher: TeacherSpec,
    pub student: StudentSpec,
    pub data: DataSpec,
    pub train: TrainConfig,
    pub augment: AugmentSpec,
    pub metrics: MetricsSpec,
    pub theory: TheorySpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            world: WorldSpec::celeba_toy(1),
            teacher: TeacherSpec::ExactBayes,
            student: StudentSpec::default(),
            data: DataSpec::default(),
            train: TrainConfig {
                epochs: 60,
                ..TrainConfig::default()
            },
            augment: AugmentSpec::default(),
            metrics: MetricsSpec::default(),
            theory: TheorySpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// TOML with every field spelled out, preceded by the schema comment.
    pub fn to_toml(&self) -> String {
        let body = toml::to_string_pretty(self).expect("config serializes");
        format!("{CONFIG_SCHEMA}\n{body}")
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.theory.world.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("seeds must not be empty".into()));
        }
        if self.data.train == 0 || self.data.val == 0 || self.data.test == 0 {
            return Err(Error::InvalidArgument("split sizes must be positive".into()));
        }
        if let TeacherSpec::NoisyBayes { delta } = self.teacher {
            if !(0.0..1.0).contains(&delta) {
                return Err(Error::InvalidArgument(format!("teacher delta {delta} outside [0, 1)")));
            }
        }
        if self.augment.method == AugmentMethod::None && self.augment.multiplicity != 0 {
            return Err(Error::InvalidArgument("method `none` needs multiplicity 0".into()));
        }
        if self.augment.method != AugmentMethod::None && self.augment.multiplicity == 0 {
            return Err(Error::InvalidArgument(format!(
                "method `{}` needs a positive multiplicity",
                self.augment.method
            )));
        }
        if self.theory.probe_budget < 1000 {
            return Err(Error::InvalidArgument("theory probe_budget must be at least 1000".into()));
        }
        Ok(())
    }

    /// Sets the method, using `m` or the method's natural default (0 for `none`).
    pub fn with_method(mut self, method: AugmentMethod, multiplicity: Option<usize>) -> Self {
        self.augment.method = method;
        self.augment.multiplicity = match (method, multiplicity) {
            (_, Some(m)) => m,
            (AugmentMethod::None, None) => 0,
            (_, None) if self.augment.multiplicity == 0 => 2,
            (_, None) => self.augment.multiplicity,
        };
        self
    }

    pub fn with_loss(mut self, loss: LossMode) -> Self {
        self.train.loss_mode = loss;
        self
    }
}
