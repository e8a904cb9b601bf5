//! Run configuration: one TOML file, then command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sia_core::gradcheck::GradCheckDims;
use sia_core::trainer::LossKind;
use sia_core::{BankConfig, BinPartition, ClassifierConfig, Error, SynthConfig, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Training dataset (train, ablate-n).
    pub train: Option<PathBuf>,
    /// Held-out dataset (eval, ablate-n).
    pub eval: Option<PathBuf>,
    pub texts: Option<PathBuf>,
    /// Bank written by train and read by eval; defaults to `<out_dir>/bank.sia`.
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// How gen-synth divides the generated samples into train and eval files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Leading samples of each (class, bin) cell sent to train. When unset,
    /// a label-stratified random split with `fraction` is used instead.
    pub train_per_cell: Option<usize>,
    pub fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_per_cell: None,
            fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankSection {
    pub num_adapters: usize,
    pub hidden_dim: Option<usize>,
    pub lambda: f64,
    /// Interior bin boundaries; geometric ones when unset.
    pub boundaries: Option<Vec<f64>>,
    /// Seed for the first-layer initialization.
    pub seed: u64,
}

impl Default for BankSection {
    fn default() -> Self {
        let b = BankConfig::default();
        BankSection {
            num_adapters: b.num_adapters,
            hidden_dim: b.hidden_dim,
            lambda: b.lambda,
            boundaries: None,
            seed: 0,
        }
    }
}

impl BankSection {
    pub fn bank_config(&self) -> BankConfig {
        BankConfig {
            num_adapters: self.num_adapters,
            hidden_dim: self.hidden_dim,
            lambda: self.lambda,
        }
    }

    pub fn partition(&self) -> sia_core::Result<BinPartition> {
        match &self.boundaries {
            Some(b) => {
                let p = BinPartition::from_interior(b)?;
                if p.num_bins() != self.num_adapters {
                    return Err(Error::Validation(format!(
                        "{} boundaries give {} bins but num_adapters is {}",
                        b.len(),
                        p.num_bins(),
                        self.num_adapters
                    )));
                }
                Ok(p)
            }
            None => BinPartition::geometric(self.num_adapters),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSection {
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Instances are redrawn until every pre-activation is at least this far from 0.
    pub margin: f64,
    pub tau: f64,
    pub normalize: bool,
    /// Fixed residual factor; drawn per instance when unset.
    pub lambda: Option<f64>,
    pub loss: LossKind,
    pub seed: u64,
    pub dim: usize,
    pub hidden_dim: usize,
    pub num_adapters: usize,
    pub num_classes: usize,
    pub batch: usize,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        let d = GradCheckDims::default();
        GradCheckSection {
            instances: 100,
            step: 1e-4,
            tolerance: 1e-5,
            margin: 1e-6,
            tau: 1.0,
            normalize: true,
            lambda: None,
            loss: LossKind::CrossEntropy,
            seed: 0,
            dim: d.dim,
            hidden_dim: d.hidden_dim,
            num_adapters: d.num_adapters,
            num_classes: d.num_classes,
            batch: d.batch,
        }
    }
}

impl GradCheckSection {
    pub fn dims(&self) -> GradCheckDims {
        GradCheckDims {
            dim: self.dim,
            hidden_dim: self.hidden_dim,
            num_adapters: self.num_adapters,
            num_classes: self.num_classes,
            batch: self.batch,
        }
    }

    pub fn classifier(&self) -> ClassifierConfig {
        ClassifierConfig {
            tau: self.tau,
            normalize: self.normalize,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Evaluate a freshly initialized bank instead of loading a checkpoint.
    pub init_bank: bool,
    /// Also write `adapted_features.csv`.
    pub export_features: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub n_values: Vec<usize>,
    /// Keep at most this many training samples per (class, bin) cell.
    pub thin_per_cell: Option<usize>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            n_values: vec![1, 2, 4, 16],
            thin_per_cell: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub bank: BankSection,
    pub train: TrainConfig,
    pub classifier: ClassifierConfig,
    pub eval: EvalSection,
    pub gradcheck: GradCheckSection,
    pub ablate: AblateSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> sia_core::Result<Self> {
        toml::from_str(text).map_err(|e| Error::Validation(format!("invalid configuration: {e}")))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading configuration {}", path.display()))?;
        Ok(Self::from_toml(&text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable")
    }

    /// Sets every seed in the configuration.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.bank.seed = seed;
        self.train.seed = seed;
        self.gradcheck.seed = seed;
    }

    pub fn validate(&self) -> sia_core::Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.classifier.validate()?;
        self.gradcheck.classifier().validate()?;
        let lambda = self.bank.lambda;
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Validation(format!("lambda must lie in [0, 1], got {lambda}")));
        }
        if let Some(l) = self.gradcheck.lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Validation(format!("gradcheck lambda must lie in [0, 1], got {l}")));
            }
        }
        let f = self.split.fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Validation(format!("split fraction must lie in (0, 1), got {f}")));
        }
        let g = &self.gradcheck;
        if !(g.step > 0.0 && g.step.is_finite() && g.tolerance > 0.0 && g.margin >= 0.0) {
            return Err(Error::Validation(
                "gradcheck step and tolerance must be positive and margin non-negative".into(),
            ));
        }
        if self.ablate.n_values.is_empty() || self.ablate.n_values.contains(&0) {
            return Err(Error::Validation("ablation needs a non-empty list of positive adapter counts".into()));
        }
        self.bank.partition()?;
        Ok(())
    }

    pub fn require_path<'a>(&self, path: &'a Option<PathBuf>, what: &str) -> sia_core::Result<&'a Path> {
        path.as_deref()
            .ok_or_else(|| Error::Validation(format!("no {what} path given (config or flag)")))
    }

    pub fn out_dir(&self) -> sia_core::Result<&Path> {
        self.require_path(&self.paths.out_dir, "output directory")
    }

    pub fn checkpoint(&self) -> sia_core::Result<PathBuf> {
        match &self.paths.checkpoint {
            Some(p) => Ok(p.clone()),
            None => Ok(self.out_dir()?.join("bank.sia")),
        }
    }
}
