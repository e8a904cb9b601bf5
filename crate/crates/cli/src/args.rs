//! Command-line flags. Every flag overrides the matching configuration field.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use sia_core::trainer::{LossKind, OptimizerKind};
use sia_core::DeformationKind;

use crate::config::RunConfig;

/// Parses a kebab-case enum value through its serde representation.
fn kebab<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|e| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "sia", version, about = "Shape-aware adapter banks for region classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset, split and text bank.
    GenSynth {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Train an adapter bank.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        bank: BankArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        classifier: ClassifierArgs,
    },
    /// Evaluate a bank against the un-adapted baseline.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        bank: BankArgs,
        #[command(flatten)]
        classifier: ClassifierArgs,
        /// Evaluate a freshly initialized bank instead of the checkpoint.
        #[arg(long)]
        init_bank: bool,
        /// Also write adapted_features.csv.
        #[arg(long)]
        export_features: bool,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        check: GradCheckArgs,
    },
    /// Accuracy as a function of the number of adapters.
    AblateN {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        bank: BankArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        classifier: ClassifierArgs,
        /// Adapter counts, comma separated.
        #[arg(long, value_delimiter = ',')]
        n_list: Option<Vec<usize>>,
        #[arg(long)]
        thin_per_cell: Option<usize>,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML configuration file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Sets every seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl CommonArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(p) = &self.out_dir {
            cfg.paths.out_dir = Some(p.clone());
        }
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub samples_per_class_per_bin: Option<usize>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    /// identity, rotation or general-linear.
    #[arg(long, value_parser = kebab::<DeformationKind>)]
    pub deformation: Option<DeformationKind>,
    #[arg(long)]
    pub novel_classes: Option<usize>,
    /// Leading samples per (class, bin) cell sent to train.
    #[arg(long)]
    pub train_per_cell: Option<usize>,
    #[arg(long)]
    pub split_fraction: Option<f64>,
}

impl SynthArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let s = &mut cfg.synth;
        set(&mut s.dim, self.dim);
        set(&mut s.num_classes, self.num_classes);
        set(&mut s.bins, self.bins);
        set(&mut s.samples_per_class_per_bin, self.samples_per_class_per_bin);
        set(&mut s.noise_std, self.noise_std);
        set(&mut s.deformation, self.deformation);
        set(&mut s.novel_classes, self.novel_classes);
        if self.train_per_cell.is_some() {
            cfg.split.train_per_cell = self.train_per_cell;
        }
        set(&mut cfg.split.fraction, self.split_fraction);
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub texts: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

impl DataArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let p = &mut cfg.paths;
        for (dst, src) in [
            (&mut p.train, &self.train),
            (&mut p.eval, &self.eval),
            (&mut p.texts, &self.texts),
            (&mut p.checkpoint, &self.checkpoint),
        ] {
            if src.is_some() {
                dst.clone_from(src);
            }
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct BankArgs {
    #[arg(long)]
    pub num_adapters: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Interior bin boundaries, comma separated and increasing.
    #[arg(long, value_delimiter = ',')]
    pub boundaries: Option<Vec<f64>>,
}

impl BankArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let b = &mut cfg.bank;
        set(&mut b.num_adapters, self.num_adapters);
        if self.hidden_dim.is_some() {
            b.hidden_dim = self.hidden_dim;
        }
        set(&mut b.lambda, self.lambda);
        if let Some(bounds) = &self.boundaries {
            b.boundaries = Some(bounds.clone());
            if self.num_adapters.is_none() {
                b.num_adapters = bounds.len() + 1;
            }
        } else if self.num_adapters.is_some() {
            b.boundaries = None;
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_decay_factor: Option<f64>,
    #[arg(long)]
    pub lr_decay_after_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// sgd or adaptive-moments.
    #[arg(long, value_parser = kebab::<OptimizerKind>)]
    pub optimizer: Option<OptimizerKind>,
    /// cross-entropy or class-averaged.
    #[arg(long, value_parser = kebab::<LossKind>)]
    pub loss: Option<LossKind>,
}

impl TrainArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        set(&mut t.epochs, self.epochs);
        set(&mut t.base_lr, self.lr);
        set(&mut t.lr_decay_factor, self.lr_decay_factor);
        set(&mut t.lr_decay_after_epoch, self.lr_decay_after_epoch);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.weight_decay, self.weight_decay);
        set(&mut t.optimizer, self.optimizer);
        set(&mut t.loss, self.loss);
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct ClassifierArgs {
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub normalize: Option<bool>,
}

impl ClassifierArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.classifier.tau, self.tau);
        set(&mut cfg.classifier.normalize, self.normalize);
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct GradCheckArgs {
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub normalize: Option<bool>,
    /// Fixed residual factor for every instance.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_parser = kebab::<LossKind>)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub num_adapters: Option<usize>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Test hook: scale analytic gradients by (1 + value) before comparing.
    #[arg(long, hide = true)]
    pub corrupt_gradients: Option<f64>,
}

impl GradCheckArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let g = &mut cfg.gradcheck;
        set(&mut g.instances, self.instances);
        set(&mut g.step, self.step);
        set(&mut g.tolerance, self.tolerance);
        set(&mut g.margin, self.margin);
        set(&mut g.tau, self.tau);
        set(&mut g.normalize, self.normalize);
        if self.lambda.is_some() {
            g.lambda = self.lambda;
        }
        set(&mut g.loss, self.loss);
        set(&mut g.dim, self.dim);
        set(&mut g.hidden_dim, self.hidden_dim);
        set(&mut g.num_adapters, self.num_adapters);
        set(&mut g.num_classes, self.num_classes);
        set(&mut g.batch, self.batch);
    }
}

fn set<T>(dst: &mut T, src: Option<T>) {
    if let Some(v) = src {
        *dst = v;
    }
}
