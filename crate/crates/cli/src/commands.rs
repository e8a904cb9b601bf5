//! The five subcommands, each a function of a resolved [`RunConfig`].

use std::path::PathBuf;

use log::info;
use serde::Serialize;
use sia_core::data::{split_per_bin, thin_per_bin};
use sia_core::eval::{evaluate_baseline, evaluate_bank, export_adapted_features};
use sia_core::gradcheck::{check_gradients, random_instance, GradCheckReport};
use sia_core::trainer::{loss_and_gradients_with, TrainReport};
use sia_core::{
    split_train_eval, AdapterBank, BinPartition, Dataset, EvalReport, SyntheticTask, TextEmbeddingBank,
};

use crate::config::RunConfig;
use crate::output::{ensure_dir, Outputs};

fn load_dataset(cfg: &RunConfig, path: &Option<PathBuf>, what: &str) -> anyhow::Result<Dataset> {
    Ok(Dataset::load(cfg.require_path(path, what)?)?)
}

fn load_texts(cfg: &RunConfig) -> anyhow::Result<TextEmbeddingBank> {
    Ok(TextEmbeddingBank::load(cfg.require_path(&cfg.paths.texts, "text bank")?)?)
}

fn init_bank(cfg: &RunConfig, dim: usize, partition: BinPartition) -> sia_core::Result<AdapterBank> {
    let mut bank_cfg = cfg.bank.bank_config();
    bank_cfg.num_adapters = partition.num_bins();
    AdapterBank::from_config(dim, &bank_cfg, Some(partition), cfg.bank.seed)
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthSummary {
    pub config: RunConfig,
    pub boundaries: Vec<f64>,
    pub samples: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    /// Accuracy of classifying with the hidden inverse maps.
    pub oracle_accuracy_train: Option<f64>,
    pub oracle_accuracy_eval: Option<f64>,
    pub files: Vec<PathBuf>,
}

/// Writes `dataset.sia`, `train.sia`, `eval.sia`, `texts.sia`, `samples.csv`
/// and `synth_report.json` into the output directory.
pub fn gen_synth(cfg: &RunConfig) -> anyhow::Result<SynthSummary> {
    cfg.validate()?;
    let out = cfg.out_dir()?;
    let task = SyntheticTask::generate(&cfg.synth)?;
    let (train, eval) = match cfg.split.train_per_cell {
        Some(n) => split_per_bin(&task.dataset, &task.partition, n)?,
        None => split_train_eval(&task.dataset, cfg.split.fraction, cfg.synth.seed)?,
    };
    let oracle = |d: &Dataset| -> sia_core::Result<Option<f64>> {
        if d.is_empty() {
            Ok(None)
        } else {
            task.oracle_accuracy(d).map(Some)
        }
    };

    ensure_dir(out)?;
    let mut outputs = Outputs::default();
    outputs.add(out.join("dataset.sia"), task.dataset.to_bytes());
    outputs.add(out.join("train.sia"), train.to_bytes());
    outputs.add(out.join("eval.sia"), eval.to_bytes());
    outputs.add(out.join("texts.sia"), task.texts.to_bytes());
    outputs.add_csv(out.join("samples.csv"), |w| task.dataset.write_metadata_csv(w))?;
    let report_path = out.join("synth_report.json");
    let mut files = outputs.paths();
    files.push(report_path.clone());
    let summary = SynthSummary {
        config: cfg.clone(),
        boundaries: task.partition.interior().to_vec(),
        samples: task.dataset.len(),
        train_samples: train.len(),
        eval_samples: eval.len(),
        oracle_accuracy_train: oracle(&train)?,
        oracle_accuracy_eval: oracle(&eval)?,
        files,
    };
    outputs.add_json(report_path, &summary)?;
    outputs.commit()?;
    info!("generated {} samples ({} train, {} eval)", summary.samples, summary.train_samples, summary.eval_samples);
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub config: RunConfig,
    pub checkpoint: PathBuf,
    pub boundaries: Vec<f64>,
    pub report: TrainReport,
    pub loss_decreased: bool,
}

/// Trains a bank on `paths.train`; writes the checkpoint and `train_report.json`.
pub fn train(cfg: &RunConfig) -> anyhow::Result<TrainSummary> {
    cfg.validate()?;
    let out = cfg.out_dir()?;
    let checkpoint = cfg.checkpoint()?;
    let dataset = load_dataset(cfg, &cfg.paths.train, "training dataset")?;
    let texts = load_texts(cfg)?;
    let bank = init_bank(cfg, dataset.dim(), cfg.bank.partition()?)?;
    let (bank, report) = sia_core::train(bank, &dataset, &texts, &cfg.train, &cfg.classifier)?;

    ensure_dir(out)?;
    if let Some(parent) = checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    let summary = TrainSummary {
        config: cfg.clone(),
        checkpoint: checkpoint.clone(),
        boundaries: bank.partition().interior().to_vec(),
        loss_decreased: report.final_loss < report.initial_loss,
        report,
    };
    let mut outputs = Outputs::default();
    outputs.add(checkpoint, bank.to_bytes());
    outputs.add_json(out.join("train_report.json"), &summary)?;
    outputs.commit()?;
    info!(
        "trained {} adapters for {} steps: loss {:.6} -> {:.6}",
        bank.num_adapters(),
        summary.report.steps,
        summary.report.initial_loss,
        summary.report.final_loss
    );
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub config: RunConfig,
    /// `None` when a freshly initialized bank was evaluated.
    pub checkpoint: Option<PathBuf>,
    pub num_adapters: usize,
    pub lambda: f64,
    pub boundaries: Vec<f64>,
    pub adapted: EvalReport,
    /// The same data classified from un-adapted features.
    pub baseline: EvalReport,
    pub accuracy_gain: f64,
    pub files: Vec<PathBuf>,
}

/// Evaluates a bank on `paths.eval`; writes `eval_report.json` and the CSV tables.
pub fn eval(cfg: &RunConfig) -> anyhow::Result<EvalSummary> {
    cfg.validate()?;
    let out = cfg.out_dir()?;
    let dataset = load_dataset(cfg, &cfg.paths.eval, "evaluation dataset")?;
    let texts = load_texts(cfg)?;
    let (bank, checkpoint) = if cfg.eval.init_bank {
        (init_bank(cfg, dataset.dim(), cfg.bank.partition()?)?, None)
    } else {
        let path = cfg.checkpoint()?;
        (AdapterBank::load(&path)?, Some(path))
    };
    let adapted = evaluate_bank(&bank, &dataset, &texts, &cfg.classifier, None)?;
    let baseline = evaluate_baseline(&dataset, &texts, &cfg.classifier, bank.partition())?;

    ensure_dir(out)?;
    let mut outputs = Outputs::default();
    outputs.add_csv(out.join("per_class.csv"), |w| adapted.write_per_class_csv(w))?;
    outputs.add_csv(out.join("per_bin.csv"), |w| adapted.write_per_bin_csv(w))?;
    outputs.add_csv(out.join("confusion.csv"), |w| adapted.write_confusion_csv(w))?;
    outputs.add_csv(out.join("ap50.csv"), |w| adapted.write_ap50_csv(w))?;
    if cfg.eval.export_features {
        outputs.add_csv(out.join("adapted_features.csv"), |w| export_adapted_features(&dataset, &bank, w))?;
    }
    let report_path = out.join("eval_report.json");
    let mut files = outputs.paths();
    files.push(report_path.clone());
    let summary = EvalSummary {
        config: cfg.clone(),
        checkpoint,
        num_adapters: bank.num_adapters(),
        lambda: bank.lambda(),
        boundaries: bank.partition().interior().to_vec(),
        accuracy_gain: adapted.overall_accuracy - baseline.overall_accuracy,
        adapted,
        baseline,
        files,
    };
    outputs.add_json(report_path, &summary)?;
    outputs.commit()?;
    info!(
        "accuracy {:.4} (baseline {:.4}) on {} samples",
        summary.adapted.overall_accuracy, summary.baseline.overall_accuracy, summary.adapted.sample_count
    );
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckSummary {
    pub config: RunConfig,
    pub instances: usize,
    pub report: GradCheckReport,
    /// Every analytic gradient of every instance was exactly zero.
    pub gradients_all_zero: bool,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares analytic gradients with central differences on random small
/// instances. `corrupt` scales every analytic gradient by `1 + corrupt`
/// before the comparison (negative control).
pub fn gradcheck(cfg: &RunConfig, corrupt: Option<f64>) -> anyhow::Result<GradCheckSummary> {
    cfg.validate()?;
    let g = &cfg.gradcheck;
    let clf = g.classifier();
    let dims = g.dims();
    let mut total = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        compared: 0,
        skipped: 0,
        max_abs_gradient: 0.0,
    };
    let mut all_zero = true;
    for i in 0..g.instances {
        let inst = random_instance(&dims, g.lambda, g.margin, g.seed.wrapping_add(i as u64))?;
        let (_, mut grads) = loss_and_gradients_with(&inst.bank, &inst.batch, &inst.texts, &clf, g.loss)?;
        all_zero &= grads.is_zero();
        if let Some(c) = corrupt {
            for m in grads.w1.iter_mut().chain(grads.w2.iter_mut()) {
                *m *= 1.0 + c;
            }
        }
        let r = check_gradients(&inst.bank, &inst.batch, &inst.texts, &clf, g.loss, &grads, g.step)?;
        total.merge(&r);
    }
    let summary = GradCheckSummary {
        config: cfg.clone(),
        instances: g.instances,
        passed: total.passed(g.tolerance),
        report: total,
        gradients_all_zero: all_zero,
        tolerance: g.tolerance,
    };
    if let Some(out) = &cfg.paths.out_dir {
        ensure_dir(out)?;
        let mut outputs = Outputs::default();
        outputs.add_json(out.join("gradcheck_report.json"), &summary)?;
        outputs.commit()?;
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub num_adapters: usize,
    /// Interior boundaries of the partition used.
    pub boundaries: Vec<f64>,
    pub train_samples: usize,
    pub accuracy: f64,
    pub base_accuracy: Option<f64>,
    pub novel_accuracy: Option<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub empty_bins: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationSummary {
    pub config: RunConfig,
    pub rows: Vec<AblationRow>,
}

fn write_ablation_csv(rows: &[AblationRow], out: &mut Vec<u8>) -> sia_core::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "num_adapters",
        "boundaries",
        "train_samples",
        "accuracy",
        "base_accuracy",
        "novel_accuracy",
        "initial_loss",
        "final_loss",
        "empty_bins",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let bounds: Vec<String> = r.boundaries.iter().map(f64::to_string).collect();
        w.write_record([
            r.num_adapters.to_string(),
            bounds.join(";"),
            r.train_samples.to_string(),
            r.accuracy.to_string(),
            opt(r.base_accuracy),
            opt(r.novel_accuracy),
            r.initial_loss.to_string(),
            r.final_loss.to_string(),
            r.empty_bins.to_string(),
        ])?;
    }
    w.flush().map_err(|e| sia_core::Error::Csv(e.into()))?;
    Ok(())
}

/// Trains and evaluates one bank per adapter count, each with geometric
/// bins. With `ablate.thin_per_cell`, the training set is first cut to that
/// many samples per (class, bin) cell, cells taken from `synth.bins`
/// geometric bins.
pub fn ablate_n(cfg: &RunConfig) -> anyhow::Result<AblationSummary> {
    cfg.validate()?;
    let out = cfg.out_dir()?;
    let mut train_ds = load_dataset(cfg, &cfg.paths.train, "training dataset")?;
    let eval_ds = load_dataset(cfg, &cfg.paths.eval, "evaluation dataset")?;
    let texts = load_texts(cfg)?;
    if let Some(n) = cfg.ablate.thin_per_cell {
        train_ds = thin_per_bin(&train_ds, &BinPartition::geometric(cfg.synth.bins)?, n)?;
    }
    let mut rows = Vec::with_capacity(cfg.ablate.n_values.len());
    for &n in &cfg.ablate.n_values {
        let bank = init_bank(cfg, train_ds.dim(), BinPartition::geometric(n)?)?;
        let (bank, report) = sia_core::train(bank, &train_ds, &texts, &cfg.train, &cfg.classifier)?;
        let eval = evaluate_bank(&bank, &eval_ds, &texts, &cfg.classifier, None)?;
        info!("N={n}: accuracy {:.4}", eval.overall_accuracy);
        rows.push(AblationRow {
            num_adapters: n,
            boundaries: bank.partition().interior().to_vec(),
            train_samples: train_ds.len(),
            accuracy: eval.overall_accuracy,
            base_accuracy: eval.base_accuracy,
            novel_accuracy: eval.novel_accuracy,
            initial_loss: report.initial_loss,
            final_loss: report.final_loss,
            empty_bins: report.empty_bins.len(),
        });
    }
    ensure_dir(out)?;
    let summary = AblationSummary { config: cfg.clone(), rows };
    let mut outputs = Outputs::default();
    outputs.add_csv(out.join("ablation.csv"), |w| write_ablation_csv(&summary.rows, w))?;
    outputs.add_json(out.join("ablation.json"), &summary)?;
    outputs.commit()?;
    Ok(summary)
}
