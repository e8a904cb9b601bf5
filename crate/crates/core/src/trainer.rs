//! Stage-one training: only the adapter bank is optimized, with
//! hand-derived gradients through softmax, optional L2 normalization, the
//! residual mix and the ReLU bottleneck.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterBank, Feature};
use crate::classifier::{argmax, classify, logits, softmax, ClassifierConfig, Split, TextEmbeddingBank};
use crate::data::Dataset;
use crate::error::{ensure, ensure_dim, Error, Result};
use crate::geometry::BoundingBox;

/// Floor applied to the labeled probability before taking its log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    AdaptiveMoments,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// `-log p_label`.
    #[default]
    CrossEntropy,
    /// `-(1/K) sum_k log p_k`: label-independent, kept for comparison only.
    ClassAveraged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    /// The learning rate is multiplied by `lr_decay_factor` from epoch
    /// `lr_decay_after_epoch + 1` (1-based) onward.
    pub lr_decay_after_epoch: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            base_lr: 1e-4,
            lr_decay_factor: 0.1,
            lr_decay_after_epoch: 4,
            batch_size: 16,
            weight_decay: 0.0,
            seed: 0,
            optimizer: OptimizerKind::AdaptiveMoments,
            loss: LossKind::CrossEntropy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.epochs >= 1, || "epochs must be at least 1".into())?;
        ensure(self.base_lr > 0.0 && self.base_lr.is_finite(), || {
            format!("base_lr must be positive, got {}", self.base_lr)
        })?;
        ensure(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0, || {
            format!("lr_decay_factor must lie in (0, 1], got {}", self.lr_decay_factor)
        })?;
        ensure(self.batch_size >= 1, || "batch_size must be at least 1".into())?;
        ensure(self.weight_decay >= 0.0 && self.weight_decay.is_finite(), || {
            format!("weight_decay must be non-negative, got {}", self.weight_decay)
        })
    }

    /// Learning rate for 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch > self.lr_decay_after_epoch {
            self.base_lr * self.lr_decay_factor
        } else {
            self.base_lr
        }
    }
}

/// A training example in working precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub feature: Feature,
    pub bbox: BoundingBox,
    pub label: usize,
}

impl Example {
    pub fn from_dataset(ds: &Dataset) -> Vec<Example> {
        ds.samples()
            .iter()
            .map(|s| Example {
                feature: s.feature_f64(),
                bbox: s.bbox,
                label: s.label,
            })
            .collect()
    }
}

/// `-log p_label`, with the probability floored at [`PROB_FLOOR`].
pub fn ce_loss(probs: &DVector<f64>, label: usize) -> Result<f64> {
    if label >= probs.len() {
        return Err(Error::OutOfRange {
            what: "class label",
            index: label,
            len: probs.len(),
        });
    }
    let p = probs[label];
    if p < PROB_FLOOR {
        warn!("probability of label {label} is {p:e}; clamping to {PROB_FLOOR:e}");
    }
    Ok(-p.max(PROB_FLOOR).ln())
}

/// `-(1/K) sum_k log p_k`.
pub fn class_averaged_loss(probs: &DVector<f64>) -> f64 {
    -probs.iter().map(|p| p.max(PROB_FLOOR).ln()).sum::<f64>() / probs.len() as f64
}

pub fn sample_loss(kind: LossKind, probs: &DVector<f64>, label: usize) -> Result<f64> {
    match kind {
        LossKind::CrossEntropy => ce_loss(probs, label),
        LossKind::ClassAveraged => {
            ensure(label < probs.len(), || format!("label {label} out of range"))?;
            Ok(class_averaged_loss(probs))
        }
    }
}

/// Loss straight from logits via log-sum-exp. Equal to [`sample_loss`] on
/// the softmax wherever no probability underflows, and never needs a floor.
pub fn loss_from_logits(kind: LossKind, z: &DVector<f64>, label: usize) -> Result<f64> {
    if label >= z.len() {
        return Err(Error::OutOfRange {
            what: "class label",
            index: label,
            len: z.len(),
        });
    }
    let m = z.max();
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(match kind {
        LossKind::CrossEntropy => lse - z[label],
        LossKind::ClassAveraged => lse - z.mean(),
    })
}

/// Per-adapter gradients of a batch loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Vec<DMatrix<f64>>,
    pub w2: Vec<DMatrix<f64>>,
    /// Adapters routed to by at least one sample of the batch.
    pub touched: Vec<bool>,
}

impl Gradients {
    pub fn zeros(bank: &AdapterBank) -> Self {
        let n = bank.num_adapters();
        Gradients {
            w1: vec![DMatrix::zeros(bank.dim(), bank.hidden_dim()); n],
            w2: vec![DMatrix::zeros(bank.hidden_dim(), bank.dim()); n],
            touched: vec![false; n],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.w1.iter().chain(&self.w2).all(|m| m.iter().all(|&v| v == 0.0))
    }

    pub fn max_abs(&self) -> f64 {
        self.w1
            .iter()
            .chain(&self.w2)
            .flat_map(|m| m.iter())
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    }
}

/// Adds one example's gradient into `grads` and returns its loss.
fn accumulate(
    bank: &AdapterBank,
    ex: &Example,
    texts: &TextEmbeddingBank,
    clf: &ClassifierConfig,
    kind: LossKind,
    grads: &mut Gradients,
) -> Result<f64> {
    let j = bank.allocate(&ex.bbox)?.index();
    let adapter = bank.adapter(j)?;
    let trace = adapter.trace(&ex.feature)?;
    let lambda = bank.lambda();
    let beta = bank.mix(&trace.output, &ex.feature);

    let weights = texts.weights(clf.normalize);
    let (direction, norm) = if clf.normalize {
        let n = beta.norm();
        ensure(n > 0.0, || "adapted feature vanished; cannot normalize".into())?;
        (&beta / n, n)
    } else {
        (beta, 1.0)
    };
    let z = weights * &direction / clf.tau;
    let loss = loss_from_logits(kind, &z, ex.label)?;
    let probs = softmax(&z);

    let dlogits = match kind {
        LossKind::CrossEntropy => {
            let mut g = probs;
            g[ex.label] -= 1.0;
            g
        }
        LossKind::ClassAveraged => probs.add_scalar(-1.0 / texts.num_classes() as f64),
    };
    let d_direction = weights.tr_mul(&dlogits) / clf.tau;
    let d_beta = if clf.normalize {
        // Jacobian of v / |v| is (I - u u^T) / |v|
        (&d_direction - &direction * direction.dot(&d_direction)) / norm
    } else {
        d_direction
    };
    let d_out = d_beta * lambda;

    grads.w2[j] += &trace.hidden * d_out.transpose();
    let d_hidden = &adapter.w2 * &d_out;
    let d_pre = d_hidden.zip_map(&trace.pre_activation, |g, z| if z > 0.0 { g } else { 0.0 });
    grads.w1[j] += &ex.feature * d_pre.transpose();
    grads.touched[j] = true;
    Ok(loss)
}

/// Mean cross-entropy over `batch` and its exact gradient with respect to
/// every adapter weight.
pub fn loss_and_gradients(
    bank: &AdapterBank,
    batch: &[Example],
    texts: &TextEmbeddingBank,
    clf: &ClassifierConfig,
) -> Result<(f64, Gradients)> {
    loss_and_gradients_with(bank, batch, texts, clf, LossKind::CrossEntropy)
}

pub fn loss_and_gradients_with(
    bank: &AdapterBank,
    batch: &[Example],
    texts: &TextEmbeddingBank,
    clf: &ClassifierConfig,
    kind: LossKind,
) -> Result<(f64, Gradients)> {
    ensure(!batch.is_empty(), || "batch must not be empty".into())?;
    clf.validate()?;
    ensure_dim("text bank dim", bank.dim(), texts.dim())?;
    let mut grads = Gradients::zeros(bank);
    let mut total = 0.0;
    for ex in batch {
        ensure(ex.label < texts.num_classes(), || {
            format!("label {} out of range for {} classes", ex.label, texts.num_classes())
        })?;
        total += accumulate(bank, ex, texts, clf, kind, &mut grads)?;
    }
    let scale = 1.0 / batch.len() as f64;
    for m in grads.w1.iter_mut().chain(grads.w2.iter_mut()) {
        *m *= scale;
    }
    Ok((total * scale, grads))
}

/// Mean loss computed through the forward path only (adapt, then logits).
pub fn mean_loss(
    bank: &AdapterBank,
    examples: &[Example],
    texts: &TextEmbeddingBank,
    clf: &ClassifierConfig,
    kind: LossKind,
) -> Result<f64> {
    ensure(!examples.is_empty(), || "no examples".into())?;
    let mut total = 0.0;
    for ex in examples {
        let beta = bank.adapt_region(&ex.feature, &ex.bbox)?;
        total += loss_from_logits(kind, &logits(&beta, texts, clf)?, ex.label)?;
    }
    Ok(total / examples.len() as f64)
}

#[derive(Debug, Clone)]
struct Moments {
    m1: DMatrix<f64>,
    v1: DMatrix<f64>,
    m2: DMatrix<f64>,
    v2: DMatrix<f64>,
    steps: i32,
}

/// Applies updates only to adapters touched by the batch, so routing
/// sparsity carries over to parameter updates.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f64,
    moments: Vec<Moments>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64, bank: &AdapterBank) -> Self {
        let (d, h) = (bank.dim(), bank.hidden_dim());
        let moments = (0..bank.num_adapters())
            .map(|_| Moments {
                m1: DMatrix::zeros(d, h),
                v1: DMatrix::zeros(d, h),
                m2: DMatrix::zeros(h, d),
                v2: DMatrix::zeros(h, d),
                steps: 0,
            })
            .collect();
        Optimizer {
            kind,
            weight_decay,
            moments,
        }
    }

    pub fn step(&mut self, bank: &mut AdapterBank, grads: &Gradients, lr: f64) {
        let wd = self.weight_decay;
        for (j, adapter) in bank.adapters_mut().iter_mut().enumerate() {
            if !grads.touched[j] {
                continue;
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    if wd > 0.0 {
                        adapter.w1 *= 1.0 - lr * wd;
                        adapter.w2 *= 1.0 - lr * wd;
                    }
                    adapter.w1 -= &grads.w1[j] * lr;
                    adapter.w2 -= &grads.w2[j] * lr;
                }
                OptimizerKind::AdaptiveMoments => {
                    let st = &mut self.moments[j];
                    st.steps += 1;
                    let c1 = 1.0 - BETA1.powi(st.steps);
                    let c2 = 1.0 - BETA2.powi(st.steps);
                    adam_update(&mut adapter.w1, &grads.w1[j], &mut st.m1, &mut st.v1, lr, wd, c1, c2);
                    adam_update(&mut adapter.w2, &grads.w2[j], &mut st.m2, &mut st.v2, lr, wd, c1, c2);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update(
    w: &mut DMatrix<f64>,
    g: &DMatrix<f64>,
    m: &mut DMatrix<f64>,
    v: &mut DMatrix<f64>,
    lr: f64,
    wd: f64,
    c1: f64,
    c2: f64,
) {
    for i in 0..w.len() {
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        w[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + wd * w[i]);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss over the training set before any update.
    pub initial_loss: f64,
    /// Mean of the per-batch losses seen during each epoch.
    pub epoch_losses: Vec<f64>,
    pub epoch_lrs: Vec<f64>,
    /// Mean loss over the training set after the last update.
    pub final_loss: f64,
    pub bin_edges: Vec<(f64, f64)>,
    pub bin_counts: Vec<usize>,
    /// Training accuracy per bin after training; `None` for empty bins.
    pub bin_accuracy: Vec<Option<f64>>,
    pub empty_bins: Vec<usize>,
    pub steps: usize,
}

/// Runs the full optimization schedule. Deterministic given `cfg.seed`.
pub fn train(
    mut bank: AdapterBank,
    dataset: &Dataset,
    texts: &TextEmbeddingBank,
    cfg: &TrainConfig,
    clf: &ClassifierConfig,
) -> Result<(AdapterBank, TrainReport)> {
    cfg.validate()?;
    clf.validate()?;
    ensure(!dataset.is_empty(), || "training set is empty".into())?;
    dataset.check_compatible(texts)?;
    ensure_dim("dataset dim", bank.dim(), dataset.dim())?;
    if let Some(s) = dataset.samples().iter().find(|s| texts.split_of(s.label) == Split::Novel) {
        return Err(Error::NovelClassInTraining {
            sample_id: s.id,
            class: s.label,
        });
    }

    let examples = Example::from_dataset(dataset);
    let n_bins = bank.num_adapters();
    let mut bin_of = Vec::with_capacity(examples.len());
    let mut bin_counts = vec![0usize; n_bins];
    for ex in &examples {
        let b = bank.allocate(&ex.bbox)?.index();
        bin_counts[b] += 1;
        bin_of.push(b);
    }
    let empty_bins: Vec<usize> = (0..n_bins).filter(|&b| bin_counts[b] == 0).collect();
    if !empty_bins.is_empty() {
        warn!("bins {empty_bins:?} have no training samples; their adapters stay at initialization");
    }

    let initial_loss = mean_loss(&bank, &examples, texts, clf, cfg.loss)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.weight_decay, &bank);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut epoch_lrs = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    let mut batch = Vec::with_capacity(cfg.batch_size);

    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| examples[i].clone()));
            let (loss, grads) = loss_and_gradients_with(&bank, &batch, texts, clf, cfg.loss)?;
            ensure(loss.is_finite(), || format!("loss diverged at epoch {epoch}"))?;
            total += loss * batch.len() as f64;
            opt.step(&mut bank, &grads, lr);
            steps += 1;
        }
        let mean = total / examples.len() as f64;
        debug!("epoch {epoch}: lr {lr:e}, mean loss {mean:.6}");
        epoch_losses.push(mean);
        epoch_lrs.push(lr);
    }

    let final_loss = mean_loss(&bank, &examples, texts, clf, cfg.loss)?;
    let mut bin_correct = vec![0usize; n_bins];
    for (ex, &b) in examples.iter().zip(&bin_of) {
        let beta = bank.adapt_region(&ex.feature, &ex.bbox)?;
        let probs = classify(&beta, texts, clf)?;
        bin_correct[b] += usize::from(argmax(probs.as_slice()) == ex.label);
    }
    let bin_accuracy = bin_counts
        .iter()
        .zip(&bin_correct)
        .map(|(&n, &c)| (n > 0).then(|| c as f64 / n as f64))
        .collect();

    let report = TrainReport {
        initial_loss,
        epoch_losses,
        epoch_lrs,
        final_loss,
        bin_edges: (0..n_bins).map(|b| bank.partition().edges(b)).collect(),
        bin_counts,
        bin_accuracy,
        empty_bins,
        steps,
    };
    Ok((bank, report))
}
