//! Central finite-difference verification of the analytic adapter gradients.
//!
//! The numerical side perturbs each weight and re-evaluates the loss through
//! the forward path only ([`crate::trainer::mean_loss`]); it shares no code
//! with the backward pass it checks.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, AdapterBank, BinPartition};
use crate::classifier::{ClassifierConfig, Split, TextEmbeddingBank};
use crate::error::Result;
use crate::geometry::BoundingBox;
use crate::trainer::{mean_loss, Example, Gradients, LossKind};

/// Denominator floor for the relative error, so entries that are zero on
/// both sides compare as equal.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckDims {
    pub dim: usize,
    pub hidden_dim: usize,
    pub num_adapters: usize,
    pub num_classes: usize,
    pub batch: usize,
}

impl Default for GradCheckDims {
    fn default() -> Self {
        GradCheckDims {
            dim: 8,
            hidden_dim: 2,
            num_adapters: 3,
            num_classes: 5,
            batch: 4,
        }
    }
}

pub struct GradCheckInstance {
    pub bank: AdapterBank,
    pub batch: Vec<Example>,
    pub texts: TextEmbeddingBank,
}

/// Smallest `|pre-activation|` over the batch.
pub fn activation_margin(bank: &AdapterBank, batch: &[Example]) -> Result<f64> {
    let mut margin = f64::INFINITY;
    for ex in batch {
        let j = bank.allocate(&ex.bbox)?.index();
        let t = bank.adapter(j)?.trace(&ex.feature)?;
        margin = t.pre_activation.iter().fold(margin, |m, v| m.min(v.abs()));
    }
    Ok(margin)
}

/// Random instance whose pre-activations all stay at least `margin` from 0.
pub fn random_instance(dims: &GradCheckDims, lambda: Option<f64>, margin: f64, seed: u64) -> Result<GradCheckInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let inst = draw_instance(dims, lambda, &mut rng)?;
        if activation_margin(&inst.bank, &inst.batch)? >= margin {
            return Ok(inst);
        }
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn draw_instance(dims: &GradCheckDims, lambda: Option<f64>, rng: &mut ChaCha8Rng) -> Result<GradCheckInstance> {
    let (d, h) = (dims.dim, dims.hidden_dim);
    let scale = 1.0 / (d as f64).sqrt();
    let adapters = (0..dims.num_adapters)
        .map(|_| Adapter {
            w1: DMatrix::from_fn(d, h, |_, _| normal(rng) * scale),
            w2: DMatrix::from_fn(h, d, |_, _| normal(rng) * scale),
        })
        .collect();
    let lambda = lambda.unwrap_or_else(|| rng.random_range(0.1..0.9));
    let bank = AdapterBank::new(adapters, BinPartition::geometric(dims.num_adapters)?, lambda)?;
    let protos: Vec<f32> = (0..dims.num_classes * d).map(|_| normal(rng) as f32).collect();
    let texts = TextEmbeddingBank::new(
        d,
        protos,
        (0..dims.num_classes).map(|c| format!("c{c}")).collect(),
        vec![Split::Base; dims.num_classes],
    )?;
    let batch = (0..dims.batch)
        .map(|_| {
            let ratio: f64 = rng.random_range((0.125f64).ln()..8f64.ln()).exp();
            Ok(Example {
                feature: nalgebra::DVector::from_fn(d, |_, _| normal(rng)),
                bbox: BoundingBox::new(0.0, 0.0, 1.0, ratio)?,
                label: rng.random_range(0..dims.num_classes),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckInstance { bank, batch, texts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub compared: usize,
    /// Coordinates whose perturbation flips a ReLU and were left out.
    pub skipped: usize,
    pub max_abs_gradient: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        self.compared += other.compared;
        self.skipped += other.skipped;
        self.max_abs_gradient = self.max_abs_gradient.max(other.max_abs_gradient);
    }
}

#[derive(Clone, Copy)]
enum Layer {
    Down,
    Up,
}

fn perturbed(bank: &AdapterBank, j: usize, layer: Layer, idx: usize, delta: f64) -> AdapterBank {
    let mut b = bank.clone();
    let a = &mut b.adapters_mut()[j];
    match layer {
        Layer::Down => a.w1[idx] += delta,
        Layer::Up => a.w2[idx] += delta,
    }
    b
}

fn activation_pattern(bank: &AdapterBank, batch: &[Example]) -> Result<Vec<bool>> {
    let mut out = Vec::new();
    for ex in batch {
        let j = bank.allocate(&ex.bbox)?.index();
        let t = bank.adapter(j)?.trace(&ex.feature)?;
        out.extend(t.pre_activation.iter().map(|&v| v > 0.0));
    }
    Ok(out)
}

/// Compares `analytic` against central differences with the given step.
pub fn check_gradients(
    bank: &AdapterBank,
    batch: &[Example],
    texts: &TextEmbeddingBank,
    clf: &ClassifierConfig,
    kind: LossKind,
    analytic: &Gradients,
    step: f64,
) -> Result<GradCheckReport> {
    let base_pattern = activation_pattern(bank, batch)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        compared: 0,
        skipped: 0,
        max_abs_gradient: analytic.max_abs(),
    };
    for j in 0..bank.num_adapters() {
        for (layer, grad) in [(Layer::Down, &analytic.w1[j]), (Layer::Up, &analytic.w2[j])] {
            for idx in 0..grad.len() {
                let plus = perturbed(bank, j, layer, idx, step);
                let minus = perturbed(bank, j, layer, idx, -step);
                if activation_pattern(&plus, batch)? != base_pattern
                    || activation_pattern(&minus, batch)? != base_pattern
                {
                    report.skipped += 1;
                    continue;
                }
                let numeric = (mean_loss(&plus, batch, texts, clf, kind)?
                    - mean_loss(&minus, batch, texts, clf, kind)?)
                    / (2.0 * step);
                let a = grad[idx];
                report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
                report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
                report.compared += 1;
            }
        }
    }
    Ok(report)
}
