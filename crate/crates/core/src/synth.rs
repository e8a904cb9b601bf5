//! Synthetic region-classification tasks with planted shape-dependent
//! deformations.
//!
//! Every aspect-ratio bin owns a hidden invertible map `M_b`. A region in bin
//! `b` with class `c` gets the feature `normalize(M_b (p_c + noise))`, where
//! `p_c` is the class prototype that also serves as its text embedding. An
//! adapter bank aligned with the bins can learn to undo each `M_b`; a single
//! shared adapter has to compromise between them.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapter::BinPartition;
use crate::classifier::{Split, TextEmbeddingBank};
use crate::data::{Dataset, RegionSample};
use crate::error::{ensure, ensure_dim, Error, Result};
use crate::geometry::{aspect_ratio, BoundingBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeformationKind {
    Identity,
    Rotation,
    GeneralLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub dim: usize,
    pub num_classes: usize,
    pub bins: usize,
    pub samples_per_class_per_bin: usize,
    pub noise_std: f64,
    pub deformation: DeformationKind,
    /// The last `novel_classes` classes are tagged novel.
    pub novel_classes: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dim: 32,
            num_classes: 8,
            bins: 4,
            samples_per_class_per_bin: 250,
            noise_std: 0.05,
            deformation: DeformationKind::Rotation,
            novel_classes: 0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.dim >= 1, || "synthetic dim must be positive".into())?;
        ensure(self.num_classes >= 2, || "need at least two classes".into())?;
        ensure(self.bins >= 1, || "need at least one bin".into())?;
        ensure(self.noise_std >= 0.0 && self.noise_std.is_finite(), || {
            format!("noise std must be non-negative, got {}", self.noise_std)
        })?;
        ensure(self.novel_classes < self.num_classes, || {
            "at least one class must be base".into()
        })
    }
}

/// Aspect ratios are drawn inside this range, clipped to each bin.
pub const RATIO_RANGE: (f64, f64) = (0.25, 4.0);

pub struct SyntheticTask {
    pub dataset: Dataset,
    pub texts: TextEmbeddingBank,
    pub partition: BinPartition,
    /// Hidden per-bin maps. Never written into the dataset.
    pub deformations: Vec<DMatrix<f64>>,
}

/// Unit-norm gaussian prototypes, rounded to `f32`.
pub fn draw_prototypes(cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<DVector<f64>> {
    (0..cfg.num_classes)
        .map(|_| {
            let v = gaussian_vector(cfg.dim, rng).normalize();
            v.map(|x| f64::from(x as f32))
        })
        .collect()
}

fn gaussian_vector(dim: usize, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| StandardNormal.sample(rng))
}

fn gaussian_matrix(dim: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(rng))
}

/// Haar-distributed rotation (orthogonal, determinant +1).
pub fn random_rotation(dim: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let qr = gaussian_matrix(dim, rng).qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    q
}

/// `U diag(s) V^T` with singular values log-uniform in `[1/2, 2]`.
pub fn random_general_linear(dim: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let u = random_rotation(dim, rng);
    let v = random_rotation(dim, rng);
    let s = DMatrix::from_diagonal(&DVector::from_fn(dim, |_, _| {
        rng.random_range(-std::f64::consts::LN_2..std::f64::consts::LN_2).exp()
    }));
    u * s * v.transpose()
}

impl SyntheticTask {
    pub fn generate(cfg: &SynthConfig) -> Result<Self> {
        Self::generate_with_partition(cfg, BinPartition::geometric(cfg.bins)?)
    }

    pub fn generate_with_partition(cfg: &SynthConfig, partition: BinPartition) -> Result<Self> {
        cfg.validate()?;
        ensure_dim("synthetic partition bins", cfg.bins, partition.num_bins())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let prototypes = draw_prototypes(cfg, &mut rng);
        let deformations = (0..cfg.bins)
            .map(|_| match cfg.deformation {
                DeformationKind::Identity => DMatrix::identity(cfg.dim, cfg.dim),
                DeformationKind::Rotation => random_rotation(cfg.dim, &mut rng),
                DeformationKind::GeneralLinear => random_general_linear(cfg.dim, &mut rng),
            })
            .collect();
        Self::assemble(cfg, partition, prototypes, deformations, &mut rng)
    }

    /// Builds a task from explicit prototypes and maps; sampling noise and
    /// boxes still derive from `cfg.seed`.
    pub fn generate_with_maps(
        cfg: &SynthConfig,
        partition: BinPartition,
        prototypes: Vec<DVector<f64>>,
        deformations: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        cfg.validate()?;
        ensure_dim("synthetic partition bins", cfg.bins, partition.num_bins())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
        Self::assemble(cfg, partition, prototypes, deformations, &mut rng)
    }

    fn assemble(
        cfg: &SynthConfig,
        partition: BinPartition,
        prototypes: Vec<DVector<f64>>,
        deformations: Vec<DMatrix<f64>>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        ensure_dim("prototype count", cfg.num_classes, prototypes.len())?;
        ensure_dim("deformation count", cfg.bins, deformations.len())?;
        for m in &deformations {
            ensure(m.nrows() == cfg.dim && m.ncols() == cfg.dim, || {
                "deformation has the wrong shape".into()
            })?;
            ensure(m.clone().try_inverse().is_some(), || "deformation is singular".into())?;
        }

        let class_names: Vec<String> = (0..cfg.num_classes).map(|c| format!("class_{c:02}")).collect();
        let split_tags: Vec<Split> = (0..cfg.num_classes)
            .map(|c| {
                if c >= cfg.num_classes - cfg.novel_classes {
                    Split::Novel
                } else {
                    Split::Base
                }
            })
            .collect();
        let flat: Vec<f32> = prototypes.iter().flat_map(|p| p.iter().map(|&v| v as f32)).collect();
        let texts = TextEmbeddingBank::new(cfg.dim, flat, class_names.clone(), split_tags.clone())?;

        let mut samples = Vec::with_capacity(cfg.bins * cfg.num_classes * cfg.samples_per_class_per_bin);
        let mut id = 0u64;
        for (b, m) in deformations.iter().enumerate() {
            let (lo, hi) = partition.edges(b);
            let (lo, hi) = (lo.max(RATIO_RANGE.0), hi.min(RATIO_RANGE.1));
            ensure(lo < hi, || format!("bin {b} does not intersect the sampling ratio range"))?;
            for (c, proto) in prototypes.iter().enumerate() {
                for _ in 0..cfg.samples_per_class_per_bin {
                    let noisy = proto + gaussian_vector(cfg.dim, rng) * cfg.noise_std;
                    let v = m * noisy;
                    let n = v.norm();
                    if n == 0.0 {
                        return Err(Error::Validation("synthetic feature collapsed to zero".into()));
                    }
                    let feature: Vec<f32> = (v / n).iter().map(|&x| x as f32).collect();
                    let bbox = sample_box(&partition, b, lo, hi, rng)?;
                    samples.push(RegionSample {
                        id,
                        image_id: id,
                        bbox,
                        label: c,
                        split: split_tags[c],
                        feature,
                    });
                    id += 1;
                }
            }
        }
        let dataset = Dataset::new(cfg.dim, class_names, split_tags, samples)?;
        Ok(SyntheticTask {
            dataset,
            texts,
            partition,
            deformations,
        })
    }

    /// Accuracy of classifying with the true inverse maps before cosine
    /// matching: an upper reference for any learned adapter.
    pub fn oracle_accuracy(&self, dataset: &Dataset) -> Result<f64> {
        ensure(!dataset.is_empty(), || "oracle needs at least one sample".into())?;
        let inverses: Vec<DMatrix<f64>> = self
            .deformations
            .iter()
            .map(|m| m.clone().try_inverse().expect("checked invertible at construction"))
            .collect();
        let protos: Vec<DVector<f64>> = (0..self.texts.num_classes())
            .map(|c| {
                let p = self.texts.prototype(c);
                DVector::from_iterator(p.len(), p.iter().map(|&v| f64::from(v))).normalize()
            })
            .collect();
        let mut correct = 0usize;
        for s in dataset.samples() {
            let b = self.partition.bin_of(aspect_ratio(&s.bbox)?)?;
            let restored = (&inverses[b] * s.feature_f64()).normalize();
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for (c, p) in protos.iter().enumerate() {
                let sim = restored.dot(p);
                if sim > best_sim {
                    best_sim = sim;
                    best = c;
                }
            }
            correct += usize::from(best == s.label);
        }
        Ok(correct as f64 / dataset.len() as f64)
    }
}

/// Unit-area box at the origin whose h/w lies in bin `b`, log-uniform in `(lo, hi)`.
fn sample_box(partition: &BinPartition, b: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Result<BoundingBox> {
    loop {
        let ratio = rng.random_range(lo.ln()..hi.ln()).exp();
        let s = ratio.sqrt();
        let bbox = BoundingBox::new(0.0, 0.0, 1.0 / s, s)?;
        // rounding in h/w can push a draw at the edge into the neighbouring bin
        if partition.bin_of(aspect_ratio(&bbox)?)? == b {
            return Ok(bbox);
        }
    }
}
