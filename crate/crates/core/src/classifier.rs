//! Open-vocabulary classification of adapted region features against class
//! text embeddings, plus detection score fusion.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterBank, Feature};
use crate::container;
use crate::error::{ensure, ensure_dim, Error, Result};
use crate::geometry::{BoundingBox, RegionProposal};

/// Whether a class had instance-level annotations during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Novel,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Base => "base",
            Split::Novel => "novel",
        })
    }
}

/// `K` class prototype vectors in the joint embedding space.
///
/// Prototypes are kept at `f32`, the precision they are ingested and stored
/// at; `f64` copies (raw and L2-normalized) are derived once for scoring.
#[derive(Debug, Clone)]
pub struct TextEmbeddingBank {
    dim: usize,
    prototypes: Vec<f32>,
    class_names: Vec<String>,
    split_tags: Vec<Split>,
    raw: DMatrix<f64>,
    unit: DMatrix<f64>,
}

impl PartialEq for TextEmbeddingBank {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.prototypes == other.prototypes
            && self.class_names == other.class_names
            && self.split_tags == other.split_tags
    }
}

impl TextEmbeddingBank {
    /// `prototypes` is column-major by class: class `k` occupies
    /// `prototypes[k * dim .. (k + 1) * dim]`.
    pub fn new(
        dim: usize,
        prototypes: Vec<f32>,
        class_names: Vec<String>,
        split_tags: Vec<Split>,
    ) -> Result<Self> {
        let k = class_names.len();
        ensure(k >= 2, || format!("need at least two classes, got {k}"))?;
        ensure(dim >= 1, || "embedding dim must be positive".into())?;
        ensure_dim("split tags", k, split_tags.len())?;
        ensure_dim("prototype values", k * dim, prototypes.len())?;
        ensure(prototypes.iter().all(|v| v.is_finite()), || {
            "text embeddings contain non-finite values".into()
        })?;
        let raw = DMatrix::from_row_iterator(k, dim, prototypes.iter().map(|&v| f64::from(v)));
        let mut unit = raw.clone();
        for (c, mut row) in unit.row_iter_mut().enumerate() {
            let n = row.norm();
            ensure(n > 0.0, || format!("class {c} has a zero prototype"))?;
            row /= n;
        }
        Ok(TextEmbeddingBank {
            dim,
            prototypes,
            class_names,
            split_tags,
            raw,
            unit,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn split_tags(&self) -> &[Split] {
        &self.split_tags
    }

    pub fn split_of(&self, class: usize) -> Split {
        self.split_tags[class]
    }

    pub fn prototype(&self, class: usize) -> &[f32] {
        &self.prototypes[class * self.dim..(class + 1) * self.dim]
    }

    pub fn raw_values(&self) -> &[f32] {
        &self.prototypes
    }

    /// `K x D` matrix used for the logits: rows are prototypes, unit-length
    /// when `normalize` is set.
    pub fn weights(&self, normalize: bool) -> &DMatrix<f64> {
        if normalize {
            &self.unit
        } else {
            &self.raw
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = TextHeader {
            format: TEXT_FORMAT.into(),
            version: TEXT_VERSION,
            num_classes: self.num_classes(),
            dim: self.dim,
            class_names: self.class_names.clone(),
            split_tags: self.split_tags.clone(),
        };
        container::encode(&header, &self.prototypes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, blob): (TextHeader, _) = container::split(TEXT_FORMAT, bytes)?;
        container::check_kind(TEXT_FORMAT, &h.format)?;
        container::check_version(TEXT_FORMAT, h.version, TEXT_VERSION)?;
        if h.class_names.len() != h.num_classes || h.split_tags.len() != h.num_classes {
            return Err(Error::InconsistentHeader {
                format: TEXT_FORMAT,
                detail: format!(
                    "num_classes {} but {} names and {} split tags",
                    h.num_classes,
                    h.class_names.len(),
                    h.split_tags.len()
                ),
            });
        }
        let values = container::decode_f32(TEXT_FORMAT, blob, h.num_classes * h.dim)?;
        Self::new(h.dim, values, h.class_names, h.split_tags)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::read_file(path)?)
    }
}

const TEXT_FORMAT: &str = "sia.text_bank";
const TEXT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TextHeader {
    format: String,
    version: u32,
    num_classes: usize,
    dim: usize,
    class_names: Vec<String>,
    split_tags: Vec<Split>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    /// Softmax temperature.
    pub tau: f64,
    /// L2-normalize region and text vectors, making the logit a cosine similarity.
    pub normalize: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            tau: 0.01,
            normalize: true,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.tau > 0.0 && self.tau.is_finite(), || {
            format!("temperature must be positive, got {}", self.tau)
        })
    }
}

/// Logits `sim(beta, alpha_k) / tau` for every class.
pub fn logits(beta: &Feature, texts: &TextEmbeddingBank, cfg: &ClassifierConfig) -> Result<DVector<f64>> {
    cfg.validate()?;
    ensure_dim("region feature", texts.dim(), beta.len())?;
    ensure(beta.iter().all(|v| v.is_finite()), || "region feature is not finite".into())?;
    let w = texts.weights(cfg.normalize);
    let sims = if cfg.normalize {
        let n = beta.norm();
        ensure(n > 0.0, || "cannot normalize a zero region feature".into())?;
        w * (beta / n)
    } else {
        w * beta
    };
    Ok(sims / cfg.tau)
}

/// Max-shifted softmax.
pub fn softmax(z: &DVector<f64>) -> DVector<f64> {
    let m = z.max();
    let e = z.map(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

pub fn classify(beta: &Feature, texts: &TextEmbeddingBank, cfg: &ClassifierConfig) -> Result<DVector<f64>> {
    Ok(softmax(&logits(beta, texts, cfg)?))
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `(max probability, its class)`, ties broken toward the lowest index.
pub fn classification_score(probs: &DVector<f64>) -> (f64, usize) {
    let k = argmax(probs.as_slice());
    (probs[k], k)
}

pub fn fuse_scores(score_c: f64, score_l: f64) -> Result<f64> {
    ensure((0.0..=1.0).contains(&score_c) && (0.0..=1.0).contains(&score_l), || {
        format!("scores must lie in [0, 1], got ({score_c}, {score_l})")
    })?;
    Ok(score_c * score_l)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDetection {
    pub bbox: BoundingBox,
    pub probs: DVector<f64>,
    pub score_c: f64,
    pub score_l: f64,
    pub score_box: f64,
    pub predicted_class: usize,
}

pub fn score_features(
    bbox: BoundingBox,
    score_l: f64,
    beta: &Feature,
    texts: &TextEmbeddingBank,
    cfg: &ClassifierConfig,
) -> Result<ScoredDetection> {
    let probs = classify(beta, texts, cfg)?;
    let (score_c, predicted_class) = classification_score(&probs);
    let score_box = fuse_scores(score_c, score_l)?;
    Ok(ScoredDetection {
        bbox,
        probs,
        score_c,
        score_l,
        score_box,
        predicted_class,
    })
}

/// Adapt, classify and fuse for a single proposal.
pub fn score_proposal(
    proposal: &RegionProposal,
    f: &Feature,
    bank: &AdapterBank,
    texts: &TextEmbeddingBank,
    cfg: &ClassifierConfig,
) -> Result<ScoredDetection> {
    ensure(
        (0.0..=1.0).contains(&proposal.score_l),
        || format!("localization score {} outside [0, 1]", proposal.score_l),
    )?;
    let beta = bank.adapt_region(f, &proposal.bbox)?;
    score_features(proposal.bbox, proposal.score_l, &beta, texts, cfg)
}
