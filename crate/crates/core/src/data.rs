//! Region-feature datasets and their on-disk container.
//!
//! Layout: a one-line JSON header carrying the class table and one metadata
//! row per sample (each with the byte offset of its feature), followed by a
//! little-endian `f32` blob of `sample_count x dim` values in sample order.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::BinPartition;
use crate::classifier::{Split, TextEmbeddingBank};
use crate::container;
use crate::error::{ensure, Error, Result};
use crate::geometry::{aspect_ratio, BoundingBox};

#[derive(Debug, Clone, PartialEq)]
pub struct RegionSample {
    pub id: u64,
    pub image_id: u64,
    pub bbox: BoundingBox,
    pub label: usize,
    pub split: Split,
    pub feature: Vec<f32>,
}

impl RegionSample {
    pub fn feature_f64(&self) -> DVector<f64> {
        DVector::from_iterator(self.feature.len(), self.feature.iter().map(|&v| f64::from(v)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    class_names: Vec<String>,
    split_tags: Vec<Split>,
    samples: Vec<RegionSample>,
}

impl Dataset {
    pub fn new(
        dim: usize,
        class_names: Vec<String>,
        split_tags: Vec<Split>,
        samples: Vec<RegionSample>,
    ) -> Result<Self> {
        let ds = Dataset {
            dim,
            class_names,
            split_tags,
            samples,
        };
        ds.check().map_err(Error::Validation)?;
        Ok(ds)
    }

    fn check(&self) -> std::result::Result<(), String> {
        let k = self.class_names.len();
        if self.dim == 0 {
            return Err("dataset dim must be positive".into());
        }
        if self.split_tags.len() != k {
            return Err(format!("{k} classes but {} split tags", self.split_tags.len()));
        }
        for s in &self.samples {
            if s.label >= k {
                return Err(format!("sample {} has label {} but K = {k}", s.id, s.label));
            }
            if s.split != self.split_tags[s.label] {
                return Err(format!(
                    "sample {} tagged {} but class {} is {}",
                    s.id, s.split, s.label, self.split_tags[s.label]
                ));
            }
            if s.feature.len() != self.dim {
                return Err(format!(
                    "sample {} has feature length {} (dim {})",
                    s.id,
                    s.feature.len(),
                    self.dim
                ));
            }
            if !s.feature.iter().all(|v| v.is_finite()) {
                return Err(format!("sample {} has a non-finite feature", s.id));
            }
            s.bbox.validate().map_err(|e| format!("sample {}: {e}", s.id))?;
        }
        Ok(())
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

    pub fn samples(&self) -> &[RegionSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Same class table, different samples.
    pub fn with_samples(&self, samples: Vec<RegionSample>) -> Result<Self> {
        Self::new(self.dim, self.class_names.clone(), self.split_tags.clone(), samples)
    }

    /// Checks that class table and dimension agree with a text bank.
    pub fn check_compatible(&self, texts: &TextEmbeddingBank) -> Result<()> {
        crate::error::ensure_dim("text bank dim", self.dim, texts.dim())?;
        crate::error::ensure_dim("text bank classes", self.num_classes(), texts.num_classes())?;
        ensure(self.split_tags == texts.split_tags(), || {
            "dataset and text bank disagree on class splits".into()
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let stride = self.dim * 4;
        let header = DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            dim: self.dim,
            num_classes: self.num_classes(),
            class_names: self.class_names.clone(),
            split_tags: self.split_tags.clone(),
            sample_count: self.samples.len(),
            samples: self
                .samples
                .iter()
                .enumerate()
                .map(|(i, s)| SampleRow {
                    id: s.id,
                    image_id: s.image_id,
                    bbox: [s.bbox.x, s.bbox.y, s.bbox.w, s.bbox.h],
                    label: s.label,
                    split: s.split,
                    offset: i * stride,
                })
                .collect(),
        };
        let blob: Vec<f32> = self.samples.iter().flat_map(|s| s.feature.iter().copied()).collect();
        container::encode(&header, &blob)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, blob): (DatasetHeader, _) = container::split(DATASET_FORMAT, bytes)?;
        container::check_kind(DATASET_FORMAT, &h.format)?;
        container::check_version(DATASET_FORMAT, h.version, DATASET_VERSION)?;
        let inconsistent = |detail: String| Error::InconsistentHeader {
            format: DATASET_FORMAT,
            detail,
        };
        if h.class_names.len() != h.num_classes || h.sample_count != h.samples.len() {
            return Err(inconsistent(format!(
                "num_classes {} with {} names; sample_count {} with {} rows",
                h.num_classes,
                h.class_names.len(),
                h.sample_count,
                h.samples.len()
            )));
        }
        let values = container::decode_f32(DATASET_FORMAT, blob, h.sample_count * h.dim)?;
        let stride = h.dim * 4;
        let mut samples = Vec::with_capacity(h.sample_count);
        for (i, row) in h.samples.into_iter().enumerate() {
            if row.offset != i * stride {
                return Err(inconsistent(format!(
                    "sample {} offset {} (expected {})",
                    row.id,
                    row.offset,
                    i * stride
                )));
            }
            let start = i * h.dim;
            samples.push(RegionSample {
                id: row.id,
                image_id: row.image_id,
                bbox: BoundingBox {
                    x: row.bbox[0],
                    y: row.bbox[1],
                    w: row.bbox[2],
                    h: row.bbox[3],
                },
                label: row.label,
                split: row.split,
                feature: values[start..start + h.dim].to_vec(),
            });
        }
        let ds = Dataset {
            dim: h.dim,
            class_names: h.class_names,
            split_tags: h.split_tags,
            samples,
        };
        ds.check().map_err(inconsistent)?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::read_file(path)?)
    }

    /// Sample metadata as CSV (no features).
    pub fn write_metadata_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["id", "image_id", "x", "y", "w", "h", "label", "class_name", "split"])?;
        for s in &self.samples {
            w.write_record([
                s.id.to_string(),
                s.image_id.to_string(),
                s.bbox.x.to_string(),
                s.bbox.y.to_string(),
                s.bbox.w.to_string(),
                s.bbox.h.to_string(),
                s.label.to_string(),
                self.class_names[s.label].clone(),
                s.split.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

const DATASET_FORMAT: &str = "sia.dataset";
const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    dim: usize,
    num_classes: usize,
    class_names: Vec<String>,
    split_tags: Vec<Split>,
    sample_count: usize,
    samples: Vec<SampleRow>,
}

#[derive(Serialize, Deserialize)]
struct SampleRow {
    id: u64,
    image_id: u64,
    /// `[x, y, w, h]`
    #[serde(rename = "box")]
    bbox: [f64; 4],
    label: usize,
    split: Split,
    offset: usize,
}

/// Label-stratified split. Novel-class samples and classes with fewer than
/// two samples go entirely to the eval side; original sample order is kept
/// on both sides.
pub fn split_train_eval(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    ensure(fraction > 0.0 && fraction < 1.0, || {
        format!("split fraction must lie in (0, 1), got {fraction}")
    })?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; dataset.len()];
    for (class, mut idx) in by_class {
        if dataset.split_tags[class] == Split::Novel {
            continue;
        }
        if idx.len() < 2 {
            warn!("class {class} has {} sample(s); placing it entirely in eval", idx.len());
            continue;
        }
        idx.shuffle(&mut rng);
        let n_train = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        for &i in &idx[..n_train] {
            in_train[i] = true;
        }
    }
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (s, t) in dataset.samples.iter().zip(in_train) {
        if t {
            train.push(s.clone());
        } else {
            eval.push(s.clone());
        }
    }
    Ok((dataset.with_samples(train)?, dataset.with_samples(eval)?))
}

/// Deterministic split by (class, shape bin) cell: the first `train_per_cell`
/// base-class samples of each cell, in dataset order, form the train side.
/// Everything else, including every novel-class sample, goes to eval.
pub fn split_per_bin(
    dataset: &Dataset,
    partition: &BinPartition,
    train_per_cell: usize,
) -> Result<(Dataset, Dataset)> {
    let mut seen: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for s in &dataset.samples {
        let bin = partition.bin_of(aspect_ratio(&s.bbox)?)?;
        let count = seen.entry((s.label, bin)).or_default();
        if dataset.split_tags[s.label] == Split::Base && *count < train_per_cell {
            *count += 1;
            train.push(s.clone());
        } else {
            eval.push(s.clone());
        }
    }
    Ok((dataset.with_samples(train)?, dataset.with_samples(eval)?))
}

/// Keeps at most `per_cell` samples of each (class, shape bin) cell.
pub fn thin_per_bin(dataset: &Dataset, partition: &BinPartition, per_cell: usize) -> Result<Dataset> {
    let mut seen: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut kept = Vec::new();
    for s in &dataset.samples {
        let bin = partition.bin_of(aspect_ratio(&s.bbox)?)?;
        let count = seen.entry((s.label, bin)).or_default();
        if *count < per_cell {
            *count += 1;
            kept.push(s.clone());
        }
    }
    dataset.with_samples(kept)
}
