//! Accuracy breakdowns (overall, per split, per class, per aspect-ratio bin)
//! and AP at IoU 0.5.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterBank, BinPartition, Feature};
use crate::classifier::{classify, argmax, score_features, ClassifierConfig, ScoredDetection, Split, TextEmbeddingBank};
use crate::data::{Dataset, RegionSample};
use crate::error::{ensure, Error, Result};
use crate::geometry::{aspect_ratio, iou_unchecked, BoundingBox};

pub const AP_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub predicted: usize,
    pub truth: usize,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub name: String,
    pub split: Split,
    pub count: usize,
    pub correct: usize,
    /// `None` when the class has no samples.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinAccuracy {
    pub bin: usize,
    pub lower: f64,
    /// `None` for the unbounded last bin.
    pub upper: Option<f64>,
    pub count: usize,
    pub correct: usize,
    /// `None` when the bin has no samples.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    /// AP per class; `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean_all: Option<f64>,
    pub mean_base: Option<f64>,
    pub mean_novel: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sample_count: usize,
    pub overall_accuracy: f64,
    pub base_accuracy: Option<f64>,
    pub novel_accuracy: Option<f64>,
    pub per_class: Vec<ClassAccuracy>,
    pub per_bin: Vec<BinAccuracy>,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<usize>>,
    pub ap50: Option<ApSummary>,
}

fn ratio(correct: usize, count: usize) -> Option<f64> {
    (count > 0).then(|| correct as f64 / count as f64)
}

pub fn accuracy_report(
    predictions: &[Prediction],
    partition: &BinPartition,
    class_names: &[String],
    split_tags: &[Split],
) -> Result<EvalReport> {
    ensure(!predictions.is_empty(), || "no predictions to evaluate".into())?;
    let k = class_names.len();
    crate::error::ensure_dim("split tags", k, split_tags.len())?;
    let mut confusion = vec![vec![0usize; k]; k];
    let mut bin_count = vec![0usize; partition.num_bins()];
    let mut bin_correct = vec![0usize; partition.num_bins()];
    for p in predictions {
        ensure(p.truth < k && p.predicted < k, || {
            format!("prediction {} / truth {} outside {k} classes", p.predicted, p.truth)
        })?;
        confusion[p.truth][p.predicted] += 1;
        let b = partition.bin_of(aspect_ratio(&p.bbox)?)?;
        bin_count[b] += 1;
        bin_correct[b] += usize::from(p.predicted == p.truth);
    }

    let per_class: Vec<ClassAccuracy> = (0..k)
        .map(|c| {
            let count: usize = confusion[c].iter().sum();
            ClassAccuracy {
                class: c,
                name: class_names[c].clone(),
                split: split_tags[c],
                count,
                correct: confusion[c][c],
                accuracy: ratio(confusion[c][c], count),
            }
        })
        .collect();
    let split_acc = |split: Split| {
        let (n, c) = per_class
            .iter()
            .filter(|a| a.split == split)
            .fold((0, 0), |(n, c), a| (n + a.count, c + a.correct));
        ratio(c, n)
    };
    let correct: usize = per_class.iter().map(|a| a.correct).sum();
    let per_bin = (0..partition.num_bins())
        .map(|b| {
            let (lower, upper) = partition.edges(b);
            BinAccuracy {
                bin: b,
                lower,
                upper: upper.is_finite().then_some(upper),
                count: bin_count[b],
                correct: bin_correct[b],
                accuracy: ratio(bin_correct[b], bin_count[b]),
            }
        })
        .collect();

    Ok(EvalReport {
        sample_count: predictions.len(),
        overall_accuracy: correct as f64 / predictions.len() as f64,
        base_accuracy: split_acc(Split::Base),
        novel_accuracy: split_acc(Split::Novel),
        per_class,
        per_bin,
        confusion,
        ap50: None,
    })
}

/// A detection reduced to what AP needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageDetection {
    pub image_id: u64,
    pub class: usize,
    pub score: f64,
    pub bbox: BoundingBox,
}

impl ImageDetection {
    pub fn from_scored(image_id: u64, det: &ScoredDetection) -> Self {
        ImageDetection {
            image_id,
            class: det.predicted_class,
            score: det.score_box,
            bbox: det.bbox,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub image_id: u64,
    pub class: usize,
    pub bbox: BoundingBox,
}

/// Greedy true/false-positive flags for one class, in descending score
/// order (stable on ties).
pub fn match_detections(dets: &[ImageDetection], gts: &[GroundTruth]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut by_image: HashMap<u64, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image_id).or_default().push(i);
    }
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            for &g in by_image.get(&d.image_id).map(Vec::as_slice).unwrap_or(&[]) {
                if taken[g] {
                    continue;
                }
                let o = iou_unchecked(&d.bbox, &gts[g].bbox);
                if o >= AP_IOU_THRESHOLD && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((g, o));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-point interpolated AP from ranked TP flags: each true positive adds
/// a recall step of `1 / num_gt` at the best precision reachable at or
/// beyond its rank.
pub fn average_precision(tp: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (rank, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        precision.push(hits as f64 / (rank + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let g = num_gt as f64;
    Some(
        tp.iter()
            .zip(&precision)
            .filter(|(&t, _)| t)
            .map(|(_, &p)| p / g)
            .sum(),
    )
}

/// Per-class AP at IoU 0.5. Classes without ground truth get `None`.
pub fn ap50(detections: &[ImageDetection], ground_truth: &[GroundTruth], num_classes: usize) -> Result<Vec<Option<f64>>> {
    for d in detections {
        ensure(d.score.is_finite(), || format!("detection score {} is not finite", d.score))?;
        ensure(d.class < num_classes, || format!("detection class {} out of range", d.class))?;
        d.bbox.validate()?;
    }
    for g in ground_truth {
        ensure(g.class < num_classes, || format!("ground-truth class {} out of range", g.class))?;
        g.bbox.validate()?;
    }
    Ok((0..num_classes)
        .map(|c| {
            let dets: Vec<ImageDetection> = detections.iter().filter(|d| d.class == c).copied().collect();
            let gts: Vec<GroundTruth> = ground_truth.iter().filter(|g| g.class == c).copied().collect();
            average_precision(&match_detections(&dets, &gts), gts.len())
        })
        .collect())
}

/// Mean over `classes`, skipping classes without ground truth.
pub fn mean_ap(per_class: &[Option<f64>], classes: impl IntoIterator<Item = usize>) -> Option<f64> {
    let vals: Vec<f64> = classes.into_iter().filter_map(|c| per_class[c]).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Scores each sample's ground-truth box (`score_l = 1`) with the features
/// produced by `adapt`, then builds the full report including AP50.
pub fn evaluate_with<F>(
    dataset: &Dataset,
    texts: &TextEmbeddingBank,
    clf: &ClassifierConfig,
    partition: &BinPartition,
    adapt: F,
) -> Result<EvalReport>
where
    F: Fn(&RegionSample, &Feature) -> Result<Feature>,
{
    dataset.check_compatible(texts)?;
    let mut preds = Vec::with_capacity(dataset.len());
    let mut dets = Vec::with_capacity(dataset.len());
    let mut gts = Vec::with_capacity(dataset.len());
    for s in dataset.samples() {
        let beta = adapt(s, &s.feature_f64())?;
        let det = score_features(s.bbox, 1.0, &beta, texts, clf)?;
        preds.push(Prediction {
            predicted: det.predicted_class,
            truth: s.label,
            bbox: s.bbox,
        });
        dets.push(ImageDetection::from_scored(s.image_id, &det));
        gts.push(GroundTruth {
            image_id: s.image_id,
            class: s.label,
            bbox: s.bbox,
        });
    }
    let mut report = accuracy_report(&preds, partition, dataset.class_names(), dataset.split_tags())?;
    let k = dataset.num_classes();
    let per_class = ap50(&dets, &gts, k)?;
    let tags = dataset.split_tags();
    report.ap50 = Some(ApSummary {
        mean_all: mean_ap(&per_class, 0..k),
        mean_base: mean_ap(&per_class, (0..k).filter(|&c| tags[c] == Split::Base)),
        mean_novel: mean_ap(&per_class, (0..k).filter(|&c| tags[c] == Split::Novel)),
        per_class,
    });
    Ok(report)
}

/// Report for features passed through `bank`; bins default to the bank's partition.
pub fn evaluate_bank(
    bank: &AdapterBank,
    dataset: &Dataset,
    texts: &TextEmbeddingBank,
    clf: &ClassifierConfig,
    bins: Option<&BinPartition>,
) -> Result<EvalReport> {
    let partition = bins.unwrap_or(bank.partition());
    evaluate_with(dataset, texts, clf, partition, |s, f| bank.adapt_region(f, &s.bbox))
}

/// Report for the raw, un-adapted features.
pub fn evaluate_baseline(
    dataset: &Dataset,
    texts: &TextEmbeddingBank,
    clf: &ClassifierConfig,
    bins: &BinPartition,
) -> Result<EvalReport> {
    evaluate_with(dataset, texts, clf, bins, |_, f| Ok(f.clone()))
}

/// Predicted class of every sample under `bank`.
pub fn predict(bank: &AdapterBank, dataset: &Dataset, texts: &TextEmbeddingBank, clf: &ClassifierConfig) -> Result<Vec<usize>> {
    dataset
        .samples()
        .iter()
        .map(|s| {
            let beta = bank.adapt_region(&s.feature_f64(), &s.bbox)?;
            Ok(argmax(classify(&beta, texts, clf)?.as_slice()))
        })
        .collect()
}

impl EvalReport {
    pub fn write_per_class_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["class", "name", "split", "count", "correct", "accuracy"])?;
        for c in &self.per_class {
            w.write_record([
                c.class.to_string(),
                c.name.clone(),
                c.split.to_string(),
                c.count.to_string(),
                c.correct.to_string(),
                opt(c.accuracy),
            ])?;
        }
        flush(w)
    }

    pub fn write_per_bin_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin", "lower", "upper", "count", "correct", "accuracy"])?;
        for b in &self.per_bin {
            w.write_record([
                b.bin.to_string(),
                b.lower.to_string(),
                b.upper.map_or_else(|| "inf".to_string(), |u| u.to_string()),
                b.count.to_string(),
                b.correct.to_string(),
                opt(b.accuracy),
            ])?;
        }
        flush(w)
    }

    pub fn write_confusion_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["true\\pred".to_string()];
        header.extend(self.per_class.iter().map(|c| c.name.clone()));
        w.write_record(&header)?;
        for (c, row) in self.confusion.iter().enumerate() {
            let mut rec = vec![self.per_class[c].name.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        flush(w)
    }

    pub fn write_ap50_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["class", "name", "split", "ap50"])?;
        if let Some(ap) = &self.ap50 {
            for (c, v) in ap.per_class.iter().enumerate() {
                w.write_record([
                    c.to_string(),
                    self.per_class[c].name.clone(),
                    self.per_class[c].split.to_string(),
                    opt(*v),
                ])?;
            }
        }
        flush(w)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn flush<W: Write>(mut w: csv::Writer<W>) -> Result<()> {
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Row of an adapted-feature export.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedRow {
    pub id: u64,
    pub label: usize,
    pub feature: Vec<f64>,
}

/// One CSV row per sample, in dataset order: `id,label,f0..f{D-1}`.
/// Values use Rust's shortest round-trip float formatting.
pub fn export_adapted_features<W: Write>(dataset: &Dataset, bank: &AdapterBank, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..dataset.dim()).map(|d| format!("f{d}")));
    w.write_record(&header)?;
    for s in dataset.samples() {
        let beta = bank.adapt_region(&s.feature_f64(), &s.bbox)?;
        let mut rec = vec![s.id.to_string(), s.label.to_string()];
        rec.extend(beta.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    flush(w)
}

pub fn read_adapted_features<R: Read>(input: R) -> Result<Vec<AdaptedRow>> {
    let mut r = csv::Reader::from_reader(input);
    let bad = |what: &str| Error::Validation(format!("malformed adapted-feature row: bad {what}"));
    r.records()
        .map(|rec| {
            let rec = rec?;
            let id = rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(|| bad("id"))?;
            let label = rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| bad("label"))?;
            let feature = rec
                .iter()
                .skip(2)
                .map(|v| v.parse::<f64>().map_err(|_| bad("value")))
                .collect::<Result<Vec<_>>>()?;
            Ok(AdaptedRow { id, label, feature })
        })
        .collect()
}
