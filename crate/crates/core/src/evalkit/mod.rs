//! Evaluation: top-k accuracy, trained-head and nearest-centroid scoring,
//! attribute-level confusion, feature cohesion, sweeps and feature export.

mod pca;
mod sweep;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use pca::{pca_2d, Pca};
pub use sweep::{
    lambda_sweep, resolution_sweep, run_cell, ExperimentData, ImprovementRow, ResolutionSweep, RunSummary,
    SweepAxis, SweepPoint, SweepResult, Variant,
};

use crate::datapipe::{load_split, ClassAttributeMap, DatasetManifest, NormStats, Split, SplitData};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, ParameterSet};

/// Rank of `labels[i]` among row `i`'s scores: the number of classes scored
/// higher, plus equal-scored classes with a lower index.
fn rank_of(row: &[f64], label: usize) -> usize {
    let target = row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, &s)| s > target || (s == target && j < label))
        .count()
}

/// Percentage of rows whose label is among the `k` highest scores. Ties go
/// to the lower class index.
pub fn top_k_accuracy(scores: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let (n, c) = match *scores.shape() {
        [n, c] => (n, c),
        _ => return Err(Error::InvalidArgument(format!("scores must be 2-D, got {:?}", scores.shape()))),
    };
    if k == 0 || k > c {
        return Err(Error::InvalidArgument(format!("k={k} outside 1..={c}")));
    }
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "top_k_accuracy",
            left: vec![n],
            right: vec![labels.len()],
        });
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no samples to score".to_string()));
    }
    let mut hits = 0usize;
    for (row, &y) in scores.data().chunks(c).zip(labels) {
        if y >= c {
            return Err(Error::LabelOutOfRange { label: y, classes: c });
        }
        if rank_of(row, y) < k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / n as f64)
}

/// Two-decimal percentage, e.g. `53.24`.
pub fn format_percent(p: f64) -> String {
    format!("{p:.2}")
}

/// Predicted class per row (lowest index among ties).
pub fn argmax_rows(scores: &Tensor) -> Vec<usize> {
    let c = scores.shape().last().copied().unwrap_or(1).max(1);
    scores
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of misclassified samples whose prediction falls in a different
/// attribute group than the true class. Zero when there are no errors.
pub fn attribute_confusion_rate(predictions: &[usize], labels: &[usize], attributes: &ClassAttributeMap) -> Result<f64> {
    let mut errors = 0usize;
    let mut crossing = 0usize;
    for (&p, &y) in predictions.iter().zip(labels) {
        if p != y {
            errors += 1;
            if attributes.attribute_of(p)? != attributes.attribute_of(y)? {
                crossing += 1;
            }
        }
    }
    Ok(if errors == 0 { 0.0 } else { crossing as f64 / errors as f64 })
}

/// Mean pairwise distance within attribute groups over mean pairwise distance
/// across groups.
pub fn cohesion_ratio(features: &Tensor, groups: &[usize]) -> Result<f64> {
    let (n, d) = match *features.shape() {
        [n, d] if n == groups.len() => (n, d),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "cohesion_ratio",
                left: vec![groups.len()],
                right: features.shape().to_vec(),
            })
        }
    };
    let rows: Vec<&[f64]> = features.data().chunks(d.max(1)).collect();
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            let dist = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if groups[i] == groups[j] {
                intra += dist;
                n_intra += 1;
            } else {
                inter += dist;
                n_inter += 1;
            }
        }
    }
    if n_intra == 0 || n_inter == 0 {
        return Err(Error::InvalidArgument(
            "cohesion needs two groups with at least one pair inside a group".to_string(),
        ));
    }
    let inter = inter / n_inter as f64;
    if inter == 0.0 {
        return Err(Error::InvalidArgument("all features coincide across groups".to_string()));
    }
    Ok(intra / n_intra as f64 / inter)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    #[default]
    TrainedHead,
    EuclideanCentroid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top_k: BTreeMap<usize, f64>,
    pub per_class: BTreeMap<usize, f64>,
    pub attribute_confusion_rate: f64,
    pub cohesion_ratio: f64,
    pub n_test: usize,
}

/// Eval-mode features and logits of every sample, in order.
pub fn infer_split(model: &Model, params: &ParameterSet, data: &SplitData, chunk: usize) -> Result<(Tensor, Tensor)> {
    if data.is_empty() {
        return Err(Error::Dataset("split is empty".to_string()));
    }
    let mut feats = Vec::new();
    let mut logits = Vec::new();
    for batch in data.chunks(chunk) {
        let (f, l) = model.infer(params, &batch)?;
        feats.push(f);
        logits.push(l);
    }
    Ok((Tensor::concat_rows(&feats)?, Tensor::concat_rows(&logits)?))
}

/// Negated distances from each row of `features` to each class centroid.
pub fn centroid_scores(features: &Tensor, centroids: &[Vec<f64>]) -> Result<Tensor> {
    let d = features.shape()[1];
    let n = features.shape()[0];
    let mut data = Vec::with_capacity(n * centroids.len());
    for row in features.data().chunks(d) {
        for c in centroids {
            let dist = row.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            data.push(-dist);
        }
    }
    Tensor::new(vec![n, centroids.len()], data)
}

/// Per-class mean feature over `gallery`.
pub fn class_centroids(features: &Tensor, classes: &[usize], num_classes: usize) -> Result<Vec<Vec<f64>>> {
    let d = features.shape()[1];
    let mut sums = vec![vec![0.0; d]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (row, &c) in features.data().chunks(d).zip(classes) {
        if c >= num_classes {
            return Err(Error::LabelOutOfRange { label: c, classes: num_classes });
        }
        for (s, v) in sums[c].iter_mut().zip(row) {
            *s += v;
        }
        counts[c] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Dataset(format!("class {c} has no samples in the centroid gallery")));
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect())
}

/// Build a report from per-sample scores and features. Attributes of both
/// true and predicted classes come from `attributes`.
pub fn build_report(scores: &Tensor, features: &Tensor, classes: &[usize], attributes: &ClassAttributeMap) -> Result<EvalReport> {
    let c = scores.shape()[1];
    let mut top_k = BTreeMap::new();
    for k in [1, 3, 5] {
        if k <= c {
            top_k.insert(k, top_k_accuracy(scores, classes, k)?);
        }
    }
    let predictions = argmax_rows(scores);
    let mut per_class = BTreeMap::new();
    for class in classes.iter().copied().collect::<std::collections::BTreeSet<_>>() {
        let (hit, total) = predictions
            .iter()
            .zip(classes)
            .filter(|(_, &y)| y == class)
            .fold((0usize, 0usize), |(h, t), (&p, &y)| (h + (p == y) as usize, t + 1));
        per_class.insert(class, 100.0 * hit as f64 / total as f64);
    }
    let groups: Vec<usize> = classes.iter().map(|&y| attributes.attribute_of(y)).collect::<Result<_>>()?;
    Ok(EvalReport {
        top_k,
        per_class,
        attribute_confusion_rate: attribute_confusion_rate(&predictions, classes, attributes)?,
        cohesion_ratio: cohesion_ratio(features, &groups)?,
        n_test: classes.len(),
    })
}

/// Evaluate on in-memory data. `gallery` supplies centroids in
/// `EuclideanCentroid` mode and is ignored otherwise.
pub fn evaluate_loaded(
    model: &Model,
    params: &ParameterSet,
    test: &SplitData,
    gallery: Option<&SplitData>,
    attributes: &ClassAttributeMap,
    mode: EvalMode,
    chunk: usize,
) -> Result<EvalReport> {
    let (features, logits) = infer_split(model, params, test, chunk)?;
    let scores = match mode {
        EvalMode::TrainedHead => logits,
        EvalMode::EuclideanCentroid => {
            let gallery = gallery.ok_or_else(|| Error::InvalidArgument("centroid mode needs a gallery split".to_string()))?;
            let (gf, _) = infer_split(model, params, gallery, chunk)?;
            let centroids = class_centroids(&gf, gallery.classes(), model.config().num_classes)?;
            centroid_scores(&features, &centroids)?
        }
    };
    build_report(&scores, &features, test.classes(), attributes)
}

/// Class → attribute map taken from the training records only.
pub fn training_attributes(manifest: &DatasetManifest) -> Result<ClassAttributeMap> {
    let train = DatasetManifest::new(
        manifest.root(),
        manifest.split(Split::Train).cloned().collect(),
    )?;
    train.class_attributes()
}

/// Evaluate a split of a manifest on disk. Attribute ids on the evaluated
/// records are never consulted.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &Model,
    params: &ParameterSet,
    manifest: &DatasetManifest,
    norm: &NormStats,
    split: Split,
    resolution: usize,
    mode: EvalMode,
    workers: usize,
) -> Result<EvalReport> {
    let attributes = training_attributes(manifest)?;
    let test = load_split(manifest, split, resolution, norm, workers)?;
    let gallery = match mode {
        EvalMode::EuclideanCentroid => Some(load_split(manifest, Split::Train, resolution, norm, workers)?),
        EvalMode::TrainedHead => None,
    };
    evaluate_loaded(model, params, &test, gallery.as_ref(), &attributes, mode, 200)
}

/// Write `features.csv` (feature columns, class_id, attribute_id) and
/// `pca.csv` (x, y, class_id, attribute_id) into `out`.
pub fn export_features(
    model: &Model,
    params: &ParameterSet,
    manifest: &DatasetManifest,
    norm: &NormStats,
    split: Split,
    resolution: usize,
    out: &Path,
) -> Result<Pca> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let attributes = training_attributes(manifest)?;
    let data = load_split(manifest, split, resolution, norm, 1)?;
    let (features, _) = infer_split(model, params, &data, 200)?;
    let d = features.shape()[1];
    let attr_cell = |c: usize| attributes.get(c).map(|a| a.to_string()).unwrap_or_default();

    let path = out.join("features.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    let mut header: Vec<String> = (0..d).map(|i| format!("feature_{i}")).collect();
    header.push("class_id".into());
    header.push("attribute_id".into());
    w.write_record(&header).map_err(|e| csv_err(&path, e))?;
    for (row, &c) in features.data().chunks(d).zip(data.classes()) {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        rec.push(c.to_string());
        rec.push(attr_cell(c));
        w.write_record(&rec).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let pca = pca_2d(&features)?;
    let path = out.join("pca.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["x", "y", "class_id", "attribute_id"]).map_err(|e| csv_err(&path, e))?;
    for (xy, &c) in pca.projected.chunks(2).zip(data.classes()) {
        w.write_record([format!("{:e}", xy[0]), format!("{:e}", xy[1]), c.to_string(), attr_cell(c)])
            .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(pca)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Dataset(format!("{}: {e}", path.display()))
}
