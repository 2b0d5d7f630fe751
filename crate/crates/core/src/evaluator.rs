//! Per-class average precision, mAP and pseudo-label confusion matrices.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clipstore::DatasetIndex;
use crate::geometry::{iou, BBox};
use crate::model::{argmax, extract_features, ModelError, ModelParams};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("class {0} has no ground truth")]
    NoGroundTruth(usize),
    #[error("iou threshold {0} outside (0, 1]")]
    BadThreshold(f64),
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("label {0} outside 0..{1}")]
    LabelOutOfRange(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub sample_id: String,
    pub bbox: BBox,
    pub class_id: usize,
}

/// Non-interpolated AP: mean over ground truths of the precision at the rank
/// where each is first recalled. Predictions are ranked by descending score,
/// ties in input order; each matches the best-overlapping unmatched ground
/// truth of its class in the same sample.
pub fn average_precision(
    preds: &[Prediction],
    gts: &[GroundTruth],
    class_id: usize,
    iou_threshold: f64,
) -> Result<f64, EvalError> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(EvalError::BadThreshold(iou_threshold));
    }
    let mut by_sample: HashMap<&str, Vec<(BBox, bool)>> = HashMap::new();
    let mut num_gt = 0usize;
    for g in gts.iter().filter(|g| g.class_id == class_id) {
        by_sample.entry(g.sample_id.as_str()).or_default().push((g.bbox, false));
        num_gt += 1;
    }
    if num_gt == 0 {
        return Err(EvalError::NoGroundTruth(class_id));
    }

    let mut ranked: Vec<&Prediction> = preds.iter().filter(|p| p.class_id == class_id).collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));

    let (mut tp, mut sum_precision) = (0usize, 0.0);
    for (rank, p) in ranked.iter().enumerate() {
        let Some(cands) = by_sample.get_mut(p.sample_id.as_str()) else { continue };
        let best = cands
            .iter()
            .enumerate()
            .filter(|(_, (_, used))| !used)
            .map(|(i, (b, _))| (i, iou(&p.bbox, b)))
            .fold(None, |best: Option<(usize, f64)>, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            });
        if let Some((i, overlap)) = best {
            if overlap >= iou_threshold {
                cands[i].1 = true;
                tp += 1;
                sum_precision += tp as f64 / (rank + 1) as f64;
            }
        }
    }
    Ok(sum_precision / num_gt as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// AP for every class with at least one ground truth.
    pub per_class_ap: BTreeMap<usize, f64>,
    pub map: f64,
    pub support: Vec<usize>,
}

pub fn mean_ap(
    preds: &[Prediction],
    gts: &[GroundTruth],
    num_classes: usize,
    iou_threshold: f64,
) -> Result<EvalResult, EvalError> {
    let mut support = vec![0; num_classes];
    for g in gts {
        if g.class_id >= num_classes {
            return Err(EvalError::LabelOutOfRange(g.class_id, num_classes));
        }
        support[g.class_id] += 1;
    }
    let results: Vec<(usize, Result<f64, EvalError>)> = (0..num_classes)
        .into_par_iter()
        .map(|k| (k, average_precision(preds, gts, k, iou_threshold)))
        .collect();
    let mut per_class_ap = BTreeMap::new();
    for (k, r) in results {
        match r {
            Ok(ap) => {
                per_class_ap.insert(k, ap);
            }
            Err(EvalError::NoGroundTruth(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let map = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64
    };
    Ok(EvalResult { per_class_ap, map, support })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[i][j]`: instances of true class `i` labeled `j`.
    pub counts: Vec<Vec<usize>>,
    /// Rows divided by their sums; empty rows stay zero.
    pub normalized: Vec<Vec<f64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.trace() as f64 / n as f64,
        }
    }
}

pub fn confusion_matrix(pseudo: &[usize], truth: &[usize], num_classes: usize) -> Result<ConfusionMatrix, EvalError> {
    if pseudo.len() != truth.len() {
        return Err(EvalError::LengthMismatch(pseudo.len(), truth.len()));
    }
    let mut counts = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &t) in pseudo.iter().zip(truth) {
        if p >= num_classes || t >= num_classes {
            return Err(EvalError::LabelOutOfRange(p.max(t), num_classes));
        }
        counts[t][p] += 1;
    }
    let normalized = counts
        .iter()
        .map(|row| {
            let s: usize = row.iter().sum();
            row.iter().map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 }).collect()
        })
        .collect();
    Ok(ConfusionMatrix { counts, normalized })
}

/// Score every ground-truth box of `ds` with the model's class probabilities.
pub fn score_dataset(params: &ModelParams, ds: &DatasetIndex) -> Result<(Vec<Prediction>, Vec<GroundTruth>), EvalError> {
    params.check_finite()?;
    type Scored = Vec<(Vec<f64>, GroundTruth)>;
    let per_sample: Vec<Result<Scored, EvalError>> = ds
        .samples()
        .par_iter()
        .map(|s| {
            s.annotations
                .iter()
                .map(|a| {
                    let f = extract_features(&s.clip, &a.bbox, params.shape.grid)?;
                    let probs = params.forward(&f)?;
                    Ok((probs, GroundTruth { sample_id: s.sample_id.clone(), bbox: a.bbox, class_id: a.class_id }))
                })
                .collect()
        })
        .collect();
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for sample in per_sample {
        for (probs, gt) in sample? {
            preds.extend(probs.iter().enumerate().map(|(k, &score)| Prediction {
                sample_id: gt.sample_id.clone(),
                bbox: gt.bbox,
                class_id: k,
                score,
            }));
            gts.push(gt);
        }
    }
    Ok((preds, gts))
}

/// Full evaluation report for one model on one labeled dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub result: EvalResult,
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
}

pub fn evaluate_model(params: &ModelParams, ds: &DatasetIndex, iou_threshold: f64) -> Result<EvalReport, EvalError> {
    let (preds, gts) = score_dataset(params, ds)?;
    let result = mean_ap(&preds, &gts, ds.num_classes(), iou_threshold)?;
    let k = ds.num_classes();
    let predicted: Vec<usize> = preds
        .chunks(k)
        .map(|c| argmax(&c.iter().map(|p| p.score).collect::<Vec<_>>()).0)
        .collect();
    let truth: Vec<usize> = gts.iter().map(|g| g.class_id).collect();
    let confusion = confusion_matrix(&predicted, &truth, k)?;
    let accuracy = confusion.accuracy();
    Ok(EvalReport { result, confusion, accuracy })
}
