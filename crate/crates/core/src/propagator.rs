//! Dense annotation by propagating key-frame ground truth onto detector boxes.
//!
//! Each regular frame's detections are matched one-to-one against the most
//! recent preceding key-frame's annotations, highest IoU first.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::clipstore::Annotation;
use crate::geometry::{iou, BBox};

#[derive(Debug, Error, PartialEq)]
pub enum PropagateError {
    #[error("frame {0} has no preceding key-frame")]
    NoKeyFrame(usize),
    #[error("detection frames not increasing: {0} after {1}")]
    NotMonotonic(usize, usize),
}

/// Unlabeled detector output for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDetections {
    pub frame_index: usize,
    pub boxes: Vec<BBox>,
}

/// Greedy one-to-one matching by descending IoU; pairs below `iou_min` never match.
/// Returns `(annotation index, detection index)` pairs.
pub fn greedy_match(anchors: &[BBox], detections: &[BBox], iou_min: f64) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (a, ab) in anchors.iter().enumerate() {
        for (d, db) in detections.iter().enumerate() {
            let v = iou(ab, db);
            if v >= iou_min && v > 0.0 {
                pairs.push((v, a, d));
            }
        }
    }
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut anchor_used = vec![false; anchors.len()];
    let mut det_used = vec![false; detections.len()];
    let mut out = Vec::new();
    for (_, a, d) in pairs {
        if !anchor_used[a] && !det_used[d] {
            anchor_used[a] = true;
            det_used[d] = true;
            out.push((a, d));
        }
    }
    out
}

pub fn propagate_annotations(
    keyframes: &BTreeMap<usize, Vec<Annotation>>,
    detections: &[FrameDetections],
    iou_min: f64,
) -> Result<BTreeMap<usize, Vec<Annotation>>, PropagateError> {
    let mut out = keyframes.clone();
    let mut last: Option<usize> = None;
    for det in detections {
        if let Some(prev) = last {
            if det.frame_index <= prev {
                return Err(PropagateError::NotMonotonic(det.frame_index, prev));
            }
        }
        last = Some(det.frame_index);
        if keyframes.contains_key(&det.frame_index) {
            continue;
        }
        let (_, anchors) = keyframes
            .range(..det.frame_index)
            .next_back()
            .ok_or(PropagateError::NoKeyFrame(det.frame_index))?;
        let anchor_boxes: Vec<BBox> = anchors.iter().map(|a| a.bbox).collect();
        let mut matched = greedy_match(&anchor_boxes, &det.boxes, iou_min);
        matched.sort_by_key(|&(_, d)| d);
        let labeled = matched
            .into_iter()
            .map(|(a, d)| Annotation { bbox: det.boxes[d], ..anchors[a] })
            .collect();
        out.insert(det.frame_index, labeled);
    }
    Ok(out)
}
