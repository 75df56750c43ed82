//! VOC-style average precision with per-image match records.

use serde::{Deserialize, Serialize};

use super::boxes::iou;
use crate::synth::GroundTruth;
use crate::tensor::{softmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: usize,
    /// Highest non-background softmax probability.
    pub score: f64,
    /// Normalised `[cx, cy, w, h]`.
    pub bbox: [f64; 4],
}

/// One detection per query from `[Q, N_C + 1]` logits and `[Q, 4]` boxes.
pub fn detections_from(logits: &Tensor, boxes: &Tensor, num_classes: usize) -> Vec<Detection> {
    let probs = softmax(logits, 1.0).expect("finite logits");
    (0..probs.rows())
        .map(|q| {
            let row = &probs.row(q)[..num_classes];
            let (class, &score) = row
                .iter()
                .enumerate()
                .fold((0, &row[0]), |best, (c, p)| if *p > *best.1 { (c, p) } else { best });
            Detection { class, score, bbox: boxes.row(q).try_into().expect("4 columns") }
        })
        .collect()
}

/// Match outcome of every detection in one image, grouped by class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// `matches[c]` holds `(score, true_positive)` in descending score order.
    pub matches: Vec<Vec<(f64, bool)>>,
    /// Ground-truth object count per class.
    pub num_gt: Vec<usize>,
}

/// Greedy confidence-ordered matching of one image's detections: each
/// detection takes the highest-IoU ground truth of its class, and is a true
/// positive when that IoU reaches `iou_threshold` and the object is still
/// unclaimed.
pub fn match_image(dets: &[Detection], gt: &GroundTruth, iou_threshold: f64, num_classes: usize) -> ImageRecord {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut claimed = vec![false; gt.len()];
    let mut matches = vec![Vec::new(); num_classes];
    for i in order {
        let d = &dets[i];
        if d.class >= num_classes {
            continue;
        }
        let best = (0..gt.len())
            .filter(|&j| gt.categories[j] == d.class)
            .map(|j| (j, iou(&d.bbox, &gt.boxes[j])))
            .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((j, v)),
            });
        let tp = match best {
            Some((j, v)) if v >= iou_threshold && !claimed[j] => {
                claimed[j] = true;
                true
            }
            _ => false,
        };
        matches[d.class].push((d.score, tp));
    }
    let mut num_gt = vec![0; num_classes];
    for &c in &gt.categories {
        if c < num_classes {
            num_gt[c] += 1;
        }
    }
    ImageRecord { matches, num_gt }
}

pub fn evaluate(
    predictions: &[Vec<Detection>],
    ground_truth: &[GroundTruth],
    iou_threshold: f64,
    num_classes: usize,
) -> Vec<ImageRecord> {
    predictions
        .iter()
        .zip(ground_truth)
        .map(|(d, g)| match_image(d, g, iou_threshold, num_classes))
        .collect()
}

/// Area under the monotone precision envelope over all recall points, for
/// one class pooled across `records`. `None` when the class has no ground truth.
pub fn average_precision<'a>(records: impl IntoIterator<Item = &'a ImageRecord>, class: usize) -> Option<f64> {
    let mut pooled = Vec::new();
    let mut num_gt = 0;
    for r in records {
        pooled.extend_from_slice(&r.matches[class]);
        num_gt += r.num_gt[class];
    }
    if num_gt == 0 {
        return None;
    }
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    for &(_, hit) in &pooled {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    Some((1..recall.len()).map(|i| (recall[i] - recall[i - 1]) * precision[i]).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// AP in `[0, 1]` per class; `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes with ground truth; `None` if there are none.
    pub mean: Option<f64>,
}

impl ApReport {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a ImageRecord> + Clone, num_classes: usize) -> Self {
        let per_class: Vec<Option<f64>> =
            (0..num_classes).map(|c| average_precision(records.clone(), c)).collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
        Self { per_class, mean }
    }

    /// Report over the images at `indices` only.
    pub fn subset(records: &[ImageRecord], indices: &[usize], num_classes: usize) -> Self {
        Self::from_records(indices.iter().map(|&i| &records[i]), num_classes)
    }
}
