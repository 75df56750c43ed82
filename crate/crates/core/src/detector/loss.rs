//! Matching, detection losses, object features and the total objective.

use serde::{Deserialize, Serialize};

use super::boxes::iou_rows;
use super::matcher::{hungarian, match_cost, Assignment, MatchWeights};
use super::{DetectionOutput, DetectorError, Result, RELATION_PROJECTION};
use crate::nn::layers::linear;
use crate::nn::Bindings;
use crate::synth::GroundTruth;
use crate::tensor::{softmax, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub matching: MatchWeights,
    /// Cross-entropy weight of queries assigned to no object.
    pub no_object_weight: f64,
    /// Weight of the scene-guidance term.
    pub guidance: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { matching: MatchWeights::default(), no_object_weight: 0.1, guidance: 1.0 }
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn box_rows(t: &Tensor) -> Vec<[f64; 4]> {
    (0..t.rows()).map(|r| t.row(r).try_into().expect("4 columns")).collect()
}

/// Per-layer Hungarian assignment for one image.
pub fn match_layers(g: &Graph, out: &DetectionOutput, gt: &GroundTruth, w: MatchWeights) -> Result<Vec<Assignment>> {
    (0..out.layers())
        .map(|l| {
            let logits = g.value(out.logits[l]);
            let probs = rows(logits)
                .into_iter()
                .map(|r| Ok(softmax(&Tensor::vector(r)?, 1.0)?.into_data()))
                .collect::<Result<Vec<_>>>()?;
            let cost = match_cost(&probs, &box_rows(g.value(out.boxes[l])), &gt.boxes, &gt.categories, w);
            hungarian(&cost)
        })
        .collect()
}

/// `(L_cls, L_bbox)` for one image, each averaged over decoder layers.
///
/// Per layer, `L_cls` is the weighted mean cross-entropy over all queries
/// (unmatched queries target the no-object class) and `L_bbox` is
/// `λ_L1 · mean_k ‖b_k − g_k‖₁ + λ_iou · mean_k (1 − IoU_k)` over matched pairs.
pub fn detection_loss(
    g: &mut Graph,
    out: &DetectionOutput,
    gt: &GroundTruth,
    assignments: &[Assignment],
    weights: &LossWeights,
) -> Result<(Var, Var)> {
    if assignments.len() != out.layers() {
        return Err(DetectorError::Matching(format!(
            "{} assignments for {} layers",
            assignments.len(),
            out.layers()
        )));
    }
    let q = g.shape(out.logits[0])[0];
    let no_object = g.shape(out.logits[0])[1] - 1;
    let mut cls_terms = Vec::new();
    let mut box_terms = Vec::new();
    for (l, a) in assignments.iter().enumerate() {
        let mut targets = vec![no_object; q];
        let mut w = vec![weights.no_object_weight; q];
        for &(query, obj) in &a.pairs {
            targets[query] = gt.categories[obj];
            w[query] = 1.0;
        }
        cls_terms.push(g.cross_entropy(out.logits[l], &targets, Some(&w))?);
        if a.pairs.is_empty() {
            box_terms.push(g.constant(Tensor::scalar(0.0)));
            continue;
        }
        let queries: Vec<usize> = a.pairs.iter().map(|p| p.0).collect();
        let targets: Vec<[f64; 4]> = a.pairs.iter().map(|p| gt.boxes[p.1]).collect();
        let k = queries.len() as f64;
        let pred = g.gather_rows(out.boxes[l], &queries)?;
        let tgt = g.constant(Tensor::matrix(queries.len(), 4, targets.concat())?);
        let diff = g.sub(pred, tgt)?;
        let diff = g.abs(diff);
        let l1 = g.sum(diff);
        let l1 = g.scale(l1, weights.matching.l1 / k);
        let iou = iou_rows(g, pred, &targets)?;
        let miss = g.scale(iou, -1.0);
        let miss = g.add_scalar(miss, 1.0);
        let miss = g.mean(miss);
        let miss = g.scale(miss, weights.matching.iou);
        box_terms.push(g.add(l1, miss)?);
    }
    let layers = assignments.len() as f64;
    let cls = g.elementwise_sum(&cls_terms)?;
    let bbox = g.elementwise_sum(&box_terms)?;
    Ok((g.scale(cls, 1.0 / layers), g.scale(bbox, 1.0 / layers)))
}

/// `(L_cls, L_bbox)` of the encoder proposals, matched on their own.
/// Zero when the output carries no proposals.
pub fn proposal_loss(
    g: &mut Graph,
    out: &DetectionOutput,
    gt: &GroundTruth,
    weights: &LossWeights,
) -> Result<(Var, Var)> {
    let Some((logits, boxes)) = out.proposals else {
        let zero = g.constant(Tensor::scalar(0.0));
        return Ok((zero, zero));
    };
    let single = DetectionOutput { features: Vec::new(), logits: vec![logits], boxes: vec![boxes], proposals: None };
    let a = match_layers(g, &single, gt, weights.matching)?;
    detection_loss(g, &single, gt, &a, weights)
}

/// One decoder layer's object features across a batch: for every category
/// with at least one ground-truth object, the mean of the matched query
/// features projected to the bank dimension, as `[1, E]`. Sorted by category.
pub fn extract_object_features(
    g: &mut Graph,
    p: &mut Bindings,
    batch: &[(Var, &Assignment, &GroundTruth)],
    num_classes: usize,
) -> Result<Vec<(usize, Var)>> {
    let mut out = Vec::new();
    for category in 0..num_classes {
        let mut parts = Vec::new();
        let mut present = false;
        for &(features, assignment, gt) in batch {
            let queries: Vec<usize> = gt
                .categories
                .iter()
                .enumerate()
                .filter(|(_, &c)| c == category)
                .map(|(obj, _)| {
                    present = true;
                    assignment.query_for_gt(obj).ok_or(DetectorError::MissingObjectFeature(category))
                })
                .collect::<Result<_>>()?;
            if !queries.is_empty() {
                parts.push(g.gather_rows(features, &queries)?);
            }
        }
        if !present {
            continue;
        }
        let stacked = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0)? };
        let mean = g.mean_rows(stacked)?;
        let dim = g.shape(mean)[0];
        let mean = g.reshape(mean, &[1, dim])?;
        out.push((category, linear(g, p, RELATION_PROJECTION, mean)?));
    }
    Ok(out)
}

/// `L_cls + L_bbox + L_R + λ_g · L_guidance`; absent terms contribute nothing.
pub fn total_loss(
    g: &mut Graph,
    cls: Var,
    bbox: Var,
    relation: Option<Var>,
    guidance: Option<Var>,
    guidance_weight: f64,
) -> Result<Var> {
    let mut terms = vec![cls, bbox];
    terms.extend(relation);
    if let Some(gl) = guidance {
        terms.push(g.scale(gl, guidance_weight));
    }
    Ok(g.elementwise_sum(&terms)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reasoner::{Altitude, SceneAttributes, View, Weather};

    fn attrs() -> SceneAttributes {
        SceneAttributes { weather: Weather::Clean, view: View::Side, altitude: Altitude::Low }
    }

    fn output(g: &mut Graph, logits: Vec<f64>, boxes: Vec<f64>, q: usize) -> DetectionOutput {
        let l = g.param(Tensor::matrix(q, 4, logits).unwrap());
        let b = g.param(Tensor::matrix(q, 4, boxes).unwrap());
        let f = g.param(Tensor::matrix(q, 2, vec![0.5; 2 * q]).unwrap());
        DetectionOutput { features: vec![f], logits: vec![l], boxes: vec![b], proposals: None }
    }

    #[test]
    fn perfect_predictions() {
        let gt = GroundTruth { boxes: vec![[0.3, 0.3, 0.2, 0.1]], categories: vec![2], attributes: attrs() };
        let mut g = Graph::new();
        let out = output(
            &mut g,
            vec![0.0, 0.0, 20.0, 0.0, 0.0, 0.0, 0.0, 20.0],
            vec![0.3, 0.3, 0.2, 0.1, 0.7, 0.7, 0.1, 0.1],
            2,
        );
        let a = match_layers(&g, &out, &gt, MatchWeights::default()).unwrap();
        assert_eq!(a[0].pairs, vec![(0, 0)]);
        let (cls, bbox) = detection_loss(&mut g, &out, &gt, &a, &LossWeights::default()).unwrap();
        assert!(g.value(bbox).item().abs() < 1e-12);
        assert!(g.value(cls).item() < 0.01);
    }

    #[test]
    fn empty_scene() {
        let gt = GroundTruth { boxes: vec![], categories: vec![], attributes: attrs() };
        let mut g = Graph::new();
        let logits = vec![1.0, 0.5, -0.3, 0.2, 0.0, 0.1, 0.4, -1.0];
        let out = output(&mut g, logits.clone(), vec![0.5; 8], 2);
        let a = match_layers(&g, &out, &gt, MatchWeights::default()).unwrap();
        let (cls, bbox) = detection_loss(&mut g, &out, &gt, &a, &LossWeights::default()).unwrap();
        assert_eq!(g.value(bbox).item(), 0.0);
        let ce = |row: &[f64]| {
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            lse - row[3]
        };
        let want = (ce(&logits[0..4]) + ce(&logits[4..8])) / 2.0;
        assert!((g.value(cls).item() - want).abs() < 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(1.0));
        let b = g.constant(Tensor::scalar(2.0));
        let r = g.constant(Tensor::scalar(0.5));
        let gl = g.constant(Tensor::scalar(7.0));
        let t = total_loss(&mut g, c, b, Some(r), Some(gl), 0.0).unwrap();
        assert_eq!(g.value(t).item(), 3.5);
        let t = total_loss(&mut g, c, b, None, None, 1.0).unwrap();
        assert_eq!(g.value(t).item(), 3.0);
    }
}
