//! Bipartite matching between queries and ground-truth objects.

use serde::{Deserialize, Serialize};

use super::boxes::{iou, l1};
use super::DetectorError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchWeights {
    pub class: f64,
    pub l1: f64,
    pub iou: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self { class: 1.0, l1: 5.0, iou: 2.0 }
    }
}

/// `(query, gt)` pairs, sorted by gt index.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn query_for_gt(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == gt).map(|p| p.0)
    }
}

/// `cost[gt][query]` for one image.
pub fn match_cost(
    probs: &[Vec<f64>],
    pred_boxes: &[[f64; 4]],
    gt_boxes: &[[f64; 4]],
    gt_classes: &[usize],
    w: MatchWeights,
) -> Vec<Vec<f64>> {
    gt_boxes
        .iter()
        .zip(gt_classes)
        .map(|(gb, &gc)| {
            probs
                .iter()
                .zip(pred_boxes)
                .map(|(p, pb)| w.class * -p[gc] + w.l1 * l1(pb, gb) + w.iou * (1.0 - iou(pb, gb)))
                .collect()
        })
        .collect()
}

/// Sum of `cost[gt][query]` over an assignment, accumulated in gt order.
pub fn assignment_cost(cost: &[Vec<f64>], a: &Assignment) -> f64 {
    let mut pairs = a.pairs.clone();
    pairs.sort_by_key(|p| p.1);
    pairs.iter().map(|&(q, t)| cost[t][q]).sum()
}

/// Minimum-cost assignment of every row (gt) to a distinct column (query)
/// via the Kuhn-Munkres algorithm with potentials, `O(rows² · cols)`.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment, DetectorError> {
    let n = cost.len();
    if n == 0 {
        return Ok(Assignment::default());
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) {
        return Err(DetectorError::Matching("ragged cost matrix".into()));
    }
    if n > m {
        return Err(DetectorError::Matching(format!("{n} ground-truth objects but only {m} queries")));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(DetectorError::Matching("non-finite matching cost".into()));
    }
    // 1-based arrays; column 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> =
        (1..=m).filter(|&j| owner[j] != 0).map(|j| (j - 1, owner[j] - 1)).collect();
    pairs.sort_by_key(|p| p.1);
    Ok(Assignment { pairs })
}
