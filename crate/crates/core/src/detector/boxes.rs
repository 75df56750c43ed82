//! Box arithmetic on normalised `(cx, cy, w, h)` boxes.

use crate::tensor::{Graph, Result, Tensor, Var};

pub fn to_corners(b: &[f64; 4]) -> [f64; 4] {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0]
}

pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let (a, b) = (to_corners(a), to_corners(b));
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

pub fn l1(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Row-wise IoU between predicted boxes `[K, 4]` and constant targets, as `[K, 1]`.
pub fn iou_rows(g: &mut Graph, pred: Var, target: &[[f64; 4]]) -> Result<Var> {
    let k = target.len();
    let column = |f: &dyn Fn(&[f64; 4]) -> f64| Tensor::matrix(k, 1, target.iter().map(f).collect());
    let tx0 = g.constant(column(&|b| to_corners(b)[0])?);
    let ty0 = g.constant(column(&|b| to_corners(b)[1])?);
    let tx1 = g.constant(column(&|b| to_corners(b)[2])?);
    let ty1 = g.constant(column(&|b| to_corners(b)[3])?);
    let t_area = g.constant(column(&|b| b[2] * b[3])?);
    let cx = g.slice(pred, 1, 0, 1)?;
    let cy = g.slice(pred, 1, 1, 1)?;
    let w = g.slice(pred, 1, 2, 1)?;
    let h = g.slice(pred, 1, 3, 1)?;
    let hw = g.scale(w, 0.5);
    let hh = g.scale(h, 0.5);
    let px0 = g.sub(cx, hw)?;
    let px1 = g.add(cx, hw)?;
    let py0 = g.sub(cy, hh)?;
    let py1 = g.add(cy, hh)?;
    let right = g.minimum(px1, tx1)?;
    let left = g.maximum(px0, tx0)?;
    let bottom = g.minimum(py1, ty1)?;
    let top = g.maximum(py0, ty0)?;
    let iw = g.sub(right, left)?;
    let iw = g.relu(iw);
    let ih = g.sub(bottom, top)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;
    let p_area = g.mul(w, h)?;
    let areas = g.add(p_area, t_area)?;
    let union = g.sub(areas, inter)?;
    g.div(inter, union)
}
