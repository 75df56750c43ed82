//! Eager (tape-free) versions of the numeric primitives used by the losses.

use super::kernels;
use super::{Result, Tensor, TensorError};

/// Norms at or below this are treated as degenerate.
pub const NORM_EPS: f64 = 1e-12;
/// Floor applied to `q` inside `log` when evaluating KL divergence.
pub const KL_FLOOR: f64 = 1e-12;

pub fn softmax(x: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(TensorError::InvalidArgument {
            op: "softmax",
            reason: format!("temperature must be positive, got {temperature}"),
        });
    }
    if !x.is_finite() {
        return Err(TensorError::NonFinite { op: "softmax" });
    }
    Ok(Tensor::from_parts(
        x.shape().to_vec(),
        kernels::softmax_rows(x.data(), x.cols(), temperature),
    ))
}

pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "cosine_similarity",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    cosine_raw(a.data(), b.data()).ok_or(TensorError::ZeroNorm { op: "cosine_similarity" })
}

pub(crate) fn cosine_raw(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(na > NORM_EPS && nb > NORM_EPS) {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| (x / na) * (y / nb)).sum();
    Some(dot.clamp(-1.0, 1.0))
}

pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "kl_divergence",
            left: p.shape().to_vec(),
            right: q.shape().to_vec(),
        });
    }
    Ok(kl_raw(p.data(), q.data()))
}

pub(crate) fn kl_raw(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (p.ln() - q.max(KL_FLOOR).ln()))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let s = softmax(&v(&[0.0, 0.0, 0.0]), 1.0).unwrap();
        for &p in s.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let (c, d) = (17.25, 0.8);
        let a = softmax(&v(&[c, c + d]), 0.7).unwrap();
        let b = softmax(&v(&[0.0, d]), 0.7).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-15);
    }

    #[test]
    fn softmax_matches_direct_exponentiation() {
        // exp(k) / (e + e^2 + e^3), frozen from a direct evaluation
        let want = [0.090_030_573_170_380_46, 0.244_728_471_054_797_67, 0.665_240_955_774_821_9];
        let s = softmax(&v(&[1.0, 2.0, 3.0]), 1.0).unwrap();
        for (a, b) in s.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        assert!(softmax(&v(&[1.0]), 0.0).is_err());
    }

    #[test]
    fn cosine_cases() {
        let a = v(&[0.3, -1.2, 2.0]);
        let neg = a.map(|x| -x);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        assert!(matches!(
            cosine_similarity(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])),
            Err(TensorError::ZeroNorm { .. })
        ));
    }

    #[test]
    fn kl_cases() {
        let p = v(&[0.2, 0.5, 0.3]);
        assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-15);
        let ln2 = kl_divergence(&v(&[1.0, 0.0]), &v(&[0.5, 0.5])).unwrap();
        assert!((ln2 - std::f64::consts::LN_2).abs() < 1e-15);
        // 0.3 ln(0.3/0.6) + 0.7 ln(0.7/0.4)
        let want = 0.183_786_897_386_812_17;
        let got = kl_divergence(&v(&[0.3, 0.7]), &v(&[0.6, 0.4])).unwrap();
        assert!((got - want).abs() < 1e-14, "{got}");
        assert!(kl_divergence(&v(&[1.0]), &v(&[0.5, 0.5])).is_err());
    }
}
