//! Cluster-geometry statistics over a labelled set of vectors.

use crate::tensor::cosine_raw;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineStats {
    /// Mean cosine over unordered same-label pairs.
    pub intra: f64,
    /// Mean cosine over unordered different-label pairs.
    pub inter: f64,
}

impl CosineStats {
    pub fn margin(&self) -> f64 {
        self.intra - self.inter
    }
}

/// Zero-norm vectors contribute a cosine of 0.
pub fn cosine_stats(vectors: &[Vec<f64>], labels: &[usize]) -> CosineStats {
    let (mut intra, mut ni, mut inter, mut no) = (0.0, 0usize, 0.0, 0usize);
    for a in 0..vectors.len() {
        for b in a + 1..vectors.len() {
            let c = cosine_raw(&vectors[a], &vectors[b]).unwrap_or(0.0);
            if labels[a] == labels[b] {
                intra += c;
                ni += 1;
            } else {
                inter += c;
                no += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
    CosineStats { intra: mean(intra, ni), inter: mean(inter, no) }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Euclidean,
    /// `1 - cos`.
    Cosine,
}

pub fn distance(a: &[f64], b: &[f64], metric: Metric) -> f64 {
    match metric {
        Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        Metric::Cosine => 1.0 - cosine_raw(a, b).unwrap_or(0.0),
    }
}

/// Mean silhouette coefficient. Points in singleton clusters score 0.
/// Returns NaN with fewer than two clusters.
pub fn silhouette(vectors: &[Vec<f64>], labels: &[usize], metric: Metric) -> f64 {
    let n = vectors.len();
    let clusters = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; clusters];
    labels.iter().for_each(|&l| sizes[l] += 1);
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return f64::NAN;
    }
    let mut total = 0.0;
    for i in 0..n {
        if sizes[labels[i]] <= 1 {
            continue;
        }
        let mut sums = vec![0.0; clusters];
        for j in 0..n {
            if i != j {
                sums[labels[j]] += distance(&vectors[i], &vectors[j], metric);
            }
        }
        let a = sums[labels[i]] / (sizes[labels[i]] - 1) as f64;
        let b = (0..clusters)
            .filter(|&c| c != labels[i] && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silhouette_of_tight_separated_clusters_is_one() {
        let v = vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![5.0, 0.0], vec![5.0, 0.0]];
        assert_eq!(silhouette(&v, &[0, 0, 1, 1], Metric::Euclidean), 1.0);
    }

    #[test]
    fn silhouette_hand_example() {
        // points 0,1 | 3 on a line
        let v = vec![vec![0.0], vec![1.0], vec![3.0]];
        let s = silhouette(&v, &[0, 0, 1], Metric::Euclidean);
        // s0: a=1, b=3 -> 2/3; s1: a=1, b=2 -> 1/2; s2 singleton -> 0
        assert!((s - (2.0 / 3.0 + 0.5) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_stats_simple() {
        let v = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let s = cosine_stats(&v, &[0, 0, 1]);
        assert_eq!(s.intra, 1.0);
        assert_eq!(s.inter, 0.0);
        assert_eq!(s.margin(), 1.0);
    }
}
