//! Synthetic stand-in for a sentence embedder.
//!
//! Each category gets a unit centroid `normalize(u + sep * g_i)` where `u` is a
//! direction shared by all categories and `g_i` a category direction; the
//! exemplar is the centroid and each variant is
//! `normalize(centroid + spread / sqrt(E) * eps)`, `eps ~ N(0, I)`.
//!
//! For large `E` this gives, in expectation,
//!
//! * exemplar–variant cosine ≈ `1 / sqrt(1 + spread²)`
//! * variant–variant cosine (same category) ≈ `1 / (1 + spread²)`
//! * exemplar–exemplar cosine (different categories) ≈ `1 / (1 + sep²)`
//!
//! so every intra-class pair is expected to be closer than every inter-class
//! pair as long as `sep / spread > 1`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::descriptions::{DescriptionKind, InstanceDescription};
use super::{BankError, CategoryEmbeddings, LanguageEmbeddings};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticEmbedder {
    pub dim: usize,
    /// Intra-class spread (`σ_in`).
    pub intra_spread: f64,
    /// Inter-class separation (`μ_out`).
    pub inter_separation: f64,
    /// Use standard basis vectors as centroids (requires `dim >= categories`).
    pub orthogonal_centroids: bool,
    pub seed: u64,
}

impl Default for SyntheticEmbedder {
    fn default() -> Self {
        Self { dim: 64, intra_spread: 0.1, inter_separation: 1.0, orthogonal_centroids: false, seed: 0 }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

impl SyntheticEmbedder {
    pub fn embed(&self, descriptions: &[InstanceDescription]) -> Result<LanguageEmbeddings, BankError> {
        if self.dim < 8 {
            return Err(BankError::InvalidConfig(format!("embedding dim {} < 8", self.dim)));
        }
        if !(self.intra_spread >= 0.0 && self.intra_spread.is_finite()) {
            return Err(BankError::InvalidConfig("intra-class spread must be >= 0".into()));
        }
        if !(self.inter_separation > 0.0 && self.inter_separation.is_finite()) {
            return Err(BankError::InvalidConfig("inter-class separation must be > 0".into()));
        }
        let groups = group_by_category(descriptions)?;
        if self.orthogonal_centroids && groups.len() > self.dim {
            return Err(BankError::InvalidConfig(format!(
                "{} orthogonal centroids do not fit in {} dimensions",
                groups.len(),
                self.dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let shared = normalized(gaussian(&mut rng, self.dim));
        let noise_scale = self.intra_spread / (self.dim as f64).sqrt();
        let mut categories = Vec::with_capacity(groups.len());
        for (id, group) in groups.iter().enumerate() {
            let centroid = if self.orthogonal_centroids {
                let mut e = vec![0.0; self.dim];
                e[id] = 1.0;
                e
            } else {
                let dir = normalized(gaussian(&mut rng, self.dim));
                normalized(shared.iter().zip(&dir).map(|(u, g)| u + self.inter_separation * g).collect())
            };
            let mut variants = Vec::new();
            let mut attributes = Vec::new();
            for d in group.iter().filter(|d| d.kind == DescriptionKind::Variant) {
                let v = if self.intra_spread == 0.0 {
                    centroid.clone()
                } else {
                    let eps = gaussian(&mut rng, self.dim);
                    normalized(centroid.iter().zip(&eps).map(|(c, e)| c + noise_scale * e).collect())
                };
                variants.push(v);
                attributes.push(d.attributes.clone());
            }
            let first = group[0];
            categories.push(CategoryEmbeddings {
                name: first.category_name.clone(),
                target: first.target,
                exemplar: centroid,
                variants,
                variant_attributes: attributes,
            });
        }
        LanguageEmbeddings::new(self.dim, categories)
    }
}

/// Groups descriptions by category id; ids must be contiguous from 0 and each
/// category must have exactly one exemplar.
fn group_by_category(descriptions: &[InstanceDescription]) -> Result<Vec<Vec<&InstanceDescription>>, BankError> {
    let count = descriptions.iter().map(|d| d.category_id + 1).max().unwrap_or(0);
    let mut groups: Vec<Vec<&InstanceDescription>> = vec![Vec::new(); count];
    for d in descriptions {
        groups[d.category_id].push(d);
    }
    for (id, g) in groups.iter_mut().enumerate() {
        let exemplars = g.iter().filter(|d| d.kind == DescriptionKind::Exemplar).count();
        if exemplars != 1 {
            return Err(BankError::Schema {
                record: None,
                reason: format!("category {id} has {exemplars} exemplars, expected 1"),
            });
        }
        g.sort_by_key(|d| d.kind != DescriptionKind::Exemplar);
    }
    Ok(groups)
}
