//! Relation distributions over a frozen bank and the KL relation loss.
//!
//! For target category `i`, the similarity vector holds the cosine between an
//! anchor and every member of `Z` except `z^i_e`, in canonical bank order. The
//! language anchor is `z^i_e`; the visual anchor is the object feature `o^i`.
//! Both sides share one code path so their entries line up exactly.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::bank::FrozenBank;
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub const DEFAULT_RELATION_TEMPERATURE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum RelationError {
    #[error("category {0} is not a detector target in this bank")]
    NotTarget(usize),
    #[error("category {0} appears more than once")]
    DuplicateCategory(usize),
    #[error("relation temperature must be > 0, got {0}")]
    Temperature(f64),
    #[error("no decoder layers supplied")]
    NoLayers,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = RelationError> = std::result::Result<T, E>;

/// Ordered similarity entries for one category.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityVector {
    pub category: usize,
    pub entries: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationDistribution {
    pub category: usize,
    pub probabilities: Vec<f64>,
}

/// Canonical bank indices that enter category `i`'s vector (all but `z^i_e`).
pub fn comparison_indices(bank: &FrozenBank, category: usize) -> Vec<usize> {
    let skip = bank.exemplar_index(category);
    (0..bank.len()).filter(|&k| k != skip).collect()
}

/// Row-normalised comparison set, transposed to `[E, |Z|-1]`.
fn comparison_matrix(bank: &FrozenBank, category: usize) -> Result<Tensor> {
    let idx = comparison_indices(bank, category);
    let rows: Vec<f64> = idx.iter().flat_map(|&k| bank.merged()[k].iter().copied()).collect();
    let m = Tensor::matrix(idx.len(), bank.dim(), rows)?;
    let mut g = Graph::new();
    let v = g.constant(m);
    let n = g.normalize_rows(v)?;
    let t = g.transpose(n)?;
    Ok(g.value(t).clone())
}

/// `[1, |Z|-1]` cosines between `anchor` (`[E]` or `[1, E]`) and the comparison set.
fn similarity_row(g: &mut Graph, anchor: Var, comparison: &Tensor) -> Result<Var> {
    let anchor = if g.shape(anchor).len() == 1 {
        let e = g.shape(anchor)[0];
        g.reshape(anchor, &[1, e])?
    } else {
        anchor
    };
    let u = g.normalize_rows(anchor)?;
    let c = g.constant(comparison.clone());
    let s = g.matmul(u, c)?;
    Ok(g.clamp(s, -1.0, 1.0))
}

fn check_target(bank: &FrozenBank, category: usize) -> Result<()> {
    if bank.is_target(category) {
        Ok(())
    } else {
        Err(RelationError::NotTarget(category))
    }
}

pub fn language_similarity_vector(bank: &FrozenBank, category: usize) -> Result<SimilarityVector> {
    check_target(bank, category)?;
    let mut g = Graph::new();
    let z = g.constant(Tensor::vector(bank.merged()[bank.exemplar_index(category)].clone())?);
    let s = similarity_row(&mut g, z, &comparison_matrix(bank, category)?)?;
    Ok(SimilarityVector { category, entries: g.value(s).data().to_vec() })
}

pub fn visual_similarity_vector(bank: &FrozenBank, category: usize, feature: &[f64]) -> Result<SimilarityVector> {
    check_target(bank, category)?;
    let mut g = Graph::new();
    let o = g.constant(Tensor::vector(feature.to_vec())?);
    let s = similarity_row(&mut g, o, &comparison_matrix(bank, category)?)?;
    Ok(SimilarityVector { category, entries: g.value(s).data().to_vec() })
}

pub fn to_distribution(s: &SimilarityVector, temperature: f64) -> Result<RelationDistribution> {
    if !(temperature > 0.0) {
        return Err(RelationError::Temperature(temperature));
    }
    let p = crate::tensor::softmax(&Tensor::vector(s.entries.clone())?, temperature)?;
    Ok(RelationDistribution { category: s.category, probabilities: p.into_data() })
}

#[derive(Debug, Clone)]
struct CategoryTarget {
    comparison: Tensor,
    distribution: Tensor,
}

/// Language-side distributions `R^i_l` for every target category, computed
/// once from a frozen bank.
#[derive(Debug, Clone)]
pub struct RelationTargets {
    bank: FrozenBank,
    temperature: f64,
    targets: Vec<Option<CategoryTarget>>,
}

impl RelationTargets {
    pub fn new(bank: &FrozenBank, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(RelationError::Temperature(temperature));
        }
        let mut targets = Vec::with_capacity(bank.num_categories());
        for i in 0..bank.num_categories() {
            if !bank.is_target(i) {
                targets.push(None);
                continue;
            }
            let s = language_similarity_vector(bank, i)?;
            let r = to_distribution(&s, temperature)?;
            targets.push(Some(CategoryTarget {
                comparison: comparison_matrix(bank, i)?,
                distribution: Tensor::matrix(1, r.probabilities.len(), r.probabilities)?,
            }));
        }
        Ok(Self { bank: bank.clone(), temperature, targets })
    }

    pub fn bank(&self) -> &FrozenBank {
        &self.bank
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Cached `R^i_l`.
    pub fn language_distribution(&self, category: usize) -> Result<&[f64]> {
        self.target(category).map(|t| t.distribution.data())
    }

    fn target(&self, category: usize) -> Result<&CategoryTarget> {
        self.targets.get(category).and_then(Option::as_ref).ok_or(RelationError::NotTarget(category))
    }

    /// `R^i_v` as a `[1, |Z|-1]` graph node.
    pub fn visual_distribution(&self, g: &mut Graph, category: usize, feature: Var) -> Result<Var> {
        let t = self.target(category)?;
        let s = similarity_row(g, feature, &t.comparison)?;
        Ok(g.softmax(s, self.temperature)?)
    }

    /// Mean over the given categories of `KL(R^i_l ‖ R^i_v)`.
    ///
    /// An empty list yields a constant zero and a warning.
    pub fn relation_loss(&self, g: &mut Graph, features: &[(usize, Var)]) -> Result<Var> {
        if features.is_empty() {
            log::warn!("relation loss over an empty category list; returning 0");
            return Ok(g.constant(Tensor::scalar(0.0)));
        }
        let mut seen = BTreeSet::new();
        let mut terms = Vec::with_capacity(features.len());
        for &(category, feature) in features {
            if !seen.insert(category) {
                return Err(RelationError::DuplicateCategory(category));
            }
            let q = self.visual_distribution(g, category, feature)?;
            let target = self.target(category)?.distribution.clone();
            terms.push(g.kl_divergence(&target, q)?);
        }
        let total = g.elementwise_sum(&terms)?;
        Ok(g.scale(total, 1.0 / terms.len() as f64))
    }

    /// Mean of [`Self::relation_loss`] over decoder layers.
    pub fn per_layer_relation_loss(&self, g: &mut Graph, layers: &[Vec<(usize, Var)>]) -> Result<Var> {
        if layers.is_empty() {
            return Err(RelationError::NoLayers);
        }
        let terms = layers.iter().map(|l| self.relation_loss(g, l)).collect::<Result<Vec<_>>>()?;
        let total = g.elementwise_sum(&terms)?;
        Ok(g.scale(total, 1.0 / terms.len() as f64))
    }
}
