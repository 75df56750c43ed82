//! Language representation bank.
//!
//! `D` ([`LanguageEmbeddings`]) holds one exemplar and `N` variant embeddings
//! per category. `C` ([`CategoricalPrompts`]) holds one learnable vector per
//! category. The merged set `Z` adds each category's prompt to every one of
//! its embeddings. Members of `Z` are laid out in canonical order: category
//! major, and within a category the exemplar first followed by the variants.
//!
//! A bank is trained, then frozen into a [`FrozenBank`], which is the only form
//! the relation loss accepts.

pub mod analysis;
mod descriptions;
mod embed;
mod file;
mod prompts;

use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use descriptions::{
    curate_descriptions, detection_categories, exemplar_text, extended_categories, variant_text, AttributeGrids,
    CategorySpec, DescriptionKind, InstanceDescription, VariantAttributes, DISTRACTORS,
};
pub use embed::SyntheticEmbedder;
pub use file::{load_embeddings, load_frozen, BANK_SCHEMA};
pub use prompts::{contrastive_loss, train_categorical_prompts, PromptTrainingConfig, PromptTrainingOutcome};

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("invalid bank configuration: {0}")]
    InvalidConfig(String),
    #[error("requested {requested} variants but the attribute grid has only {available} combinations")]
    TooManyVariants { requested: usize, available: usize },
    #[error("bank schema violation{}: {reason}", record.map(|r| format!(" at record {r}")).unwrap_or_default())]
    Schema { record: Option<usize>, reason: String },
    #[error("bank is not frozen")]
    NotFrozen,
    #[error("prompt training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryEmbeddings {
    pub name: String,
    pub target: bool,
    pub exemplar: Vec<f64>,
    pub variants: Vec<Vec<f64>>,
    pub variant_attributes: Vec<Option<VariantAttributes>>,
}

/// The teacher embedding set `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageEmbeddings {
    dim: usize,
    categories: Vec<CategoryEmbeddings>,
}

impl LanguageEmbeddings {
    pub fn new(dim: usize, categories: Vec<CategoryEmbeddings>) -> Result<Self, BankError> {
        if categories.is_empty() {
            return Err(BankError::InvalidConfig("no categories".into()));
        }
        let n = categories[0].variants.len();
        for (id, c) in categories.iter().enumerate() {
            if c.variants.len() != n {
                return Err(BankError::Schema {
                    record: None,
                    reason: format!("category {id} has {} variants, expected {n}", c.variants.len()),
                });
            }
            if c.variant_attributes.len() != c.variants.len() {
                return Err(BankError::Schema { record: None, reason: format!("category {id}: attribute count mismatch") });
            }
            for v in std::iter::once(&c.exemplar).chain(&c.variants) {
                if v.len() != dim {
                    return Err(BankError::Schema {
                        record: None,
                        reason: format!("category {id}: vector of length {} in a {dim}-d bank", v.len()),
                    });
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(BankError::Schema { record: None, reason: format!("category {id}: non-finite value") });
                }
            }
        }
        Ok(Self { dim, categories })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn categories(&self) -> &[CategoryEmbeddings] {
        &self.categories
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn variants_per_category(&self) -> usize {
        self.categories[0].variants.len()
    }

    pub fn members_per_category(&self) -> usize {
        self.variants_per_category() + 1
    }

    pub fn num_members(&self) -> usize {
        self.num_categories() * self.members_per_category()
    }

    /// All member vectors in canonical order.
    pub fn member_vectors(&self) -> impl Iterator<Item = &[f64]> {
        self.categories
            .iter()
            .flat_map(|c| std::iter::once(c.exemplar.as_slice()).chain(c.variants.iter().map(Vec::as_slice)))
    }

    /// Category id of each member, canonical order.
    pub fn member_categories(&self) -> Vec<usize> {
        let per = self.members_per_category();
        (0..self.num_members()).map(|k| k / per).collect()
    }
}

/// The learnable categorical prompts `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalPrompts {
    pub vectors: Vec<Vec<f64>>,
}

impl CategoricalPrompts {
    pub fn zeros(categories: usize, dim: usize) -> Self {
        Self { vectors: vec![vec![0.0; dim]; categories] }
    }

    /// Gaussian(0, std²) per coordinate.
    pub fn random(categories: usize, dim: usize, std: f64, seed: u64) -> Self {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, std).expect("valid std");
        Self { vectors: (0..categories).map(|_| (0..dim).map(|_| d.sample(&mut rng)).collect()).collect() }
    }
}

/// `z = d + c` for every member of `D`, canonical order.
pub fn merge_prompts(d: &LanguageEmbeddings, c: &CategoricalPrompts) -> Result<Vec<Vec<f64>>, BankError> {
    if c.vectors.len() != d.num_categories() {
        return Err(BankError::InvalidConfig(format!(
            "{} prompts for {} categories",
            c.vectors.len(),
            d.num_categories()
        )));
    }
    let mut z = Vec::with_capacity(d.num_members());
    for (cat, prompt) in d.categories.iter().zip(&c.vectors) {
        if prompt.len() != d.dim {
            return Err(BankError::InvalidConfig(format!("prompt of length {} in a {}-d bank", prompt.len(), d.dim)));
        }
        for v in std::iter::once(&cat.exemplar).chain(&cat.variants) {
            z.push(v.iter().zip(prompt).map(|(a, b)| a + b).collect());
        }
    }
    Ok(z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationBank {
    embeddings: LanguageEmbeddings,
    prompts: CategoricalPrompts,
    merged: Vec<Vec<f64>>,
    seed: u64,
}

impl RepresentationBank {
    pub fn new(embeddings: LanguageEmbeddings, prompts: CategoricalPrompts, seed: u64) -> Result<Self, BankError> {
        let merged = merge_prompts(&embeddings, &prompts)?;
        Ok(Self { embeddings, prompts, merged, seed })
    }

    pub fn embeddings(&self) -> &LanguageEmbeddings {
        &self.embeddings
    }

    pub fn prompts(&self) -> &CategoricalPrompts {
        &self.prompts
    }

    /// `Z` in canonical order.
    pub fn merged(&self) -> &[Vec<f64>] {
        &self.merged
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim
    }

    pub fn num_categories(&self) -> usize {
        self.embeddings.num_categories()
    }

    pub fn variants_per_category(&self) -> usize {
        self.embeddings.variants_per_category()
    }

    pub fn len(&self) -> usize {
        self.merged.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merged.is_empty()
    }

    /// Canonical index of `z^i_e`.
    pub fn exemplar_index(&self, category: usize) -> usize {
        category * self.embeddings.members_per_category()
    }

    pub fn category_of(&self, member: usize) -> usize {
        member / self.embeddings.members_per_category()
    }

    pub fn category_name(&self, category: usize) -> &str {
        &self.embeddings.categories[category].name
    }

    pub fn is_target(&self, category: usize) -> bool {
        self.embeddings.categories.get(category).is_some_and(|c| c.target)
    }

    pub fn target_categories(&self) -> Vec<usize> {
        (0..self.num_categories()).filter(|&i| self.is_target(i)).collect()
    }

    /// Writes the bank with `frozen: false`. Such a file can seed further
    /// prompt training but is rejected by [`load_frozen`].
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), BankError> {
        file::save(self, false, path.as_ref())
    }

    pub fn freeze(self) -> FrozenBank {
        let fingerprint = fingerprint(&self.merged);
        FrozenBank { inner: Arc::new(self), fingerprint }
    }
}

fn fingerprint(rows: &[Vec<f64>]) -> String {
    let mut h = Sha256::new();
    for row in rows {
        for v in row {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Immutable, shareable bank used during detector training.
#[derive(Debug, Clone)]
pub struct FrozenBank {
    inner: Arc<RepresentationBank>,
    fingerprint: String,
}

impl FrozenBank {
    /// SHA-256 of the bit patterns of `Z`, computed at freeze time.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Recomputes the fingerprint from the current contents.
    pub fn recompute_fingerprint(&self) -> String {
        fingerprint(&self.inner.merged)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), BankError> {
        file::save(&self.inner, true, path.as_ref())
    }
}

impl std::ops::Deref for FrozenBank {
    type Target = RepresentationBank;

    fn deref(&self) -> &RepresentationBank {
        &self.inner
    }
}

/// Builds and trains a bank end to end.
pub fn build_bank(
    categories: &[CategorySpec],
    grids: &AttributeGrids,
    variants: usize,
    embedder: &SyntheticEmbedder,
    training: &PromptTrainingConfig,
) -> Result<(FrozenBank, PromptTrainingOutcome), BankError> {
    let descriptions = curate_descriptions(categories, grids, variants, embedder.seed)?;
    let d = embedder.embed(&descriptions)?;
    let outcome = train_categorical_prompts(&d, training)?;
    let bank = RepresentationBank::new(d, outcome.prompts.clone(), training.seed)?;
    Ok((bank.freeze(), outcome))
}
