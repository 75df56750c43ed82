//! JSON bank files.
//!
//! ```json
//! {
//!   "header": {"schema": "langdet-bank/1", "embedding_dim": 64, "num_categories": 7,
//!              "variants_per_category": 8, "frozen": true, "seed": 0},
//!   "records": [
//!     {"category_id": 0, "category_name": "car", "target": true, "kind": "exemplar",
//!      "attributes": null, "vector": [0.1, ...]},
//!     {"category_id": 0, "category_name": "car", "target": true, "kind": "variant",
//!      "attributes": {"view": "side", "scale": "small", "weather": "foggy"}, "vector": [...]},
//!     {"category_id": 0, "category_name": "car", "target": true, "kind": "prompt",
//!      "attributes": null, "vector": [...]}
//!   ]
//! }
//! ```
//!
//! Files holding only exemplar and variant records are valid input for
//! [`load_embeddings`]. `prompt` records are required by [`load_frozen`].

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::descriptions::VariantAttributes;
use super::{BankError, CategoricalPrompts, CategoryEmbeddings, FrozenBank, LanguageEmbeddings, RepresentationBank};

pub const BANK_SCHEMA: &str = "langdet-bank/1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: String,
    embedding_dim: usize,
    num_categories: usize,
    variants_per_category: usize,
    frozen: bool,
    seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RecordKind {
    Exemplar,
    Variant,
    Prompt,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    category_id: usize,
    category_name: String,
    target: bool,
    kind: RecordKind,
    attributes: Option<VariantAttributes>,
    vector: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankFile {
    header: Header,
    records: Vec<Record>,
}

pub(super) fn save(bank: &RepresentationBank, frozen: bool, path: &Path) -> Result<(), BankError> {
    let d = bank.embeddings();
    let mut records = Vec::with_capacity(d.num_members() + d.num_categories());
    for (id, (cat, prompt)) in d.categories().iter().zip(&bank.prompts().vectors).enumerate() {
        let record = |kind, attributes, vector: &Vec<f64>| Record {
            category_id: id,
            category_name: cat.name.clone(),
            target: cat.target,
            kind,
            attributes,
            vector: vector.clone(),
        };
        records.push(record(RecordKind::Exemplar, None, &cat.exemplar));
        for (v, a) in cat.variants.iter().zip(&cat.variant_attributes) {
            records.push(record(RecordKind::Variant, a.clone(), v));
        }
        records.push(record(RecordKind::Prompt, None, prompt));
    }
    let file = BankFile {
        header: Header {
            schema: BANK_SCHEMA.to_string(),
            embedding_dim: d.dim(),
            num_categories: d.num_categories(),
            variants_per_category: d.variants_per_category(),
            frozen,
            seed: bank.seed(),
        },
        records,
    };
    let text = serde_json::to_string_pretty(&file)
        .map_err(|source| BankError::Json { path: path.display().to_string(), source })?;
    fs::write(path, text).map_err(|source| BankError::Io { path: path.display().to_string(), source })
}

fn read(path: &Path) -> Result<BankFile, BankError> {
    let text = fs::read_to_string(path).map_err(|source| BankError::Io { path: path.display().to_string(), source })?;
    let file: BankFile =
        serde_json::from_str(&text).map_err(|source| BankError::Json { path: path.display().to_string(), source })?;
    if file.header.schema != BANK_SCHEMA {
        return Err(BankError::Schema {
            record: None,
            reason: format!("unsupported schema {:?}, expected {BANK_SCHEMA:?}", file.header.schema),
        });
    }
    Ok(file)
}

fn schema(record: usize, reason: String) -> BankError {
    BankError::Schema { record: Some(record), reason }
}

/// Parses records into `D` plus any prompt vectors found.
fn parse(file: &BankFile) -> Result<(LanguageEmbeddings, Vec<Option<Vec<f64>>>), BankError> {
    let h = &file.header;
    let mut cats: Vec<Option<CategoryEmbeddings>> = vec![None; h.num_categories];
    let mut pending: Vec<Vec<(Vec<f64>, Option<VariantAttributes>)>> = vec![Vec::new(); h.num_categories];
    let mut prompts: Vec<Option<Vec<f64>>> = vec![None; h.num_categories];
    let mut names: Vec<Option<(&str, bool)>> = vec![None; h.num_categories];
    for (idx, r) in file.records.iter().enumerate() {
        if r.category_id >= h.num_categories {
            return Err(schema(idx, format!("category_id {} >= num_categories {}", r.category_id, h.num_categories)));
        }
        if r.vector.len() != h.embedding_dim {
            return Err(schema(idx, format!("vector length {} != embedding_dim {}", r.vector.len(), h.embedding_dim)));
        }
        if r.vector.iter().any(|v| !v.is_finite()) {
            return Err(schema(idx, "non-finite vector entry".into()));
        }
        match names[r.category_id] {
            None => names[r.category_id] = Some((&r.category_name, r.target)),
            Some((n, t)) if n != r.category_name || t != r.target => {
                return Err(schema(idx, format!("category {} name/target disagrees with earlier records", r.category_id)))
            }
            Some(_) => {}
        }
        let id = r.category_id;
        match r.kind {
            RecordKind::Exemplar => {
                if r.attributes.is_some() {
                    return Err(schema(idx, "exemplar records carry no attributes".into()));
                }
                if cats[id].is_some() {
                    return Err(schema(idx, format!("second exemplar for category {id}")));
                }
                if r.vector.iter().all(|&v| v == 0.0) {
                    return Err(schema(idx, "zero exemplar vector".into()));
                }
                cats[id] = Some(CategoryEmbeddings {
                    name: r.category_name.clone(),
                    target: r.target,
                    exemplar: r.vector.clone(),
                    variants: Vec::new(),
                    variant_attributes: Vec::new(),
                });
            }
            RecordKind::Variant => {
                if r.vector.iter().all(|&v| v == 0.0) {
                    return Err(schema(idx, "zero variant vector".into()));
                }
                pending[id].push((r.vector.clone(), r.attributes.clone()));
                if pending[id].len() > h.variants_per_category {
                    return Err(schema(idx, format!("more than {} variants for category {id}", h.variants_per_category)));
                }
            }
            RecordKind::Prompt => {
                if prompts[id].is_some() {
                    return Err(schema(idx, format!("second prompt for category {id}")));
                }
                prompts[id] = Some(r.vector.clone());
            }
        }
    }
    let mut categories = Vec::with_capacity(h.num_categories);
    for (id, (cat, variants)) in cats.into_iter().zip(pending).enumerate() {
        let mut cat = cat.ok_or_else(|| BankError::Schema {
            record: None,
            reason: format!("category {id} has no exemplar record"),
        })?;
        if variants.len() != h.variants_per_category {
            return Err(BankError::Schema {
                record: None,
                reason: format!("category {id} has {} variants, header says {}", variants.len(), h.variants_per_category),
            });
        }
        for (v, a) in variants {
            cat.variants.push(v);
            cat.variant_attributes.push(a);
        }
        categories.push(cat);
    }
    Ok((LanguageEmbeddings::new(h.embedding_dim, categories)?, prompts))
}

/// Reads `D` from a bank file. Prompt records, if present, are ignored.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<LanguageEmbeddings, BankError> {
    let file = read(path.as_ref())?;
    Ok(parse(&file)?.0)
}

/// Reads a frozen bank. Files written from an unfrozen bank are rejected.
pub fn load_frozen(path: impl AsRef<Path>) -> Result<FrozenBank, BankError> {
    let file = read(path.as_ref())?;
    if !file.header.frozen {
        return Err(BankError::NotFrozen);
    }
    let (d, prompts) = parse(&file)?;
    let vectors = prompts
        .into_iter()
        .enumerate()
        .map(|(id, p)| {
            p.ok_or_else(|| BankError::Schema { record: None, reason: format!("category {id} has no prompt record") })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RepresentationBank::new(d, CategoricalPrompts { vectors }, file.header.seed)?.freeze())
}
