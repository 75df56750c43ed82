use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::BankError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    /// Target categories are detector classes; the others only populate the bank.
    pub target: bool,
}

impl CategorySpec {
    pub fn target(name: &str) -> Self {
        Self { name: name.to_string(), target: true }
    }

    pub fn distractor(name: &str) -> Self {
        Self { name: name.to_string(), target: false }
    }
}

/// Background categories commonly visible from the air.
pub const DISTRACTORS: [&str; 4] = ["ground", "building", "tree", "traffic sign"];

/// The three synthetic detector classes followed by the background categories.
pub fn detection_categories() -> Vec<CategorySpec> {
    ["car", "truck", "bus"]
        .iter()
        .map(|n| CategorySpec::target(n))
        .chain(DISTRACTORS.iter().map(|n| CategorySpec::distractor(n)))
        .collect()
}

/// Ten categories (six road-user classes plus background), used for bank analysis.
pub fn extended_categories() -> Vec<CategorySpec> {
    ["pedestrian", "car", "van", "truck", "bus", "motor"]
        .iter()
        .map(|n| CategorySpec::target(n))
        .chain(DISTRACTORS.iter().map(|n| CategorySpec::distractor(n)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeGrids {
    pub view: Vec<String>,
    pub scale: Vec<String>,
    pub weather: Vec<String>,
}

impl Default for AttributeGrids {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        Self {
            view: s(&["side", "front", "bird"]),
            scale: s(&["small", "medium", "large"]),
            weather: s(&["clean", "night", "foggy"]),
        }
    }
}

impl AttributeGrids {
    pub fn combinations(&self) -> usize {
        self.view.len() * self.scale.len() * self.weather.len()
    }

    fn combination(&self, index: usize) -> VariantAttributes {
        let w = index % self.weather.len();
        let s = (index / self.weather.len()) % self.scale.len();
        let v = index / (self.weather.len() * self.scale.len());
        VariantAttributes {
            view: self.view[v].clone(),
            scale: self.scale[s].clone(),
            weather: self.weather[w].clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VariantAttributes {
    pub view: String,
    pub scale: String,
    pub weather: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptionKind {
    Exemplar,
    Variant,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceDescription {
    pub category_id: usize,
    pub category_name: String,
    pub target: bool,
    pub kind: DescriptionKind,
    pub attributes: Option<VariantAttributes>,
    pub text: String,
}

pub fn exemplar_text(category: &str) -> String {
    format!("A photo of a {category}.")
}

pub fn variant_text(category: &str, attrs: &VariantAttributes, noun: &str) -> String {
    format!(
        "A {} view {noun} of a {} {category} in a {} day.",
        attrs.view, attrs.scale, attrs.weather
    )
}

/// One exemplar plus `variants` distinct attribute combinations per category,
/// sampled without replacement. Output is category-major, exemplar first.
pub fn curate_descriptions(
    categories: &[CategorySpec],
    grids: &AttributeGrids,
    variants: usize,
    seed: u64,
) -> Result<Vec<InstanceDescription>, BankError> {
    if categories.is_empty() {
        return Err(BankError::InvalidConfig("no categories".into()));
    }
    if let Some(pos) = categories.iter().position(|c| c.name.trim().is_empty()) {
        return Err(BankError::InvalidConfig(format!("category {pos} has an empty name")));
    }
    let available = grids.combinations();
    if variants > available {
        return Err(BankError::TooManyVariants { requested: variants, available });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(categories.len() * (variants + 1));
    for (id, cat) in categories.iter().enumerate() {
        out.push(InstanceDescription {
            category_id: id,
            category_name: cat.name.clone(),
            target: cat.target,
            kind: DescriptionKind::Exemplar,
            attributes: None,
            text: exemplar_text(&cat.name),
        });
        let mut picks = sample(&mut rng, available, variants).into_vec();
        picks.sort_unstable();
        for index in picks {
            let attrs = grids.combination(index);
            let noun = if rng.random_bool(0.5) { "photo" } else { "picture" };
            out.push(InstanceDescription {
                category_id: id,
                category_name: cat.name.clone(),
                target: cat.target,
                kind: DescriptionKind::Variant,
                text: variant_text(&cat.name, &attrs, noun),
                attributes: Some(attrs),
            });
        }
    }
    Ok(out)
}
