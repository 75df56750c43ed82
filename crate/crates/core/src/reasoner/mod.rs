//! Visual semantic reasoner.
//!
//! Image tokens (projected, plus a 2D sinusoidal encoding) attend to the
//! scene-context prompt tokens (embedded, projected, plus a 1D sinusoidal
//! encoding). The attention output is added to the encoder features. During
//! training a guidance head reads the same output and predicts the scene
//! attributes; that head is never built in inference mode.

mod scene;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use scene::{
    attribute_heads, default_prompts, scene_description, Altitude, DatasetStyle, SceneAttributes, TimeOfDay, View,
    Weather,
};

use crate::nn::layers::{init_attention, init_linear, linear, multi_head_attention, AttentionShape};
use crate::nn::posenc::{sinusoidal_1d, sinusoidal_2d};
use crate::nn::{Bindings, Init, ParamStore};
use crate::tensor::{Conv2dSpec, Graph, TensorError, Var};

pub const PREFIX: &str = "reasoner";

#[derive(Debug, Error)]
pub enum ReasonerError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("token {0:?} is not in the prompt vocabulary")]
    UnknownToken(String),
    #[error("scene guidance requested in inference mode")]
    GuidanceAtInference,
    #[error("{0} attribute tuples for {1} images")]
    AttributeCount(usize, usize),
    #[error("attributes {0:?} are not valid for the {1} style")]
    InvalidAttributes(SceneAttributes, DatasetStyle),
    #[error("image tokens have width {found}, reasoner expects {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ReasonerError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric() && c != '-').to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Whitespace vocabulary over a fixed prompt set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptVocabulary {
    index: BTreeMap<String, usize>,
}

impl PromptVocabulary {
    pub fn from_prompts<S: AsRef<str>>(prompts: &[S]) -> Self {
        let mut words: Vec<String> = prompts.iter().flat_map(|p| tokenize(p.as_ref())).collect();
        words.sort();
        words.dedup();
        Self { index: words.into_iter().enumerate().map(|(i, w)| (w, i)).collect() }
    }

    /// Vocabulary over both styles' default pools.
    pub fn standard() -> Self {
        let mut all = default_prompts(DatasetStyle::UavdtLike);
        all.extend(default_prompts(DatasetStyle::VisdroneLike));
        Self::from_prompts(&all)
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn encode(&self, text: &str) -> Result<SceneContextPrompt> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(ReasonerError::EmptyPrompt);
        }
        let token_ids = tokens
            .into_iter()
            .map(|t| self.index.get(&t).copied().ok_or(ReasonerError::UnknownToken(t)))
            .collect::<Result<_>>()?;
        Ok(SceneContextPrompt { token_ids })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneContextPrompt {
    pub token_ids: Vec<usize>,
}

/// Tokenised paraphrases; one is drawn uniformly per training iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptPool {
    prompts: Vec<SceneContextPrompt>,
}

impl PromptPool {
    pub fn new<S: AsRef<str>>(vocab: &PromptVocabulary, texts: &[S]) -> Result<Self> {
        if texts.is_empty() {
            return Err(ReasonerError::EmptyPrompt);
        }
        Ok(Self { prompts: texts.iter().map(|t| vocab.encode(t.as_ref())).collect::<Result<_>>()? })
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> &SceneContextPrompt {
        &self.prompts[rng.random_range(0..self.prompts.len())]
    }

    /// Fixed prompt used at evaluation time.
    pub fn first(&self) -> &SceneContextPrompt {
        &self.prompts[0]
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReasonerConfig {
    pub heads: usize,
    pub guidance_channels: usize,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        Self { heads: 4, guidance_channels: 16 }
    }
}

/// Output of one reasoner pass.
pub struct ReasonerOutput {
    /// `[H*W, dim]`, to be merged into the encoder features.
    pub output: Var,
    /// Per-head `[H*W, T]` attention weights.
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Reasoner {
    dim: usize,
    grid: (usize, usize),
    config: ReasonerConfig,
    style: DatasetStyle,
    vocab_size: usize,
    guidance_builds: Arc<AtomicUsize>,
}

impl Reasoner {
    pub fn new(dim: usize, grid: (usize, usize), vocab_size: usize, style: DatasetStyle, config: ReasonerConfig) -> Self {
        Self { dim, grid, config, style, vocab_size, guidance_builds: Arc::default() }
    }

    pub fn style(&self) -> DatasetStyle {
        self.style
    }

    fn attention_shape(&self) -> AttentionShape {
        AttentionShape { dim: self.dim, heads: self.config.heads }
    }

    /// Registers all reasoner parameters; the attention output projection starts at zero.
    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let d = self.dim;
        store.init(seed, &format!("{PREFIX}.token_embed"), &[self.vocab_size, d], Init::Normal(1.0));
        init_linear(store, seed, &format!("{PREFIX}.prompt_proj"), d, d);
        init_linear(store, seed, &format!("{PREFIX}.image_proj"), d, d);
        init_attention(store, seed, &format!("{PREFIX}.v2l"), self.attention_shape(), true);
        let c = self.config.guidance_channels;
        store.init(seed, &format!("{PREFIX}.guidance.conv.weight"), &[c, d, 5, 5], Init::Kaiming(d * 25));
        store.init(seed, &format!("{PREFIX}.guidance.conv.bias"), &[c], Init::Zeros);
        for (name, classes) in attribute_heads(self.style) {
            init_linear(store, seed, &format!("{PREFIX}.guidance.{name}"), c, *classes);
        }
    }

    /// `[T, dim]` key/value features for a prompt.
    pub fn encode_prompt(&self, g: &mut Graph, p: &mut Bindings, prompt: &SceneContextPrompt) -> Result<Var> {
        if prompt.token_ids.is_empty() {
            return Err(ReasonerError::EmptyPrompt);
        }
        let table = p.var(g, &format!("{PREFIX}.token_embed"));
        let embedded = g.gather_rows(table, &prompt.token_ids)?;
        let projected = linear(g, p, &format!("{PREFIX}.prompt_proj"), embedded)?;
        let pe = g.constant(sinusoidal_1d(prompt.token_ids.len(), self.dim));
        Ok(g.add(projected, pe)?)
    }

    /// V2L cross-attention: image tokens query the prompt features.
    pub fn cross_attention(&self, g: &mut Graph, p: &mut Bindings, image: Var, prompt: Var) -> Result<ReasonerOutput> {
        let width = g.shape(image).get(1).copied().unwrap_or(0);
        if width != self.dim || g.shape(prompt).get(1) != Some(&self.dim) {
            return Err(ReasonerError::DimMismatch { expected: self.dim, found: width });
        }
        let q = linear(g, p, &format!("{PREFIX}.image_proj"), image)?;
        let pe = g.constant(sinusoidal_2d(self.grid.0, self.grid.1, self.dim));
        let q = g.add(q, pe)?;
        let att = multi_head_attention(g, p, &format!("{PREFIX}.v2l"), self.attention_shape(), q, prompt, prompt)?;
        Ok(ReasonerOutput { output: att.output, attention: att.weights })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &mut Bindings,
        image: Var,
        prompt: &SceneContextPrompt,
    ) -> Result<ReasonerOutput> {
        let kv = self.encode_prompt(g, p, prompt)?;
        self.cross_attention(g, p, image, kv)
    }

    /// Sum over attribute heads of the mean cross-entropy across `outputs`.
    pub fn scene_guidance_loss(
        &self,
        g: &mut Graph,
        p: &mut Bindings,
        outputs: &[Var],
        attributes: &[SceneAttributes],
        mode: Mode,
    ) -> Result<Var> {
        if mode == Mode::Infer {
            return Err(ReasonerError::GuidanceAtInference);
        }
        if outputs.len() != attributes.len() || outputs.is_empty() {
            return Err(ReasonerError::AttributeCount(attributes.len(), outputs.len()));
        }
        if let Some(bad) = attributes.iter().find(|a| !a.valid_for(self.style)) {
            return Err(ReasonerError::InvalidAttributes(*bad, self.style));
        }
        self.guidance_builds.fetch_add(1, Ordering::SeqCst);
        let (h, w) = self.grid;
        let weight = p.var(g, &format!("{PREFIX}.guidance.conv.weight"));
        let bias = p.var(g, &format!("{PREFIX}.guidance.conv.bias"));
        let mut pooled = Vec::with_capacity(outputs.len());
        for &out in outputs {
            let chw = g.transpose(out)?;
            let chw = g.reshape(chw, &[self.dim, h, w])?;
            let conv = g.conv2d(chw, weight, bias, Conv2dSpec { stride: 2, pad: 2 })?;
            let conv = g.relu(conv);
            let c = g.shape(conv)[0];
            let spatial = g.shape(conv)[1] * g.shape(conv)[2];
            let flat = g.reshape(conv, &[c, spatial])?;
            let flat = g.transpose(flat)?;
            let mean = g.mean_rows(flat)?;
            pooled.push(g.reshape(mean, &[1, c])?);
        }
        let features = if pooled.len() == 1 { pooled[0] } else { g.concat(&pooled, 0)? };
        let mut terms = Vec::new();
        for (head, (name, _)) in attribute_heads(self.style).iter().enumerate() {
            let logits = linear(g, p, &format!("{PREFIX}.guidance.{name}"), features)?;
            let targets: Vec<usize> = attributes.iter().map(|a| a.labels(self.style)[head]).collect();
            terms.push(g.cross_entropy(logits, &targets, None)?);
        }
        Ok(g.elementwise_sum(&terms)?)
    }

    /// Number of times the guidance head has been built by this reasoner or its clones.
    pub fn guidance_builds(&self) -> usize {
        self.guidance_builds.load(Ordering::SeqCst)
    }
}

/// Elementwise sum of encoder features and reasoner output.
pub fn merge(g: &mut Graph, encoder: Var, reasoner: Var) -> Result<Var> {
    Ok(g.add(encoder, reasoner)?)
}
