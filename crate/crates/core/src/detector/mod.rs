//! Toy query-based detector.
//!
//! Backbone: three 3×3 stride-2 convolutions with ReLU, flattened to an
//! `(S/8)²`-token sequence and projected to `dim`. Encoder: post-norm
//! self-attention layers with a 2D sinusoidal encoding added to queries and
//! keys. Proposals: every encoder token predicts class logits and a box
//! relative to an anchor on its grid cell; the top-Q tokens by foreground
//! score give the initial reference boxes. Decoder: learnable content
//! queries; each layer runs self-attention, cross-attention into the memory
//! and a feed-forward block, then the shared heads predict class logits and a
//! box refinement of the (detached) reference from the previous layer.
//!
//! [`DetectorCore`] is the plain detector. [`Detector`] wraps it with the
//! optional reasoner (inserted after the last encoder layer) and the optional
//! object-feature projection used by the relation loss.

pub mod boxes;
pub mod checkpoint;
pub mod eval;
pub mod loss;
pub mod matcher;

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::layers::{
    ffn, init_attention, init_ffn, init_layer_norm, init_linear, init_linear_zero, init_mlp, layer_norm, linear, mlp,
    multi_head_attention, AttentionShape,
};
use crate::nn::posenc::{box_sine_embedding, sinusoidal_2d};
use crate::nn::{Bindings, Init, ParamStore};
use crate::reasoner::{
    merge, DatasetStyle, Mode, Reasoner, ReasonerConfig, ReasonerError, ReasonerOutput, SceneContextPrompt,
};
use crate::relation::RelationError;
use crate::tensor::{Conv2dSpec, Graph, Tensor, TensorError, Var};

pub use eval::{average_precision, detections_from, evaluate, match_image, ApReport, Detection, ImageRecord};
pub use loss::{detection_loss, extract_object_features, match_layers, proposal_loss, total_loss, LossWeights};
pub use matcher::{assignment_cost, hungarian, match_cost, Assignment, MatchWeights};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("image has shape {found:?}, expected {expected:?}")]
    InvalidImage { expected: Vec<usize>, found: Vec<usize> },
    #[error("matching: {0}")]
    Matching(String),
    #[error("category {0} has no matched query")]
    MissingObjectFeature(usize),
    #[error("invalid detector configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("a prompt is required when the reasoner is enabled")]
    MissingPrompt,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Relation(#[from] RelationError),
    #[error(transparent)]
    Reasoner(#[from] ReasonerError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
}

pub type Result<T, E = DetectorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub image_size: usize,
    pub backbone_channels: [usize; 3],
    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub queries: usize,
    pub num_classes: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            backbone_channels: [16, 32, 64],
            dim: 64,
            heads: 4,
            ffn_hidden: 128,
            encoder_layers: 2,
            decoder_layers: 6,
            queries: 20,
            num_classes: 3,
        }
    }
}

impl DetectorConfig {
    pub fn grid(&self) -> usize {
        self.image_size / 8
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DetectorError::InvalidConfig(m.to_string()));
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return bad("image_size must be a positive multiple of 8");
        }
        if self.dim % 8 != 0 || self.dim == 0 {
            return bad("dim must be a positive multiple of 8");
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad("dim must be divisible by heads");
        }
        if self.decoder_layers == 0 || self.queries == 0 || self.num_classes == 0 {
            return bad("decoder_layers, queries and num_classes must be >= 1");
        }
        if self.queries > self.grid() * self.grid() {
            return bad("queries must not exceed the number of encoder tokens");
        }
        Ok(())
    }
}

/// Which language-guidance components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub reasoner: bool,
    pub relation: bool,
}

impl Ablation {
    pub const BASELINE: Ablation = Ablation { reasoner: false, relation: false };
    pub const FULL: Ablation = Ablation { reasoner: true, relation: true };
    /// Row order of the ablation table.
    pub const ROWS: [Ablation; 4] = [
        Ablation { reasoner: false, relation: false },
        Ablation { reasoner: true, relation: false },
        Ablation { reasoner: false, relation: true },
        Ablation { reasoner: true, relation: true },
    ];

    pub fn label(&self) -> String {
        let f = |b: bool| if b { "on" } else { "off" };
        format!("reasoner={},relation={}", f(self.reasoner), f(self.relation))
    }
}

impl FromStr for Ablation {
    type Err = String;

    /// Parses `reasoner=on|off,relation=on|off` (either order, both required).
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (mut reasoner, mut relation) = (None, None);
        for part in s.split(',') {
            let (k, v) = part.split_once('=').ok_or_else(|| format!("expected key=value, got {part:?}"))?;
            let v = match v.trim() {
                "on" => true,
                "off" => false,
                other => return Err(format!("expected on|off, got {other:?}")),
            };
            match k.trim() {
                "reasoner" => reasoner = Some(v),
                "relation" => relation = Some(v),
                other => return Err(format!("unknown ablation key {other:?}")),
            }
        }
        match (reasoner, relation) {
            (Some(reasoner), Some(relation)) => Ok(Self { reasoner, relation }),
            _ => Err("both reasoner and relation must be given".into()),
        }
    }
}

/// Per-decoder-layer outputs for one image.
#[derive(Debug, Clone)]
pub struct DetectionOutput {
    /// `[Q, dim]` post-norm decoder output per layer.
    pub features: Vec<Var>,
    /// `[Q, N_C + 1]`; the last column is no-object.
    pub logits: Vec<Var>,
    /// `[Q, 4]` normalised `(cx, cy, w, h)` in `(0, 1)`.
    pub boxes: Vec<Var>,
    /// Encoder proposals `([T, N_C + 1] logits, [T, 4] boxes)` that seed the
    /// decoder reference boxes.
    pub proposals: Option<(Var, Var)>,
}

impl DetectionOutput {
    pub fn layers(&self) -> usize {
        self.logits.len()
    }
}

/// Side of the square anchor attached to each encoder token.
pub const ANCHOR_SIZE: f64 = 0.15;

/// Pre-sigmoid `[n², 4]` anchors centred on the cells of an `n × n` grid.
pub fn grid_anchors(n: usize) -> Tensor {
    let logit = |v: f64| (v / (1.0 - v)).ln();
    let data = (0..n * n)
        .flat_map(|k| {
            let (y, x) = (k / n, k % n);
            let (cx, cy) = ((x as f64 + 0.5) / n as f64, (y as f64 + 0.5) / n as f64);
            [logit(cx), logit(cy), logit(ANCHOR_SIZE), logit(ANCHOR_SIZE)]
        })
        .collect();
    Tensor::from_parts(vec![n * n, 4], data)
}

/// Indices, in ascending order, of the `k` tokens with the highest
/// foreground probability (ties broken by token index).
pub fn top_proposals(logits: &Tensor, num_classes: usize, k: usize) -> Vec<usize> {
    let probs = crate::tensor::softmax(logits, 1.0).expect("finite proposal logits");
    let score = |r: usize| probs.row(r)[..num_classes].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut order: Vec<usize> = (0..probs.rows()).collect();
    order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// The detector without any language-guidance component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectorCore {
    pub config: DetectorConfig,
}

impl DetectorCore {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    fn attention(&self) -> AttentionShape {
        AttentionShape { dim: self.config.dim, heads: self.config.heads }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let c = &self.config;
        let mut cin = 3;
        for (i, &cout) in c.backbone_channels.iter().enumerate() {
            store.init(seed, &format!("backbone.conv{i}.weight"), &[cout, cin, 3, 3], Init::Kaiming(cin * 9));
            store.init(seed, &format!("backbone.conv{i}.bias"), &[cout], Init::Zeros);
            cin = cout;
        }
        init_linear(store, seed, "backbone.proj", cin, c.dim);
        for l in 0..c.encoder_layers {
            let p = format!("encoder.{l}");
            init_attention(store, seed, &format!("{p}.self_attn"), self.attention(), false);
            init_layer_norm(store, seed, &format!("{p}.norm1"), c.dim);
            init_ffn(store, seed, &format!("{p}.ffn"), c.dim, c.ffn_hidden);
            init_layer_norm(store, seed, &format!("{p}.norm2"), c.dim);
        }
        store.init(seed, "decoder.query_embed", &[c.queries, c.dim], Init::Normal(1.0));
        init_linear(store, seed, "proposal.class", c.dim, c.num_classes + 1);
        init_mlp(store, seed, "proposal.box", c.dim, c.dim, 4);
        init_linear_zero(store, seed, "proposal.box.fc2", c.dim, 4);
        init_mlp(store, seed, "decoder.query_pos", c.dim, c.dim, c.dim);
        for l in 0..c.decoder_layers {
            let p = format!("decoder.{l}");
            init_attention(store, seed, &format!("{p}.self_attn"), self.attention(), false);
            init_layer_norm(store, seed, &format!("{p}.norm1"), c.dim);
            init_attention(store, seed, &format!("{p}.cross_attn"), self.attention(), false);
            init_layer_norm(store, seed, &format!("{p}.norm2"), c.dim);
            init_ffn(store, seed, &format!("{p}.ffn"), c.dim, c.ffn_hidden);
            init_layer_norm(store, seed, &format!("{p}.norm3"), c.dim);
        }
        init_linear(store, seed, "head.class", c.dim, c.num_classes + 1);
        init_mlp(store, seed, "head.box", c.dim, c.dim, 4);
        init_linear_zero(store, seed, "head.box.fc2", c.dim, 4);
    }

    pub fn param_store(&self, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        self.init(&mut s, seed);
        s
    }

    /// `[3, S, S]` image to `[(S/8)², dim]` tokens.
    pub fn backbone(&self, g: &mut Graph, p: &mut Bindings, image: &Tensor) -> Result<Var> {
        let s = self.config.image_size;
        if image.shape() != [3, s, s] {
            return Err(DetectorError::InvalidImage { expected: vec![3, s, s], found: image.shape().to_vec() });
        }
        let mut x = g.constant(image.clone());
        for i in 0..3 {
            let w = p.var(g, &format!("backbone.conv{i}.weight"));
            let b = p.var(g, &format!("backbone.conv{i}.bias"));
            let y = g.conv2d(x, w, b, Conv2dSpec { stride: 2, pad: 1 })?;
            x = g.relu(y);
        }
        let shape = g.shape(x).to_vec();
        let flat = g.reshape(x, &[shape[0], shape[1] * shape[2]])?;
        let tokens = g.transpose(flat)?;
        Ok(linear(g, p, "backbone.proj", tokens)?)
    }

    fn position(&self, g: &mut Graph) -> Var {
        let n = self.config.grid();
        g.constant(sinusoidal_2d(n, n, self.config.dim))
    }

    pub fn encode(&self, g: &mut Graph, p: &mut Bindings, tokens: Var) -> Result<Var> {
        let pos = self.position(g);
        let mut x = tokens;
        for l in 0..self.config.encoder_layers {
            let pre = format!("encoder.{l}");
            let qk = g.add(x, pos)?;
            let att = multi_head_attention(g, p, &format!("{pre}.self_attn"), self.attention(), qk, qk, x)?;
            let r = g.add(x, att.output)?;
            x = layer_norm(g, p, &format!("{pre}.norm1"), r)?;
            let f = ffn(g, p, &format!("{pre}.ffn"), x)?;
            let r = g.add(x, f)?;
            x = layer_norm(g, p, &format!("{pre}.norm2"), r)?;
        }
        Ok(x)
    }

    /// Per-token proposals over the memory: class logits and boxes refined
    /// from a fixed anchor centred on each grid cell. Returns the logits and
    /// the pre-sigmoid boxes.
    pub fn proposals(&self, g: &mut Graph, p: &mut Bindings, memory: Var) -> Result<(Var, Var)> {
        let logits = linear(g, p, "proposal.class", memory)?;
        let delta = mlp(g, p, "proposal.box", memory)?;
        let anchors = g.constant(grid_anchors(self.config.grid()));
        Ok((logits, g.add(delta, anchors)?))
    }

    pub fn decode(&self, g: &mut Graph, p: &mut Bindings, memory: Var) -> Result<DetectionOutput> {
        let c = &self.config;
        let (proposal_logits, proposal_raw) = self.proposals(g, p, memory)?;
        let proposal_boxes = g.sigmoid(proposal_raw);
        let selected = top_proposals(g.value(proposal_logits), c.num_classes, c.queries);
        let chosen = g.gather_rows(proposal_raw, &selected)?;
        let mut reference = g.detach(chosen);
        let mem_pos = self.position(g);
        let keys = g.add(memory, mem_pos)?;
        let mut tgt = p.var(g, "decoder.query_embed");
        let mut out = DetectionOutput {
            features: Vec::new(),
            logits: Vec::new(),
            boxes: Vec::new(),
            proposals: Some((proposal_logits, proposal_boxes)),
        };
        for l in 0..c.decoder_layers {
            let pre = format!("decoder.{l}");
            let ref_boxes = g.value(reference).map(|x| 1.0 / (1.0 + (-x).exp()));
            let sine = g.constant(box_sine_embedding(&ref_boxes, c.dim));
            let pos = mlp(g, p, "decoder.query_pos", sine)?;
            let q = g.add(tgt, pos)?;
            let sa = multi_head_attention(g, p, &format!("{pre}.self_attn"), self.attention(), q, q, tgt)?;
            let r = g.add(tgt, sa.output)?;
            tgt = layer_norm(g, p, &format!("{pre}.norm1"), r)?;
            let q = g.add(tgt, pos)?;
            let ca = multi_head_attention(g, p, &format!("{pre}.cross_attn"), self.attention(), q, keys, memory)?;
            let r = g.add(tgt, ca.output)?;
            tgt = layer_norm(g, p, &format!("{pre}.norm2"), r)?;
            let f = ffn(g, p, &format!("{pre}.ffn"), tgt)?;
            let r = g.add(tgt, f)?;
            tgt = layer_norm(g, p, &format!("{pre}.norm3"), r)?;
            let logits = linear(g, p, "head.class", tgt)?;
            let delta = mlp(g, p, "head.box", tgt)?;
            let refined = g.add(delta, reference)?;
            let boxes = g.sigmoid(refined);
            out.features.push(tgt);
            out.logits.push(logits);
            out.boxes.push(boxes);
            reference = g.detach(refined);
        }
        Ok(out)
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Bindings, image: &Tensor) -> Result<DetectionOutput> {
        let tokens = self.backbone(g, p, image)?;
        let memory = self.encode(g, p, tokens)?;
        self.decode(g, p, memory)
    }
}

/// Forward result of [`Detector`].
pub struct ForwardOutput {
    pub detection: DetectionOutput,
    /// Reasoner output, present when the reasoner is enabled.
    pub reasoner: Option<ReasonerOutput>,
}

pub const RELATION_PROJECTION: &str = "relation.proj";

/// Detector with the optional language-guidance components.
#[derive(Debug, Clone)]
pub struct Detector {
    core: DetectorCore,
    reasoner: Option<Reasoner>,
    relation_dim: Option<usize>,
}

impl Detector {
    pub fn baseline(config: DetectorConfig) -> Result<Self> {
        Ok(Self { core: DetectorCore::new(config)?, reasoner: None, relation_dim: None })
    }

    /// `bank_dim` is the bank's embedding dimension (target of the object-feature projection).
    pub fn new(
        config: DetectorConfig,
        ablation: Ablation,
        reasoner: ReasonerConfig,
        style: DatasetStyle,
        vocab_size: usize,
        bank_dim: usize,
    ) -> Result<Self> {
        let core = DetectorCore::new(config)?;
        if ablation.reasoner && config.dim % reasoner.heads.max(1) != 0 {
            return Err(DetectorError::InvalidConfig("dim must be divisible by reasoner heads".into()));
        }
        let g = config.grid();
        Ok(Self {
            core,
            reasoner: ablation.reasoner.then(|| Reasoner::new(config.dim, (g, g), vocab_size, style, reasoner)),
            relation_dim: ablation.relation.then_some(bank_dim),
        })
    }

    pub fn core(&self) -> &DetectorCore {
        &self.core
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.core.config
    }

    pub fn reasoner(&self) -> Option<&Reasoner> {
        self.reasoner.as_ref()
    }

    pub fn ablation(&self) -> Ablation {
        Ablation { reasoner: self.reasoner.is_some(), relation: self.relation_dim.is_some() }
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        let mut store = self.core.param_store(seed);
        if let Some(r) = &self.reasoner {
            r.init(&mut store, seed);
        }
        if let Some(e) = self.relation_dim {
            init_linear(&mut store, seed, RELATION_PROJECTION, self.core.config.dim, e);
        }
        store
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &mut Bindings,
        image: &Tensor,
        prompt: Option<&SceneContextPrompt>,
    ) -> Result<ForwardOutput> {
        let tokens = self.core.backbone(g, p, image)?;
        let encoded = self.core.encode(g, p, tokens)?;
        let (memory, reasoner) = match &self.reasoner {
            Some(r) => {
                let prompt = prompt.ok_or(DetectorError::MissingPrompt)?;
                let out = r.forward(g, p, encoded, prompt)?;
                (merge(g, encoded, out.output)?, Some(out))
            }
            None => (encoded, None),
        };
        let detection = self.core.decode(g, p, memory)?;
        Ok(ForwardOutput { detection, reasoner })
    }

    /// Final-layer detections for one image, with parameters bound as constants.
    pub fn predict(
        &self,
        store: &ParamStore,
        image: &Tensor,
        prompt: Option<&SceneContextPrompt>,
    ) -> Result<Vec<Detection>> {
        let mut g = Graph::new();
        let mut p = Bindings::frozen(store);
        let out = self.forward(&mut g, &mut p, image, prompt)?;
        let last = out.detection.layers() - 1;
        Ok(eval::detections_from(
            g.value(out.detection.logits[last]),
            g.value(out.detection.boxes[last]),
            self.core.config.num_classes,
        ))
    }

    /// Scene guidance loss for the reasoner outputs of a batch.
    pub fn guidance_loss(
        &self,
        g: &mut Graph,
        p: &mut Bindings,
        outputs: &[Var],
        attributes: &[crate::reasoner::SceneAttributes],
        mode: Mode,
    ) -> Result<Option<Var>> {
        match &self.reasoner {
            Some(r) => Ok(Some(r.scene_guidance_loss(g, p, outputs, attributes, mode)?)),
            None => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DetectorConfig {
        DetectorConfig {
            image_size: 16,
            backbone_channels: [4, 4, 8],
            dim: 16,
            heads: 2,
            ffn_hidden: 16,
            encoder_layers: 1,
            decoder_layers: 2,
            queries: 4,
            num_classes: 3,
        }
    }

    fn image(size: usize) -> Tensor {
        Tensor::new(vec![3, size, size], (0..3 * size * size).map(|i| ((i * 37) % 101) as f64 / 101.0).collect())
            .unwrap()
    }

    #[test]
    fn output_shapes() {
        let d = Detector::baseline(tiny()).unwrap();
        let store = d.init(1);
        let mut g = Graph::new();
        let mut p = Bindings::frozen(&store);
        let out = d.forward(&mut g, &mut p, &image(16), None).unwrap().detection;
        assert_eq!(out.layers(), 2);
        for l in 0..2 {
            assert_eq!(g.shape(out.logits[l]), &[4, 4]);
            assert_eq!(g.shape(out.boxes[l]), &[4, 4]);
            assert!(g.value(out.boxes[l]).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn wrong_resolution_rejected() {
        let d = Detector::baseline(tiny()).unwrap();
        let store = d.init(1);
        let mut g = Graph::new();
        let mut p = Bindings::frozen(&store);
        assert!(matches!(
            d.forward(&mut g, &mut p, &image(32), None),
            Err(DetectorError::InvalidImage { .. })
        ));
    }

    #[test]
    fn ablation_parsing() {
        assert_eq!("reasoner=on,relation=off".parse::<Ablation>().unwrap(), Ablation { reasoner: true, relation: false });
        assert_eq!("relation=on,reasoner=on".parse::<Ablation>().unwrap(), Ablation::FULL);
        assert!("reasoner=on".parse::<Ablation>().is_err());
        assert!("reasoner=maybe,relation=on".parse::<Ablation>().is_err());
        for a in Ablation::ROWS {
            assert_eq!(a.label().parse::<Ablation>().unwrap(), a);
        }
    }
}
