//! Run configuration (TOML).
//!
//! Every section and field is optional and falls back to its default.
//!
//! ```toml
//! style = "uavdt-like"        # or "visdrone-like"
//! seed = 0                    # model init, batch order, prompt sampling
//! out = "runs/default"
//! prompts = ["describe the given drone-view image ..."]   # optional pool override
//!
//! [data]     train_size, eval_size, train_seed, eval_seed
//! [model]    image_size, backbone_channels, dim, heads, ffn_hidden,
//!            encoder_layers, decoder_layers, queries, num_classes
//! [reasoner] heads, guidance_channels
//! [bank]     path, variants, embed_dim, intra_spread, inter_separation, seed,
//!            [bank.prompt] temperature, epochs, learning_rate, init_std, seed
//! [loss]     relation_temperature, no_object_weight, guidance_weight,
//!            match_class, match_l1, match_iou
//! [ablation] reasoner, relation
//! [optim]    learning_rate, weight_decay, warmup_steps, epochs, batch_size, clip_norm,
//!            cosine_decay
//! [eval]     iou_threshold, every
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::bank::PromptTrainingConfig;
use crate::detector::{Ablation, DetectorConfig, LossWeights, MatchWeights};
use crate::nn::optim::AdamWConfig;
use crate::reasoner::{default_prompts, DatasetStyle, ReasonerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_size: usize,
    pub eval_size: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_size: 600, eval_size: 200, train_seed: 1, eval_seed: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankConfig {
    /// Existing frozen bank to load; built (and saved under `out`) when absent.
    pub path: Option<PathBuf>,
    pub variants: usize,
    pub embed_dim: usize,
    pub intra_spread: f64,
    pub inter_separation: f64,
    pub seed: u64,
    pub prompt: PromptTrainingConfig,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            path: None,
            variants: 6,
            embed_dim: 64,
            intra_spread: 0.3,
            inter_separation: 1.0,
            seed: 0,
            prompt: PromptTrainingConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub relation_temperature: f64,
    pub no_object_weight: f64,
    pub guidance_weight: f64,
    pub match_class: f64,
    pub match_l1: f64,
    pub match_iou: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            relation_temperature: crate::relation::DEFAULT_RELATION_TEMPERATURE,
            no_object_weight: w.no_object_weight,
            guidance_weight: w.guidance,
            match_class: w.matching.class,
            match_l1: w.matching.l1,
            match_iou: w.matching.iou,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            matching: MatchWeights { class: self.match_class, l1: self.match_l1, iou: self.match_iou },
            no_object_weight: self.no_object_weight,
            guidance: self.guidance_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
    /// Cosine-decay the learning rate to zero over the steps after warm-up.
    pub cosine_decay: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, weight_decay: 1e-4, warmup_steps: 50, epochs: 30, batch_size: 4, clip_norm: Some(0.5), cosine_decay: true }
    }
}

impl OptimConfig {
    /// Optimizer settings for a run of `steps_per_epoch * epochs` steps.
    pub fn adamw(&self, steps_per_epoch: usize) -> AdamWConfig {
        let total = steps_per_epoch * self.epochs;
        AdamWConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            clip_norm: self.clip_norm,
            decay_steps: self.cosine_decay.then(|| total.saturating_sub(self.warmup_steps)),
            ..AdamWConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Defaults to 0.7 for UAVDT-style runs and 0.5 for VisDrone-style runs.
    pub iou_threshold: Option<f64>,
    /// Evaluate every this many epochs (the last epoch is always evaluated).
    pub every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou_threshold: None, every: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub style: DatasetStyle,
    pub seed: u64,
    pub out: PathBuf,
    pub prompts: Option<Vec<String>>,
    pub data: DataConfig,
    pub model: DetectorConfig,
    pub reasoner: ReasonerConfig,
    pub bank: BankConfig,
    pub loss: LossConfig,
    pub ablation: Ablation,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            style: DatasetStyle::UavdtLike,
            seed: 0,
            out: PathBuf::from("runs/default"),
            prompts: None,
            data: DataConfig::default(),
            model: DetectorConfig::default(),
            reasoner: ReasonerConfig::default(),
            bank: BankConfig::default(),
            loss: LossConfig::default(),
            ablation: Ablation::FULL,
            optim: OptimConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::io(path, source))?;
        Self::from_toml(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        self.model.validate()?;
        if self.data.train_size == 0 || self.data.eval_size == 0 {
            return bad("data sizes must be >= 1");
        }
        if self.optim.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.optim.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(self.loss.relation_temperature > 0.0) {
            return bad("relation_temperature must be > 0");
        }
        if let Some(t) = self.eval.iou_threshold {
            if !(t > 0.0 && t <= 1.0) {
                return bad("iou_threshold must lie in (0, 1]");
            }
        }
        if self.eval.every == 0 {
            return bad("eval.every must be >= 1");
        }
        if self.model.num_classes != crate::synth::TARGET_CLASSES.len() {
            return bad("model.num_classes must equal the number of synthetic target classes (3)");
        }
        if matches!(&self.prompts, Some(p) if p.is_empty()) {
            return bad("prompts must not be empty");
        }
        Ok(())
    }

    pub fn iou_threshold(&self) -> f64 {
        self.eval.iou_threshold.unwrap_or(match self.style {
            DatasetStyle::UavdtLike => 0.7,
            DatasetStyle::VisdroneLike => 0.5,
        })
    }

    pub fn prompt_texts(&self) -> Vec<String> {
        self.prompts.clone().unwrap_or_else(|| default_prompts(self.style))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trip_and_overrides() {
        let mut c = RunConfig::default();
        c.optim.epochs = 3;
        c.ablation = Ablation::BASELINE;
        c.eval.iou_threshold = Some(0.5);
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        let c = RunConfig::from_toml("style = \"visdrone-like\"\n[ablation]\nreasoner = false\nrelation = true\n").unwrap();
        assert_eq!(c.iou_threshold(), 0.5);
        assert!(!c.ablation.reasoner);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[optim]\nlr = 1.0").is_err());
        assert!(RunConfig::from_toml("[optim]\nbatch_size = 0").is_err());
        assert!(RunConfig::from_toml("[model]\ndim = 30").is_err());
    }
}
