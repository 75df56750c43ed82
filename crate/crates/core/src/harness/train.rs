//! End-to-end training runs.
//!
//! A run directory holds:
//!
//! - `config.toml`: the resolved configuration
//! - `bank.json`: the frozen representation bank
//! - `metrics.csv`: one row per epoch (schema line, then a header)
//! - `checkpoint.json`: parameters after the last completed epoch
//! - `summary.json`: initial and final AP, parameter count, fingerprints
//!
//! AP values in these files are percentages.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_file, write_json, HarnessError, Result, RunConfig};
use crate::bank::{build_bank, detection_categories, load_frozen, AttributeGrids, FrozenBank, SyntheticEmbedder};
use crate::detector::{
    checkpoint, detection_loss, proposal_loss, evaluate, extract_object_features, match_layers, total_loss, ApReport, Detection,
    Detector, ImageRecord,
};
use crate::nn::optim::AdamW;
use crate::nn::{Bindings, ParamStore};
use crate::reasoner::{Mode, PromptPool, PromptVocabulary, SceneContextPrompt};
use crate::relation::RelationTargets;
use crate::synth::{generate_split, AttributeDistribution, GroundTruth, Manifest, SceneSample, TARGET_CLASSES};
use crate::tensor::{Graph, Tensor, Var};

pub const METRICS_SCHEMA: &str = "langdet-metrics/1";
pub const METRICS_HEADER: &str = "epoch,loss_total,loss_cls,loss_bbox,loss_relation,loss_guidance,ap";

/// A generated split with its images as `[3, S, S]` tensors.
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub ground_truth: Vec<GroundTruth>,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn from_samples(samples: &[SceneSample], manifest: Manifest) -> Self {
        Self {
            images: samples.iter().map(image_tensor).collect(),
            ground_truth: samples.iter().map(|s| s.ground_truth.clone()).collect(),
            manifest,
        }
    }

    pub fn generate(size: usize, seed: u64, config: &RunConfig) -> Result<Self> {
        let (samples, manifest) = generate_split(size, seed, config.style, &AttributeDistribution::uniform(config.style))?;
        Ok(Self::from_samples(&samples, manifest))
    }

    pub fn from_manifest(manifest: Manifest) -> Result<Self> {
        let samples = manifest.regenerate_all()?;
        Ok(Self::from_samples(&samples, manifest))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub fn image_tensor(sample: &SceneSample) -> Tensor {
    let s = sample.image.size;
    Tensor::new(vec![3, s, s], sample.image.data.clone()).expect("CHW image")
}

/// Batch-mean loss terms of one optimizer step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub cls: f64,
    pub bbox: f64,
    pub relation: f64,
    pub guidance: f64,
}

impl StepLosses {
    fn accumulate(&mut self, o: &StepLosses, weight: f64) {
        self.total += weight * o.total;
        self.cls += weight * o.cls;
        self.bbox += weight * o.bbox;
        self.relation += weight * o.relation;
        self.guidance += weight * o.guidance;
    }
}

/// Graph nodes of the training objective; absent terms are `None`.
pub struct LossVars {
    pub total: Var,
    pub cls: Var,
    pub bbox: Var,
    pub relation: Option<Var>,
    pub guidance: Option<Var>,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> StepLosses {
        let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        StepLosses {
            total: g.value(self.total).item(),
            cls: g.value(self.cls).item(),
            bbox: g.value(self.bbox).item(),
            relation: value(self.relation),
            guidance: value(self.guidance),
        }
    }
}

/// Everything needed to train and evaluate one configuration.
pub struct Session {
    pub config: RunConfig,
    pub detector: Detector,
    pub relation: Option<RelationTargets>,
    pub pool: PromptPool,
}

pub fn build_run_bank(config: &RunConfig) -> Result<FrozenBank> {
    let b = &config.bank;
    let embedder = SyntheticEmbedder {
        dim: b.embed_dim,
        intra_spread: b.intra_spread,
        inter_separation: b.inter_separation,
        orthogonal_centroids: false,
        seed: b.seed,
    };
    let (bank, outcome) =
        build_bank(&detection_categories(), &AttributeGrids::default(), b.variants, &embedder, &b.prompt)?;
    log::info!(
        "bank built: {} members, contrastive loss {:.4} -> {:.4}",
        bank.len(),
        outcome.curve.first().copied().unwrap_or(f64::NAN),
        outcome.curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(bank)
}

impl Session {
    pub fn new(config: RunConfig, bank: Option<&FrozenBank>) -> Result<Self> {
        config.validate()?;
        let texts = config.prompt_texts();
        let vocab = PromptVocabulary::from_prompts(&texts);
        let pool = PromptPool::new(&vocab, &texts)?;
        let relation = match (config.ablation.relation, bank) {
            (false, _) => None,
            (true, None) => return Err(HarnessError::Config("relation loss enabled but no bank given".into())),
            (true, Some(bank)) => {
                let targets: Vec<&str> = bank.target_categories().into_iter().map(|i| bank.category_name(i)).collect();
                if targets != TARGET_CLASSES {
                    return Err(HarnessError::Incompatible(format!(
                        "bank target categories {targets:?} do not match detector classes {TARGET_CLASSES:?}"
                    )));
                }
                Some(RelationTargets::new(bank, config.loss.relation_temperature)?)
            }
        };
        let bank_dim = bank.map_or(config.bank.embed_dim, |b| b.dim());
        let detector =
            Detector::new(config.model, config.ablation, config.reasoner, config.style, vocab.len(), bank_dim)?;
        Ok(Self { config, detector, relation, pool })
    }

    pub fn init_params(&self) -> ParamStore {
        self.detector.init(self.config.seed)
    }

    /// Builds the batch-mean training objective on `g`.
    pub fn build_loss(
        &self,
        g: &mut Graph,
        p: &mut Bindings,
        batch: &[(&Tensor, &GroundTruth)],
        prompt: &SceneContextPrompt,
    ) -> Result<LossVars> {
        let weights = self.config.loss.weights();
        let mut cls_terms = Vec::with_capacity(batch.len());
        let mut box_terms = Vec::with_capacity(batch.len());
        let mut features = Vec::with_capacity(batch.len());
        let mut assignments = Vec::with_capacity(batch.len());
        let mut reasoner_out = Vec::new();
        for &(image, gt) in batch {
            let out = self.detector.forward(g, p, image, Some(prompt))?;
            let a = match_layers(g, &out.detection, gt, weights.matching)?;
            let (c, b) = detection_loss(g, &out.detection, gt, &a, &weights)?;
            let (pc, pb) = proposal_loss(g, &out.detection, gt, &weights)?;
            cls_terms.extend([c, pc]);
            box_terms.extend([b, pb]);
            features.push(out.detection.features);
            assignments.push(a);
            reasoner_out.extend(out.reasoner.map(|r| r.output));
        }
        let inv = 1.0 / batch.len() as f64;
        let cls = g.elementwise_sum(&cls_terms)?;
        let cls = g.scale(cls, inv);
        let bbox = g.elementwise_sum(&box_terms)?;
        let bbox = g.scale(bbox, inv);
        let relation = match &self.relation {
            Some(targets) => {
                let layers = self.config.model.decoder_layers;
                let mut per_layer = Vec::with_capacity(layers);
                for l in 0..layers {
                    let items: Vec<_> =
                        (0..batch.len()).map(|b| (features[b][l], &assignments[b][l], batch[b].1)).collect();
                    per_layer.push(extract_object_features(g, p, &items, self.config.model.num_classes)?);
                }
                Some(targets.per_layer_relation_loss(g, &per_layer)?)
            }
            None => None,
        };
        let attrs: Vec<_> = batch.iter().map(|b| b.1.attributes).collect();
        let guidance = if reasoner_out.is_empty() {
            None
        } else {
            self.detector.guidance_loss(g, p, &reasoner_out, &attrs, Mode::Train)?
        };
        let total = total_loss(g, cls, bbox, relation, guidance, weights.guidance)?;
        Ok(LossVars { total, cls, bbox, relation, guidance })
    }

    /// One optimizer step on `batch`. Returns `Ok(Err(what))` without touching
    /// the store when the loss or a gradient is non-finite.
    pub fn train_step(
        &self,
        store: &mut ParamStore,
        opt: &mut AdamW,
        batch: &[(&Tensor, &GroundTruth)],
        rng: &mut ChaCha8Rng,
    ) -> Result<std::result::Result<StepLosses, &'static str>> {
        let prompt = self.pool.sample(rng).clone();
        let mut g = Graph::new();
        let mut p = Bindings::new(store);
        let vars = self.build_loss(&mut g, &mut p, batch, &prompt)?;
        let losses = vars.values(&g);
        if !losses.total.is_finite() {
            return Ok(Err("loss"));
        }
        let grads = g.backward(vars.total)?;
        let named = p.gradients(&grads);
        drop(p);
        if named.values().any(|t| !t.is_finite()) {
            return Ok(Err("gradient"));
        }
        opt.step(store, &named);
        Ok(Ok(losses))
    }

    /// Final-layer detections for every image, using the first prompt of the pool.
    pub fn predict(&self, store: &ParamStore, images: &[Tensor]) -> Result<Vec<Vec<Detection>>> {
        let prompt = self.pool.first();
        images.iter().map(|img| Ok(self.detector.predict(store, img, Some(prompt))?)).collect()
    }

    pub fn evaluate(&self, store: &ParamStore, data: &Dataset) -> Result<(Vec<ImageRecord>, ApReport)> {
        let preds = self.predict(store, &data.images)?;
        let nc = self.config.model.num_classes;
        let records = evaluate(&preds, &data.ground_truth, self.config.iou_threshold(), nc);
        let report = ApReport::from_records(&records, nc);
        Ok((records, report))
    }

    /// Trains for `config.optim.epochs`, calling `on_epoch` after each epoch
    /// with the epoch's mean losses and, on evaluation epochs, the eval report.
    pub fn fit(
        &self,
        store: &mut ParamStore,
        train: &Dataset,
        eval: &Dataset,
        mut on_epoch: impl FnMut(usize, &StepLosses, Option<&ApReport>, &ParamStore) -> Result<()>,
    ) -> Result<()> {
        let o = &self.config.optim;
        let mut opt = AdamW::new(o.adamw(train.len().div_ceil(o.batch_size)));
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x7EA1_0000);
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 1..=o.epochs {
            let start = Instant::now();
            order.shuffle(&mut rng);
            let mut mean = StepLosses::default();
            let batches: Vec<&[usize]> = order.chunks(o.batch_size).collect();
            for (step, idx) in batches.iter().enumerate() {
                let batch: Vec<_> = idx.iter().map(|&i| (&train.images[i], &train.ground_truth[i])).collect();
                match self.train_step(store, &mut opt, &batch, &mut rng)? {
                    Ok(l) => mean.accumulate(&l, idx.len() as f64 / train.len() as f64),
                    Err(what) => return Err(HarnessError::Diverged { what, epoch, step }),
                }
            }
            let report = if epoch % self.config.eval.every == 0 || epoch == o.epochs {
                Some(self.evaluate(store, eval)?.1)
            } else {
                None
            };
            log::info!(
                "[{}] epoch {epoch}/{}: loss {:.4} (cls {:.4} bbox {:.4} rel {:.4} guid {:.4}) AP {} in {:.1}s",
                self.config.ablation.label(),
                o.epochs,
                mean.total,
                mean.cls,
                mean.bbox,
                mean.relation,
                mean.guidance,
                super::fmt_opt(report.as_ref().and_then(|r| r.mean).map(|v| 100.0 * v), 2),
                start.elapsed().as_secs_f64()
            );
            on_epoch(epoch, &mean, report.as_ref(), store)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema: String,
    pub ablation: String,
    pub seed: u64,
    pub epochs: usize,
    pub iou_threshold: f64,
    /// mAP (percent) of the freshly initialised model.
    pub initial_ap: Option<f64>,
    /// mAP (percent) after the last epoch.
    pub final_ap: Option<f64>,
    pub final_per_class_ap: Vec<Option<f64>>,
    pub parameter_count: usize,
    pub bank_fingerprint: String,
    pub checkpoint_fingerprint: String,
}

/// Result of a completed run.
pub struct RunOutcome {
    pub summary: RunSummary,
    /// Final per-image match records on the eval split.
    pub records: Vec<ImageRecord>,
    pub params: ParamStore,
}

impl RunOutcome {
    /// Final mAP (percent) over the eval images at `indices`.
    pub fn subset_ap(&self, indices: &[usize], num_classes: usize) -> Option<f64> {
        pct(ApReport::subset(&self.records, indices, num_classes).mean)
    }
}

fn pct(v: Option<f64>) -> Option<f64> {
    v.map(|x| 100.0 * x)
}

pub(crate) fn metrics_row(epoch: usize, l: &StepLosses, ap: Option<f64>) -> String {
    let ap = ap.map_or_else(String::new, |v| v.to_string());
    format!("{epoch},{},{},{},{},{},{ap}\n", l.total, l.cls, l.bbox, l.relation, l.guidance)
}

/// Loads the configured bank or builds one, saving it to `out/bank.json`.
pub fn prepare_bank(config: &RunConfig, out: &Path) -> Result<FrozenBank> {
    let bank = match &config.bank.path {
        Some(path) if path.exists() => load_frozen(path)?,
        _ => build_run_bank(config)?,
    };
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    bank.save(out.join("bank.json"))?;
    Ok(bank)
}

/// Full training run writing the files described in the module docs under `out`.
pub fn run_training(config: &RunConfig, out: &Path) -> Result<RunOutcome> {
    config.validate()?;
    let bank = prepare_bank(config, out)?;
    let train = Dataset::generate(config.data.train_size, config.data.train_seed, config)?;
    let eval = Dataset::generate(config.data.eval_size, config.data.eval_seed, config)?;
    run_training_on(config, out, &bank, &train, &eval)
}

pub fn run_training_on(
    config: &RunConfig,
    out: &Path,
    bank: &FrozenBank,
    train: &Dataset,
    eval: &Dataset,
) -> Result<RunOutcome> {
    write_file(&out.join("config.toml"), config.to_toml())?;
    bank.save(out.join("bank.json"))?;
    let session = Session::new(config.clone(), Some(bank))?;
    let mut store = session.init_params();
    let ckpt = out.join("checkpoint.json");
    checkpoint::save(&store, &ckpt)?;
    let initial = session.evaluate(&store, eval)?.1;
    let mut csv = format!("# schema={METRICS_SCHEMA}\n{METRICS_HEADER}\n");
    let metrics = out.join("metrics.csv");
    write_file(&metrics, &csv)?;
    let fit = session.fit(&mut store, train, eval, |epoch, losses, report, params| {
        csv.push_str(&metrics_row(epoch, losses, report.and_then(|r| pct(r.mean))));
        write_file(&metrics, &csv)?;
        Ok(checkpoint::save(params, &ckpt)?)
    });
    if let Err(e) = fit {
        if matches!(e, HarnessError::Diverged { .. }) {
            checkpoint::save(&store, &ckpt)?;
        }
        log::error!("training aborted: {e}");
        return Err(e);
    }
    let (records, last) = session.evaluate(&store, eval)?;
    let summary = RunSummary {
        schema: "langdet-summary/1".into(),
        ablation: config.ablation.label(),
        seed: config.seed,
        epochs: config.optim.epochs,
        iou_threshold: config.iou_threshold(),
        initial_ap: pct(initial.mean),
        final_ap: pct(last.mean),
        final_per_class_ap: last.per_class.iter().map(|v| pct(*v)).collect(),
        parameter_count: store.numel(),
        bank_fingerprint: bank.fingerprint().to_string(),
        checkpoint_fingerprint: store.fingerprint(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    log::info!(
        "{}: AP {} -> {}",
        summary.ablation,
        super::fmt_opt(summary.initial_ap, 2),
        super::fmt_opt(summary.final_ap, 2)
    );
    Ok(RunOutcome { summary, records, params: store })
}
