//! Finite-difference gradient suite over tensor ops, the relation loss, the
//! reasoner and a tiny end-to-end detector.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::train::Session;
use super::{Result, RunConfig};
use crate::bank::{build_bank, detection_categories, AttributeGrids, PromptTrainingConfig, SyntheticEmbedder};
use crate::detector::{Ablation, DetectorConfig};
use crate::nn::{Bindings, ParamStore};
use crate::reasoner::{DatasetStyle, Mode, ReasonerConfig};
use crate::relation::RelationTargets;
use crate::synth::{generate_sample, AttributeOverride, GroundTruth};
use crate::tensor::{check_gradients, Conv2dSpec, Graph, Tensor, Var, DEFAULT_FD_STEP};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradcheckEntry {
    fn new(name: &str, max_rel_error: f64, tolerance: f64) -> Self {
        Self { name: name.to_string(), max_rel_error, tolerance, passed: max_rel_error < tolerance }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<28} max rel err {:.3e} (tol {:.0e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_error,
            self.tolerance
        )
    }
}

pub const TENSOR_TOLERANCE: f64 = 1e-4;
pub const SOFTMAX_KL_TOLERANCE: f64 = 1e-5;
pub const RELATION_TOLERANCE: f64 = 1e-4;
pub const REASONER_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| { let z: f64 = StandardNormal.sample(rng); scale * z }).collect::<Vec<f64>>())
        .expect("positive shape")
}

/// Fixed random projection to a scalar so every output coordinate matters.
fn project(g: &mut Graph, out: Var, seed: u64) -> crate::tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random(&mut rng, &g.shape(out).to_vec(), 1.0));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

/// Maximum relative error of the analytic gradient of `loss` with respect
/// to every coordinate of the named store parameters (all when `names` is `None`).
/// Detached values are held at their unperturbed values.
pub fn store_gradcheck<F>(store: &ParamStore, names: Option<&[&str]>, loss: F) -> Result<f64>
where
    F: Fn(&mut Graph, &mut Bindings) -> Result<Var>,
{
    let mut g = Graph::new();
    let mut p = Bindings::new(store);
    let out = loss(&mut g, &mut p)?;
    let grads = g.backward(out)?;
    let analytic: BTreeMap<String, Tensor> = p.gradients(&grads);
    let detached = g.detached_values().to_vec();
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_detached(detached.clone());
        let mut p = Bindings::frozen(s);
        let out = loss(&mut g, &mut p)?;
        Ok(g.value(out).item())
    };
    let selected: Vec<String> = match names {
        Some(n) => n.iter().map(|s| s.to_string()).collect(),
        None => store.names().map(str::to_string).collect(),
    };
    let h = DEFAULT_FD_STEP;
    let mut work = store.clone();
    let mut worst = 0.0f64;
    for name in &selected {
        let zero = Tensor::zeros(store.get(name).expect("known parameter").shape());
        let a = analytic.get(name).unwrap_or(&zero);
        for i in 0..a.numel() {
            let orig = store.get(name).expect("known parameter").data()[i];
            work.get_mut(name).expect("known").data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(name).expect("known").data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(name).expect("known").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max((a.data()[i] - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}

fn tensor_checks() -> Result<Vec<GradcheckEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = Vec::new();
    let a = random(&mut rng, &[3, 4], 1.0);
    let b = random(&mut rng, &[4, 5], 1.0);
    let r = check_gradients(
        |g, v| {
            let m = g.matmul(v[0], v[1])?;
            project(g, m, 1)
        },
        &[a, b],
        DEFAULT_FD_STEP,
    )?;
    out.push(GradcheckEntry::new("tensor: matmul", r.max_rel_error, TENSOR_TOLERANCE));

    let x = random(&mut rng, &[3, 6], 1.0);
    let gamma = random(&mut rng, &[6], 1.0);
    let beta = random(&mut rng, &[6], 1.0);
    let r = check_gradients(
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(g, y, 2)
        },
        &[x, gamma, beta],
        DEFAULT_FD_STEP,
    )?;
    out.push(GradcheckEntry::new("tensor: layer_norm", r.max_rel_error, TENSOR_TOLERANCE));

    let img = random(&mut rng, &[2, 5, 5], 1.0);
    let w = random(&mut rng, &[3, 2, 3, 3], 0.5);
    let bias = random(&mut rng, &[3], 0.5);
    let r = check_gradients(
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], Conv2dSpec { stride: 2, pad: 1 })?;
            project(g, y, 3)
        },
        &[img, w, bias],
        DEFAULT_FD_STEP,
    )?;
    out.push(GradcheckEntry::new("tensor: conv2d", r.max_rel_error, TENSOR_TOLERANCE));

    let logits = random(&mut rng, &[4, 5], 1.0);
    let r = check_gradients(
        |g, v| g.cross_entropy(v[0], &[0, 4, 2, 4], Some(&[1.0, 0.1, 1.0, 0.1])),
        &[logits],
        DEFAULT_FD_STEP,
    )?;
    out.push(GradcheckEntry::new("tensor: cross_entropy", r.max_rel_error, TENSOR_TOLERANCE));

    let rows = random(&mut rng, &[3, 4], 1.0);
    let r = check_gradients(
        |g, v| {
            let n = g.normalize_rows(v[0])?;
            project(g, n, 4)
        },
        &[rows],
        DEFAULT_FD_STEP,
    )?;
    out.push(GradcheckEntry::new("tensor: normalize_rows", r.max_rel_error, TENSOR_TOLERANCE));

    let target = crate::tensor::softmax(&random(&mut rng, &[1, 7], 1.0), 1.0)?;
    let q = random(&mut rng, &[1, 7], 1.0);
    let r = check_gradients(
        |g, v| {
            let s = g.softmax(v[0], 0.5)?;
            g.kl_divergence(&target, s)
        },
        &[q],
        DEFAULT_FD_STEP,
    )?;
    out.push(GradcheckEntry::new("tensor: softmax+KL", r.max_rel_error, SOFTMAX_KL_TOLERANCE));
    Ok(out)
}

fn small_bank(dim: usize, variants: usize) -> Result<crate::bank::FrozenBank> {
    let embedder = SyntheticEmbedder { dim, intra_spread: 0.3, seed: 3, ..Default::default() };
    let training = PromptTrainingConfig { epochs: 5, ..Default::default() };
    Ok(build_bank(&detection_categories(), &AttributeGrids::default(), variants, &embedder, &training)?.0)
}

fn relation_check() -> Result<GradcheckEntry> {
    let bank = small_bank(16, 4)?;
    let targets = RelationTargets::new(&bank, 0.5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs: Vec<Tensor> = (0..6).map(|_| random(&mut rng, &[1, 16], 1.0)).collect();
    let r = check_gradients(
        |g, v| {
            let layers = vec![vec![(0, v[0]), (1, v[1]), (2, v[2])], vec![(0, v[3]), (2, v[4]), (1, v[5])]];
            targets.per_layer_relation_loss(g, &layers).map_err(|e| match e {
                crate::relation::RelationError::Tensor(t) => t,
                other => crate::tensor::TensorError::InvalidArgument { op: "relation", reason: other.to_string() },
            })
        },
        &inputs,
        DEFAULT_FD_STEP,
    )?;
    Ok(GradcheckEntry::new("relation loss", r.max_rel_error, RELATION_TOLERANCE))
}

/// Tiny model used by the end-to-end check.
pub fn tiny_config() -> RunConfig {
    RunConfig {
        model: DetectorConfig {
            image_size: 16,
            backbone_channels: [4, 4, 8],
            dim: 16,
            heads: 2,
            ffn_hidden: 16,
            encoder_layers: 1,
            decoder_layers: 2,
            queries: 4,
            num_classes: 3,
        },
        reasoner: ReasonerConfig { heads: 2, guidance_channels: 4 },
        ablation: Ablation::FULL,
        ..RunConfig::default()
    }
}

/// A synthetic scene downsampled 4× to 16×16, with its annotations.
pub fn tiny_sample(seed: u64) -> (Tensor, GroundTruth) {
    let s = generate_sample(seed, DatasetStyle::UavdtLike, AttributeOverride::default());
    let (big, small) = (s.image.size, s.image.size / 4);
    let mut data = vec![0.0; 3 * small * small];
    for c in 0..3 {
        for y in 0..small {
            for x in 0..small {
                let mut acc = 0.0;
                for dy in 0..4 {
                    for dx in 0..4 {
                        acc += s.image.get(c, 4 * y + dy, 4 * x + dx);
                    }
                }
                data[(c * small + y) * small + x] = acc / 16.0;
            }
        }
    }
    let _ = big;
    let mut gt = s.ground_truth;
    gt.boxes.truncate(4);
    gt.categories.truncate(4);
    (Tensor::new(vec![3, small, small], data).expect("CHW"), gt)
}

fn reasoner_check(session: &Session, store: &ParamStore, image: &Tensor, gt: &GroundTruth) -> Result<GradcheckEntry> {
    let reasoner = session.detector.reasoner().expect("reasoner enabled");
    let prompt = session.pool.first().clone();
    let names: Vec<String> = store.names().filter(|n| n.starts_with("reasoner.")).map(str::to_string).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let err = store_gradcheck(store, Some(&names), |g, p| {
        let tokens = session.detector.core().backbone(g, p, image)?;
        let enc = session.detector.core().encode(g, p, tokens)?;
        let out = reasoner.forward(g, p, enc, &prompt)?;
        let guidance = reasoner.scene_guidance_loss(g, p, &[out.output], &[gt.attributes], Mode::Train)?;
        let proj = project(g, out.output, 9)?;
        Ok(g.add(guidance, proj)?)
    })?;
    Ok(GradcheckEntry::new("reasoner (V2L + guidance)", err, REASONER_TOLERANCE))
}

fn end_to_end_check(session: &Session, store: &ParamStore, batch: &[(Tensor, GroundTruth)]) -> Result<GradcheckEntry> {
    let prompt = session.pool.first().clone();
    let refs: Vec<(&Tensor, &GroundTruth)> = batch.iter().map(|(i, g)| (i, g)).collect();
    let err = store_gradcheck(store, None, |g, p| Ok(session.build_loss(g, p, &refs, &prompt)?.total))?;
    Ok(GradcheckEntry::new("end-to-end tiny detector", err, END_TO_END_TOLERANCE))
}

/// Runs every check; entries are in a fixed order.
pub fn run_gradcheck() -> Result<Vec<GradcheckEntry>> {
    let mut entries = tensor_checks()?;
    entries.push(relation_check()?);
    let config = tiny_config();
    let bank = small_bank(8, 2)?;
    let session = Session::new(config, Some(&bank))?;
    let mut store = session.init_params();
    // Perturb the zero-initialised output projection so gradients reach the V2L path.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let zeroed: Vec<String> =
        store.iter().filter(|(_, t)| t.data().iter().all(|&v| v == 0.0)).map(|(n, _)| n.to_string()).collect();
    for name in zeroed {
        let shape = store.get(&name).expect("listed").shape().to_vec();
        store.insert(&name, random(&mut rng, &shape, 0.1));
    }
    let batch = vec![tiny_sample(21), tiny_sample(22)];
    entries.push(reasoner_check(&session, &store, &batch[0].0, &batch[0].1)?);
    entries.push(end_to_end_check(&session, &store, &batch)?);
    Ok(entries)
}
