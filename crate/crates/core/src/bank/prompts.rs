//! Supervised contrastive training of the categorical prompts.
//!
//! For anchor `a` with positives `P(a)` (other members of its category) the
//! loss is `-1/|P(a)| Σ_p log softmax_{k≠a}(cos(z_a, z_k) / τ)_p`, averaged
//! over anchors that have at least one positive. Only `C` receives updates.

use serde::{Deserialize, Serialize};

use super::{BankError, CategoricalPrompts, LanguageEmbeddings};
use crate::nn::{AdamW, AdamWConfig};
use crate::tensor::{Graph, Result as TensorResult, Tensor, Var};

const DIAGONAL_MASK: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptTrainingConfig {
    pub temperature: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for PromptTrainingConfig {
    fn default() -> Self {
        Self { temperature: 0.1, epochs: 200, learning_rate: 1e-2, init_std: 0.02, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTrainingOutcome {
    pub initial: CategoricalPrompts,
    pub prompts: CategoricalPrompts,
    /// Loss before each update, followed by the final loss.
    pub curve: Vec<f64>,
}

/// Contrastive loss of `Z = D + C` with `prompts` bound as a `[N_C, E]` variable.
pub fn contrastive_loss(g: &mut Graph, d: &LanguageEmbeddings, prompts: Var, temperature: f64) -> TensorResult<Var> {
    let members = d.num_members();
    let cats = d.member_categories();
    let teacher = g.constant(Tensor::matrix(members, d.dim(), d.member_vectors().flatten().copied().collect())?);
    let expanded = g.gather_rows(prompts, &cats)?;
    let z = g.add(teacher, expanded)?;
    let u = g.normalize_rows(z)?;
    let ut = g.transpose(u)?;
    let sim = g.matmul(u, ut)?;
    let mut mask = vec![0.0; members * members];
    let mut weights = vec![0.0; members * members];
    let mut anchors = 0usize;
    for a in 0..members {
        mask[a * members + a] = DIAGONAL_MASK * temperature;
        let positives: Vec<usize> = (0..members).filter(|&p| p != a && cats[p] == cats[a]).collect();
        if positives.is_empty() {
            continue;
        }
        anchors += 1;
        for p in &positives {
            weights[a * members + p] = 1.0 / positives.len() as f64;
        }
    }
    let mask = g.constant(Tensor::matrix(members, members, mask)?);
    let masked = g.add(sim, mask)?;
    let logp = g.log_softmax(masked, temperature)?;
    let w = g.constant(Tensor::matrix(members, members, weights)?);
    let picked = g.mul(logp, w)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / anchors.max(1) as f64))
}

fn evaluate(d: &LanguageEmbeddings, c: &Tensor, temperature: f64) -> Result<(f64, Tensor), BankError> {
    let mut g = Graph::new();
    let p = g.param(c.clone());
    let loss = contrastive_loss(&mut g, d, p, temperature)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    Ok((value, grads.get(p).cloned().unwrap_or_else(|| Tensor::zeros(c.shape()))))
}

/// Trains `C` from a Gaussian(0, init_std²) start. `D` is never modified.
pub fn train_categorical_prompts(
    d: &LanguageEmbeddings,
    config: &PromptTrainingConfig,
) -> Result<PromptTrainingOutcome, BankError> {
    if !(config.temperature > 0.0) {
        return Err(BankError::InvalidConfig("contrastive temperature must be > 0".into()));
    }
    if !(config.learning_rate > 0.0) || !(config.init_std >= 0.0) {
        return Err(BankError::InvalidConfig("learning rate must be > 0 and init std >= 0".into()));
    }
    let (n, e) = (d.num_categories(), d.dim());
    let initial = CategoricalPrompts::random(n, e, config.init_std, config.seed);
    let mut store = crate::nn::ParamStore::new();
    store.insert("prompts", Tensor::matrix(n, e, initial.vectors.iter().flatten().copied().collect())?);
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.learning_rate,
        weight_decay: 0.0,
        clip_norm: None,
        ..AdamWConfig::default()
    });
    let mut curve = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..=config.epochs {
        let c = store.get("prompts").expect("registered above");
        let (loss, grad) = evaluate(d, c, config.temperature)?;
        if !loss.is_finite() {
            return Err(BankError::Diverged { epoch, loss });
        }
        curve.push(loss);
        if epoch == config.epochs {
            break;
        }
        log::debug!("prompt epoch {epoch}: loss {loss:.6}");
        opt.step(&mut store, &[("prompts".to_string(), grad)].into_iter().collect());
    }
    let c = store.get("prompts").expect("registered above");
    let prompts = CategoricalPrompts { vectors: (0..n).map(|i| c.row(i).to_vec()).collect() };
    Ok(PromptTrainingOutcome { initial, prompts, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::analysis::{cosine_stats, silhouette, Metric};
    use crate::bank::{curate_descriptions, merge_prompts, AttributeGrids, CategorySpec, SyntheticEmbedder};
    use crate::tensor::{finite_difference_check, DEFAULT_FD_STEP};

    fn bank(categories: usize, spread: f64, orthogonal: bool) -> LanguageEmbeddings {
        let cats: Vec<_> = (0..categories).map(|i| CategorySpec::target(&format!("c{i}"))).collect();
        let desc = curate_descriptions(&cats, &AttributeGrids::default(), 5, 2).unwrap();
        SyntheticEmbedder { dim: 16, intra_spread: spread, orthogonal_centroids: orthogonal, ..Default::default() }
            .embed(&desc)
            .unwrap()
    }

    fn config(epochs: usize) -> PromptTrainingConfig {
        PromptTrainingConfig { epochs, ..Default::default() }
    }

    #[test]
    fn zero_epochs_keeps_initialisation() {
        let d = bank(3, 0.3, false);
        let out = train_categorical_prompts(&d, &config(0)).unwrap();
        assert_eq!(out.prompts, out.initial);
        assert_eq!(out.curve.len(), 1);
        let z = merge_prompts(&d, &out.prompts).unwrap();
        for ((zk, dk), k) in z.iter().zip(d.member_vectors()).zip(d.member_categories()) {
            for ((a, b), c) in zk.iter().zip(dk).zip(&out.prompts.vectors[k]) {
                assert_eq!(*a, b + c);
            }
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let d = bank(3, 0.3, false);
        let c = Tensor::matrix(3, 16, CategoricalPrompts::random(3, 16, 0.1, 1).vectors.concat()).unwrap();
        let r = finite_difference_check(|g, x| contrastive_loss(g, &d, x, 0.1), &c, DEFAULT_FD_STEP).unwrap();
        assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
    }

    #[test]
    fn training_widens_margin_and_silhouette() {
        let d = bank(5, 0.3, false);
        let out = train_categorical_prompts(&d, &config(100)).unwrap();
        let before = merge_prompts(&d, &out.initial).unwrap();
        let after = merge_prompts(&d, &out.prompts).unwrap();
        let labels = d.member_categories();
        let (sb, sa) = (cosine_stats(&before, &labels), cosine_stats(&after, &labels));
        assert!(sa.margin() > sb.margin());
        assert!(silhouette(&after, &labels, Metric::Cosine) > silhouette(&before, &labels, Metric::Cosine));
        assert!(out.curve.last().unwrap() < &out.curve[0]);
    }

    #[test]
    fn separated_bank_margin_does_not_shrink() {
        let d = bank(4, 0.0, true);
        let out = train_categorical_prompts(&d, &config(50)).unwrap();
        let labels = d.member_categories();
        let before = cosine_stats(&merge_prompts(&d, &out.initial).unwrap(), &labels).margin();
        let after = cosine_stats(&merge_prompts(&d, &out.prompts).unwrap(), &labels).margin();
        assert!(after >= before - 1e-9, "{before} -> {after}");
    }

    #[test]
    fn training_is_deterministic_and_leaves_teacher_untouched() {
        let d = bank(3, 0.3, false);
        let snapshot = d.clone();
        let a = train_categorical_prompts(&d, &config(20)).unwrap();
        let b = train_categorical_prompts(&d, &config(20)).unwrap();
        assert_eq!(a, b);
        assert_eq!(d, snapshot);
    }

    #[test]
    fn rejects_bad_temperature() {
        let d = bank(2, 0.3, false);
        let cfg = PromptTrainingConfig { temperature: 0.0, ..Default::default() };
        assert!(train_categorical_prompts(&d, &cfg).is_err());
    }
}
