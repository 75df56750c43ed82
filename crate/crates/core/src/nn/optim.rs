use std::collections::BTreeMap;

use super::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear warm-up length in optimizer steps.
    pub warmup_steps: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Cosine decay to zero over this many steps after warm-up; `None` keeps the rate constant.
    pub decay_steps: Option<usize>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            warmup_steps: 0,
            clip_norm: Some(1.0),
            decay_steps: None,
        }
    }
}

/// AdamW with decoupled weight decay and linear warm-up.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    step: usize,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        let (w, lr) = (self.config.warmup_steps, self.config.lr);
        if self.step < w {
            return lr * (self.step + 1) as f64 / w as f64;
        }
        match self.config.decay_steps {
            Some(n) if n > 0 => {
                let t = ((self.step - w) as f64 / n as f64).min(1.0);
                0.5 * lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
            _ => lr,
        }
    }

    /// Applies one update. Parameters without a gradient entry are untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        let c = self.config;
        let lr = self.current_lr();
        self.step += 1;
        let clip = match c.clip_norm {
            Some(max) => {
                let norm = grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * clip;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                *w -= lr * (update + c.weight_decay * *w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Init;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.init(0, "x", &[2], Init::Constant(3.0));
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.0, clip_norm: None, ..Default::default() });
        for _ in 0..500 {
            let x = store.get("x").unwrap().clone();
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), x.map(|v| 2.0 * (v - 1.0)));
            opt.step(&mut store, &grads);
        }
        for &v in store.get("x").unwrap().data() {
            assert!((v - 1.0).abs() < 1e-2, "{v}");
        }
    }

    #[test]
    fn warmup_ramps_linearly() {
        let mut opt = AdamW::new(AdamWConfig { lr: 1.0, warmup_steps: 4, ..Default::default() });
        assert_eq!(opt.current_lr(), 0.25);
        let mut store = ParamStore::new();
        store.init(0, "x", &[1], Init::Zeros);
        for _ in 0..4 {
            opt.step(&mut store, &BTreeMap::new());
        }
        assert_eq!(opt.current_lr(), 1.0);
    }

    #[test]
    fn cosine_decay_after_warmup() {
        let mut opt = AdamW::new(AdamWConfig { lr: 2.0, warmup_steps: 2, decay_steps: Some(4), ..Default::default() });
        let mut store = ParamStore::new();
        store.init(0, "x", &[1], Init::Zeros);
        let mut rates = Vec::new();
        for _ in 0..8 {
            rates.push(opt.current_lr());
            opt.step(&mut store, &BTreeMap::new());
        }
        let half = 0.5 * 2.0 * (1.0 + (std::f64::consts::PI / 4.0).cos());
        assert_eq!(rates[..3], [1.0, 2.0, 2.0]);
        assert!((rates[3] - half).abs() < 1e-12);
        assert!((rates[4] - 1.0).abs() < 1e-12);
        assert!(rates[6].abs() < 1e-12 && rates[7].abs() < 1e-12);
    }
}
