use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::tensor::{Gradients, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    Normal(f64),
    /// Glorot uniform over the first two extents (fan_in, fan_out).
    Xavier,
    /// He normal with the given fan-in.
    Kaiming(usize),
}

/// 64-bit FNV-1a, used to derive a per-parameter RNG stream from its name.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// RNG keyed by `(seed, name)`: the value of one parameter never depends on
/// which other parameters exist.
pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(fnv1a(name.as_bytes()) ^ seed.rotate_left(17))
}

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn init(&mut self, seed: u64, name: &str, shape: &[usize], init: Init) {
        let n: usize = shape.iter().product();
        let mut rng = named_rng(seed, name);
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Constant(c) => vec![c; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            Init::Xavier => {
                let (fan_in, fan_out) = (shape[0], shape.get(1).copied().unwrap_or(1));
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let d = Uniform::new_inclusive(-bound, bound).expect("valid bound");
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            Init::Kaiming(fan_in) => {
                let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
        };
        self.tensors.insert(name.to_string(), Tensor::from_parts(shape.to_vec(), data));
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Binds store parameters onto a graph on first use and maps gradients back
/// to parameter names after the backward pass.
pub struct Bindings<'s> {
    store: &'s ParamStore,
    bound: BTreeMap<String, Var>,
    trainable: bool,
}

impl<'s> Bindings<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, bound: BTreeMap::new(), trainable: true }
    }

    /// Binds every parameter as a constant; used for inference.
    pub fn frozen(store: &'s ParamStore) -> Self {
        Self { store, bound: BTreeMap::new(), trainable: false }
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let t = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
            .clone();
        let v = g.leaf(t, self.trainable);
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.bound.keys().map(String::as_str)
    }

    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(name).expect("bound").shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_keyed_by_name_not_order() {
        let mut a = ParamStore::new();
        a.init(7, "x", &[3, 3], Init::Xavier);
        a.init(7, "y", &[4], Init::Normal(0.1));
        let mut b = ParamStore::new();
        b.init(7, "y", &[4], Init::Normal(0.1));
        b.init(7, "z", &[2], Init::Normal(0.1));
        b.init(7, "x", &[3, 3], Init::Xavier);
        assert_eq!(a.get("x"), b.get("x"));
        assert_eq!(a.get("y"), b.get("y"));
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut a = ParamStore::new();
        a.init(1, "w", &[2, 2], Init::Normal(1.0));
        let before = a.fingerprint();
        a.get_mut("w").unwrap().data_mut()[0] += 1e-12;
        assert_ne!(before, a.fingerprint());
    }
}
