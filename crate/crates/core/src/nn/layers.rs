//! Parameterized building blocks. Each block has an `init_*` function that
//! registers its parameters under a name prefix and a forward function that
//! binds them from a [`Bindings`].

use super::params::{Bindings, Init, ParamStore};
use crate::tensor::{Graph, Result, Var};

/// `x W + b` with `W: [in, out]`.
pub fn init_linear(store: &mut ParamStore, seed: u64, prefix: &str, input: usize, output: usize) {
    store.init(seed, &format!("{prefix}.weight"), &[input, output], Init::Xavier);
    store.init(seed, &format!("{prefix}.bias"), &[output], Init::Zeros);
}

pub fn init_linear_zero(store: &mut ParamStore, seed: u64, prefix: &str, input: usize, output: usize) {
    store.init(seed, &format!("{prefix}.weight"), &[input, output], Init::Zeros);
    store.init(seed, &format!("{prefix}.bias"), &[output], Init::Zeros);
}

pub fn linear(g: &mut Graph, p: &mut Bindings, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(g, &format!("{prefix}.weight"));
    let b = p.var(g, &format!("{prefix}.bias"));
    let xw = g.matmul(x, w)?;
    g.add_bias(xw, b)
}

pub fn init_layer_norm(store: &mut ParamStore, seed: u64, prefix: &str, dim: usize) {
    store.init(seed, &format!("{prefix}.gamma"), &[dim], Init::Ones);
    store.init(seed, &format!("{prefix}.beta"), &[dim], Init::Zeros);
}

pub fn layer_norm(g: &mut Graph, p: &mut Bindings, prefix: &str, x: Var) -> Result<Var> {
    let gamma = p.var(g, &format!("{prefix}.gamma"));
    let beta = p.var(g, &format!("{prefix}.beta"));
    g.layer_norm(x, gamma, beta, 1e-5)
}

/// Two-layer perceptron with a ReLU in between.
pub fn init_mlp(store: &mut ParamStore, seed: u64, prefix: &str, input: usize, hidden: usize, output: usize) {
    init_linear(store, seed, &format!("{prefix}.fc1"), input, hidden);
    init_linear(store, seed, &format!("{prefix}.fc2"), hidden, output);
}

pub fn mlp(g: &mut Graph, p: &mut Bindings, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, p, &format!("{prefix}.fc1"), x)?;
    let h = g.relu(h);
    linear(g, p, &format!("{prefix}.fc2"), h)
}

/// Transformer feed-forward block (GELU).
pub fn init_ffn(store: &mut ParamStore, seed: u64, prefix: &str, dim: usize, hidden: usize) {
    init_linear(store, seed, &format!("{prefix}.fc1"), dim, hidden);
    init_linear(store, seed, &format!("{prefix}.fc2"), hidden, dim);
}

pub fn ffn(g: &mut Graph, p: &mut Bindings, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, p, &format!("{prefix}.fc1"), x)?;
    let h = g.gelu(h);
    linear(g, p, &format!("{prefix}.fc2"), h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub dim: usize,
    pub heads: usize,
}

impl AttentionShape {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Output of [`multi_head_attention`]: the projected output and the
/// per-head attention weight matrices (`[queries, keys]`, rows sum to 1).
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

pub fn init_attention(store: &mut ParamStore, seed: u64, prefix: &str, shape: AttentionShape, zero_output: bool) {
    for proj in ["q", "k", "v"] {
        init_linear(store, seed, &format!("{prefix}.{proj}"), shape.dim, shape.dim);
    }
    if zero_output {
        init_linear_zero(store, seed, &format!("{prefix}.out"), shape.dim, shape.dim);
    } else {
        init_linear(store, seed, &format!("{prefix}.out"), shape.dim, shape.dim);
    }
}

/// Multi-head scaled dot-product attention.
///
/// `query: [Lq, dim]`, `key: [Lk, dim]`, `value: [Lk, dim]`. Positional
/// terms, if any, must already be folded into `query`/`key`.
pub fn multi_head_attention(
    g: &mut Graph,
    p: &mut Bindings,
    prefix: &str,
    shape: AttentionShape,
    query: Var,
    key: Var,
    value: Var,
) -> Result<AttentionOutput> {
    let q = linear(g, p, &format!("{prefix}.q"), query)?;
    let k = linear(g, p, &format!("{prefix}.k"), key)?;
    let v = linear(g, p, &format!("{prefix}.v"), value)?;
    let dh = shape.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(shape.heads);
    let mut weights = Vec::with_capacity(shape.heads);
    for h in 0..shape.heads {
        let (qh, kh, vh) = if shape.heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice(q, 1, h * dh, dh)?,
                g.slice(k, 1, h * dh, dh)?,
                g.slice(v, 1, h * dh, dh)?,
            )
        };
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores, 1.0)?;
        heads.push(g.matmul(attn, vh)?);
        weights.push(attn);
    }
    let merged = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
    let output = linear(g, p, &format!("{prefix}.out"), merged)?;
    Ok(AttentionOutput { output, weights })
}
