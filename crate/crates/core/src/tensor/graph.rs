use super::kernels::{self, ConvGeometry};
use super::{Result, Tensor, TensorError};
use super::{KL_FLOOR, NORM_EPS};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Convolution hyper-parameters (square kernels only).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    GatherRows { input: Var, index: Vec<usize> },
    LayerNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax { input: Var, temperature: f64 },
    LogSoftmax { input: Var, temperature: f64 },
    NormalizeRows { input: Var, norms: Vec<f64> },
    KlDiv { input: Var, target: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeometry, cols: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of tensor operations.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    detached: Vec<Tensor>,
    replay: Option<Vec<Tensor>>,
}

/// Gradients of a scalar loss with respect to every requires-grad leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose `detach` calls return `values` in order instead of the
    /// live inputs, so that a re-evaluation treats stopped gradients as
    /// constants. Falls back to the live value on a shape mismatch.
    pub fn with_detached(values: Vec<Tensor>) -> Self {
        Self { replay: Some(values), ..Self::default() }
    }

    /// Values produced by `detach` so far, in call order.
    pub fn detached_values(&self) -> &[Tensor] {
        &self.detached
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        // Nodes nobody differentiates through keep no backward state.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let value = self.value(a).zip_with(self.value(b), op, f)?;
        Ok(self.push(value, node, &[a, b]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, node: Op) -> Var {
        let value = self.value(a).map(f);
        self.push(value, node, &[a])
    }

    /// A copy of `a` that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let k = self.detached.len();
        let value = match self.replay.as_ref().and_then(|r| r.get(k)) {
            Some(v) if v.shape() == self.shape(a) => v.clone(),
            _ => self.value(a).clone(),
        };
        self.detached.push(value.clone());
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    /// Sum of one or more same-shape tensors.
    pub fn elementwise_sum(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms.split_first().ok_or(TensorError::InvalidArgument {
            op: "elementwise_sum",
            reason: "no operands".into(),
        })?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", left: sa.to_vec(), right: sb.to_vec() });
        }
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "add_bias", left: sa.to_vec(), right: sb.to_vec() });
        }
        let n = sa[1];
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, &y) in row.iter_mut().zip(&b) {
                *x += y;
            }
        }
        let value = Tensor::from_parts(sa.to_vec(), data);
        Ok(self.push(value, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            reason: "no operands".into(),
        })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidShape { op: "concat", shape: base, reason: format!("axis {axis} out of range") });
        }
        let mut axis_len = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch { op: "concat", left: base, right: s.to_vec() });
            }
            axis_len += s[axis];
        }
        let (outer, inner) = outer_inner(&base, axis);
        let mut data = Vec::with_capacity(outer * axis_len * inner);
        for o in 0..outer {
            for &v in inputs {
                let block = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_len;
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape,
                reason: format!("cannot take [{start}, {}) along axis {axis}", start + len),
            });
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.push(value, Op::Slice { input: a, axis, start }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        self.push(value, Op::Mean(a), &[a])
    }

    /// Column means of an `m x n` matrix, giving a length-`n` vector.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::InvalidShape { op: "mean_rows", shape, reason: "expected a matrix".into() });
        }
        let (m, n) = (shape[0], shape[1]);
        let mut data = vec![0.0; n];
        for row in self.value(a).data().chunks(n) {
            for (d, &x) in data.iter_mut().zip(row) {
                *d += x;
            }
        }
        data.iter_mut().for_each(|d| *d /= m as f64);
        let value = Tensor::from_parts(vec![n], data);
        Ok(self.push(value, Op::MeanRows(a), &[a]))
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || index.is_empty() {
            return Err(TensorError::InvalidShape { op: "gather_rows", shape, reason: "expected a matrix and a non-empty index".into() });
        }
        let (m, n) = (shape[0], shape[1]);
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(TensorError::InvalidArgument { op: "gather_rows", reason: format!("row {bad} out of range for {m} rows") });
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let value = Tensor::from_parts(vec![index.len(), n], data);
        Ok(self.push(value, Op::GatherRows { input: a, index: index.to_vec() }, &[a]))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().unwrap_or(&0);
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(TensorError::ShapeMismatch { op: "layer_norm", left: shape, right: self.shape(gamma).to_vec() });
        }
        let x = self.value(a).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = x.len() / n;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::LayerNorm { input: a, gamma, beta, xhat, inv_std }, &[a, gamma, beta]))
    }

    fn check_temperature(op: &'static str, temperature: f64) -> Result<()> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(TensorError::InvalidArgument { op, reason: format!("temperature must be positive, got {temperature}") });
        }
        Ok(())
    }

    /// `softmax(x / temperature)` along the last axis.
    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        Self::check_temperature("softmax", temperature)?;
        let t = self.value(a);
        let value = Tensor::from_parts(t.shape().to_vec(), kernels::softmax_rows(t.data(), t.cols(), temperature));
        Ok(self.push(value, Op::Softmax { input: a, temperature }, &[a]))
    }

    pub fn log_softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        Self::check_temperature("log_softmax", temperature)?;
        let t = self.value(a);
        let value = Tensor::from_parts(t.shape().to_vec(), kernels::log_softmax_rows(t.data(), t.cols(), temperature));
        Ok(self.push(value, Op::LogSoftmax { input: a, temperature }, &[a]))
    }

    /// Scales each row (last axis) to unit L2 norm. Rejects rows with norm <= 1e-12.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.cols();
        let mut norms = Vec::with_capacity(t.numel() / n);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm.is_nan() || norm <= NORM_EPS {
                return Err(TensorError::ZeroNorm { op: "normalize_rows" });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(value, Op::NormalizeRows { input: a, norms }, &[a]))
    }

    /// Cosine similarity of two equal-length vectors, clamped to [-1, 1].
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_similarity", a, b)?;
        let na = self.normalize_rows(a)?;
        let nb = self.normalize_rows(b)?;
        let prod = self.mul(na, nb)?;
        let dot = self.sum(prod);
        Ok(self.clamp(dot, -1.0, 1.0))
    }

    /// `KL(target || q)` where `q` is a probability vector on the tape.
    /// `q` is floored at 1e-12 inside the log; zero target entries contribute 0.
    pub fn kl_divergence(&mut self, target: &Tensor, q: Var) -> Result<Var> {
        if target.shape() != self.shape(q) {
            return Err(TensorError::ShapeMismatch { op: "kl_divergence", left: target.shape().to_vec(), right: self.shape(q).to_vec() });
        }
        let loss = super::functional::kl_raw(target.data(), self.value(q).data());
        let value = Tensor::scalar(loss);
        Ok(self.push(value, Op::KlDiv { input: q, target: target.data().to_vec() }, &[q]))
    }

    /// Weighted mean cross-entropy of row-wise logits against class indices:
    /// `sum_r w_r * -log softmax(x_r)[t_r] / sum_r w_r`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[f64]>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(TensorError::InvalidShape {
                op: "cross_entropy",
                shape,
                reason: format!("expected [{}, classes]", targets.len()),
            });
        }
        let c = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::InvalidArgument { op: "cross_entropy", reason: format!("class {bad} out of range for {c} classes") });
        }
        let weights = match weights {
            Some(w) if w.len() != targets.len() => {
                return Err(TensorError::InvalidArgument { op: "cross_entropy", reason: "weight count differs from target count".into() })
            }
            Some(w) => w.to_vec(),
            None => vec![1.0; targets.len()],
        };
        let total_w: f64 = weights.iter().sum();
        if total_w <= 0.0 {
            return Err(TensorError::InvalidArgument { op: "cross_entropy", reason: "weights must sum to a positive value".into() });
        }
        let logp = kernels::log_softmax_rows(self.value(logits).data(), c, 1.0);
        let loss = targets
            .iter()
            .zip(&weights)
            .enumerate()
            .map(|(r, (&t, &w))| -w * logp[r * c + t])
            .sum::<f64>()
            / total_w;
        let probs = logp.iter().map(|v| v.exp()).collect();
        let value = Tensor::scalar(loss);
        Ok(self.push(
            value,
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights, probs },
            &[logits],
        ))
    }

    /// 2-D convolution of a single `[C, H, W]` image with `[O, C, k, k]` weights.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: Conv2dSpec) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 3 || sw.len() != 4 || sw[1] != si[0] || sw[2] != sw[3] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", left: si, right: sw });
        }
        if self.shape(bias) != [sw[0]] {
            return Err(TensorError::ShapeMismatch { op: "conv2d(bias)", left: sw, right: self.shape(bias).to_vec() });
        }
        let geom = ConvGeometry::new(si[0], si[1], si[2], sw[2], spec.stride, spec.pad).ok_or_else(|| TensorError::InvalidShape {
            op: "conv2d",
            shape: si.clone(),
            reason: format!("kernel {} stride {} pad {} does not fit", sw[2], spec.stride, spec.pad),
        })?;
        let cols = kernels::im2col(self.value(input).data(), &geom);
        let (o, k, n) = (sw[0], geom.col_rows(), geom.col_cols());
        let mut out = vec![0.0; o * n];
        for (row, &b) in out.chunks_mut(n).zip(self.value(bias).data()) {
            row.iter_mut().for_each(|v| *v = b);
        }
        kernels::gemm(o, k, n, self.value(weight).data(), false, &cols, false, &mut out, 1.0);
        let value = Tensor::from_parts(vec![o, geom.out_h, geom.out_w], out);
        Ok(self.push(value, Op::Conv2d { input, weight, bias, geom, cols }, &[input, weight, bias]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss { shape: shape.to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut out: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                if node.requires_grad {
                    out[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        // Lazily allocate the gradient slot of `v`, or skip if it needs no gradient.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]))
                } else {
                    None
                }
            }};
        }
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if let Some(ga) = slot!(*a) {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(vb) {
                        *d += s * y;
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(va) {
                        *d += s * x;
                    }
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if let Some(ga) = slot!(*a) {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(vb) {
                        *d += s / y;
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for (((d, s), x), y) in gb.iter_mut().zip(g).zip(va).zip(vb) {
                        *d -= s * x / (y * y);
                    }
                }
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let take_min = matches!(node.op, Op::Minimum(..));
                let pick_a: Vec<bool> = val(*a)
                    .iter()
                    .zip(val(*b))
                    .map(|(x, y)| if take_min { x <= y } else { x >= y })
                    .collect();
                if let Some(ga) = slot!(*a) {
                    for ((d, s), &p) in ga.iter_mut().zip(g).zip(&pick_a) {
                        if p {
                            *d += s;
                        }
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for ((d, s), &p) in gb.iter_mut().zip(g).zip(&pick_a) {
                        if !p {
                            *d += s;
                        }
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += k * s);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::Abs(a) => {
                let x = val(*a);
                if let Some(ga) = slot!(*a) {
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(x) {
                        if *x > 0.0 {
                            *d += s;
                        } else if *x < 0.0 {
                            *d -= s;
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                if let Some(ga) = slot!(*a) {
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(x) {
                        if *x > 0.0 {
                            *d += s;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let x = val(*a);
                if let Some(ga) = slot!(*a) {
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(x) {
                        *d += s * gelu_grad(*x);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = slot!(*a) {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(y) {
                        *d += s * y * (1.0 - y);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = slot!(*a) {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(y) {
                        *d += s * y;
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a);
                if let Some(ga) = slot!(*a) {
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(x) {
                        if x >= lo && x <= hi {
                            *d += s;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(*a), val(*b));
                if let Some(ga) = slot!(*a) {
                    // dA = dC * B^T
                    kernels::gemm(m, n, k, g, false, vb, true, ga, 1.0);
                }
                if let Some(gb) = slot!(*b) {
                    // dB = A^T * dC
                    kernels::gemm(k, m, n, va, true, g, false, gb, 1.0);
                }
            }
            Op::Transpose(a) => {
                let s = nodes[a.0].value.shape();
                let (r, c) = (s[0], s[1]);
                if let Some(ga) = slot!(*a) {
                    // g is [c, r]
                    for i in 0..c {
                        for j in 0..r {
                            ga[j * c + i] += g[i * r + j];
                        }
                    }
                }
            }
            Op::AddBias(a, bias) => {
                let n = nodes[bias.0].value.numel();
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(gb) = slot!(*bias) {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let (outer, inner) = outer_inner(out_shape, *axis);
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let block = nodes[v.0].value.shape()[*axis] * inner;
                    if let Some(gv) = slot!(v) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + block];
                            gv[o * block..(o + 1) * block].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += block;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = nodes[input.0].value.shape();
                let (outer, inner) = outer_inner(in_shape, *axis);
                let len = node.value.shape()[*axis];
                let full = in_shape[*axis];
                if let Some(gi) = slot!(*input) {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        gi[base..base + len * inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = nodes[a.0].value.numel() as f64;
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::MeanRows(a) => {
                let s = nodes[a.0].value.shape();
                let (m, n) = (s[0], s[1]);
                if let Some(ga) = slot!(*a) {
                    for row in ga.chunks_mut(n) {
                        row.iter_mut().zip(g).for_each(|(d, s)| *d += s / m as f64);
                    }
                }
            }
            Op::GatherRows { input, index } => {
                let n = nodes[input.0].value.shape()[1];
                if let Some(gi) = slot!(*input) {
                    for (r, &i) in index.iter().enumerate() {
                        gi[i * n..(i + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::LayerNorm { input, gamma, beta, xhat, inv_std } => {
                let n = nodes[gamma.0].value.numel();
                let gam = val(*gamma);
                if let Some(gg) = slot!(*gamma) {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            gg[c] += grow[c] * hrow[c];
                        }
                    }
                }
                if let Some(gb) = slot!(*beta) {
                    for grow in g.chunks(n) {
                        gb.iter_mut().zip(grow).for_each(|(d, s)| *d += s);
                    }
                }
                if let Some(gi) = slot!(*input) {
                    let nf = n as f64;
                    for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let dxhat: Vec<f64> = grow.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dh: f64 = dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum();
                        let dst = &mut gi[r * n..(r + 1) * n];
                        for c in 0..n {
                            dst[c] += inv_std[r] / nf * (nf * dxhat[c] - sum_d - hrow[c] * sum_dh);
                        }
                    }
                }
            }
            Op::Softmax { input, temperature } => {
                let n = node.value.cols();
                if let Some(gi) = slot!(*input) {
                    for ((dst, grow), yrow) in gi.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            dst[c] += yrow[c] * (grow[c] - dot) / temperature;
                        }
                    }
                }
            }
            Op::LogSoftmax { input, temperature } => {
                let n = node.value.cols();
                if let Some(gi) = slot!(*input) {
                    for ((dst, grow), yrow) in gi.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let total: f64 = grow.iter().sum();
                        for c in 0..n {
                            dst[c] += (grow[c] - yrow[c].exp() * total) / temperature;
                        }
                    }
                }
            }
            Op::NormalizeRows { input, norms } => {
                let n = node.value.cols();
                if let Some(gi) = slot!(*input) {
                    for (((dst, grow), yrow), norm) in gi.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)).zip(norms) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            dst[c] += (grow[c] - yrow[c] * dot) / norm;
                        }
                    }
                }
            }
            Op::KlDiv { input, target } => {
                let q = val(*input);
                if let Some(gi) = slot!(*input) {
                    for ((d, &p), &qv) in gi.iter_mut().zip(target).zip(q) {
                        if p > 0.0 && qv > KL_FLOOR {
                            *d -= g[0] * p / qv;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let c = nodes[logits.0].value.shape()[1];
                let total_w: f64 = weights.iter().sum();
                if let Some(gl) = slot!(*logits) {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        let k = g[0] * w / total_w;
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += k * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Conv2d { input, weight, bias, geom, cols } => {
                let o = nodes[weight.0].value.shape()[0];
                let (k, n) = (geom.col_rows(), geom.col_cols());
                if let Some(gb) = slot!(*bias) {
                    for (d, row) in gb.iter_mut().zip(g.chunks(n)) {
                        *d += row.iter().sum::<f64>();
                    }
                }
                if let Some(gw) = slot!(*weight) {
                    // dW = dY * cols^T
                    kernels::gemm(o, n, k, g, false, cols, true, gw, 1.0);
                }
                let w = val(*weight);
                if let Some(gi) = slot!(*input) {
                    let mut dcols = vec![0.0; k * n];
                    kernels::gemm(k, o, n, w, true, g, false, &mut dcols, 0.0);
                    kernels::col2im_add(&dcols, geom, gi);
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
