//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] owns every value produced during a forward pass. Operations
//! append a node holding the output value plus whatever the backward rule
//! needs; [`Graph::backward`] then walks the tape in reverse. Because nodes
//! are only ever appended, tape order is already a topological order.

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Zero padding of ⌊(w−1)/2⌋ on the left and ⌈(w−1)/2⌉ on the right.
    Same,
}

/// Backward rule for [`Graph::custom`]: receives the input values, the
/// output value and the upstream gradient, returns one gradient per input.
pub type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Vec<f64>> + Send + Sync>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Act(Var, Activation),
    Concat { parts: Vec<Var>, axis: usize },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Gather { table: Var, ids: Vec<usize>, frozen_id: Option<usize> },
    Conv1d { input: Var, weights: Var, bias: Var, pad_left: usize },
    MaxOverTime { x: Var, argmax: Vec<usize> },
    MaxPool { x: Var, argmax: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    MaskedSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Custom { inputs: Vec<Var>, backward: BackwardFn },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(Arc::new(t), false)
    }

    /// Leaf that accumulates a gradient during [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(Arc::new(t), true)
    }

    pub fn leaf(&mut self, t: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
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

    /// Gradient of the last [`Graph::backward`] loss w.r.t. `v`, if any
    /// flowed into it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Graph::grad`] but yields zeros for nodes the loss does not
    /// depend on.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; self.value(v).len()])
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn mat(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        self.value(v).dims2().map_err(|_| shape_err(format!("{what}: expected a matrix, got {:?}", self.shape(v))))
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul lhs")?;
        let (k2, n) = self.mat(b, "matmul rhs")?;
        if k != k2 {
            return Err(shape_err(format!(
                "matmul: inner dimensions disagree, {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat(a, "transpose")?;
        let out = transpose_raw(self.value(a).data(), m, n);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = zip(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add(a, b), &[a, b]))
    }

    /// `x + bias` with `bias` broadcast over the rows of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [n] {
            return Err(shape_err(format!(
                "add_bias: bias {:?} does not match trailing dimension of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias).data();
        let out: Vec<f64> =
            self.value(x).data().chunks(n).flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb)).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = zip(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out: Vec<f64> = self.value(a).data().iter().map(|v| v * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(&shape, out).expect("scale"), Op::Scale(a, s), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Activation::Relu => |v| if v > 0.0 { v } else { 0.0 },
            Activation::Tanh => f64::tanh,
            Activation::Sigmoid => sigmoid,
        };
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(&shape, out).expect("activation"), Op::Act(x, kind), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(Activation::Relu, x)
    }

    // ---- structural -----------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err("concat: no parts"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(shape_err(format!("concat: axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err(format!("concat: {:?} incompatible with {base:?} on axis {axis}", s)));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let trailing: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * trailing);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * trailing;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(shape_err(format!("slice_cols: [{start}, {}) outside {n} columns", start + len)));
        }
        let d = self.value(x).data();
        let out: Vec<f64> = (0..m).flat_map(|r| d[r * n + start..r * n + start + len].iter().copied()).collect();
        Ok(self.push(Tensor::new(&[m, len], out)?, Op::SliceCols { x, start }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat(x, "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(shape_err(format!("slice_rows: [{start}, {}) outside {m} rows", start + len)));
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        Ok(self.push(Tensor::new(&[len, n], out)?, Op::SliceRows { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Row lookup `table[ids[t]]`. Lookups of `frozen_id` read as zero and
    /// never receive gradient.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize], frozen_id: Option<usize>) -> Result<Var> {
        let (v, d) = self.mat(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(shape_err("gather_rows: empty id sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Vocab(format!("id {bad} out of range for table with {v} rows")));
        }
        let t = self.value(table);
        let zero = vec![0.0; d];
        let out: Vec<f64> =
            ids.iter().flat_map(|&i| if Some(i) == frozen_id { &zero[..] } else { t.row(i) }.iter().copied()).collect();
        Ok(self.push(Tensor::new(&[ids.len(), d], out)?, Op::Gather { table, ids: ids.to_vec(), frozen_id }, &[table]))
    }

    // ---- convolution and pooling ---------------------------------------

    /// 1-D convolution of `input[T,Din]` with `weights[K,w,Din]` plus
    /// `bias[K]`, giving `[Tout,K]`.
    pub fn conv1d(&mut self, input: Var, weights: Var, bias: Var, padding: Padding) -> Result<Var> {
        let (t, din) = self.mat(input, "conv1d input")?;
        let ws = self.shape(weights).to_vec();
        let [k, w, wd] = ws[..] else {
            return Err(shape_err(format!("conv1d: weights must be [K,w,Din], got {ws:?}")));
        };
        if wd != din || self.shape(bias) != [k] {
            return Err(shape_err(format!(
                "conv1d: input {:?}, weights {ws:?}, bias {:?} disagree",
                self.shape(input),
                self.shape(bias)
            )));
        }
        let (pl, pr) = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => ((w - 1) / 2, w - 1 - (w - 1) / 2),
        };
        if t + pl + pr < w {
            return Err(Error::SequenceTooShort { len: t, min: w });
        }
        let tout = t + pl + pr - w + 1;
        let x = self.value(input).data();
        let wt = self.value(weights).data();
        let b = self.value(bias).data();
        let mut out = Vec::with_capacity(tout * k);
        for p in 0..tout {
            out.extend_from_slice(b);
            let row = &mut out[p * k..(p + 1) * k];
            for j in 0..w {
                let src = p + j;
                if src < pl || src - pl >= t {
                    continue;
                }
                let xr = &x[(src - pl) * din..(src - pl + 1) * din];
                for (kk, o) in row.iter_mut().enumerate() {
                    let wr = &wt[(kk * w + j) * din..(kk * w + j + 1) * din];
                    *o += dot(xr, wr);
                }
            }
        }
        Ok(self.push(
            Tensor::new(&[tout, k], out)?,
            Op::Conv1d { input, weights, bias, pad_left: pl },
            &[input, weights, bias],
        ))
    }

    /// Column-wise maximum over the time axis, `[T,K] -> [K]`. Ties route
    /// gradient to the earliest position.
    pub fn max_over_time(&mut self, x: Var) -> Result<Var> {
        let (t, k) = self.mat(x, "max_over_time")?;
        if t == 0 {
            return Err(shape_err("max_over_time: empty time axis"));
        }
        let d = self.value(x).data();
        let mut out = d[..k].to_vec();
        let mut argmax = vec![0; k];
        for r in 1..t {
            for c in 0..k {
                if d[r * k + c] > out[c] {
                    out[c] = d[r * k + c];
                    argmax[c] = r;
                }
            }
        }
        Ok(self.push(Tensor::vector(out), Op::MaxOverTime { x, argmax }, &[x]))
    }

    /// Windowed max pooling along time, `Tout = ⌊(T−window)/stride⌋ + 1`.
    pub fn max_pool_1d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (t, k) = self.mat(x, "max_pool_1d")?;
        if window == 0 || stride == 0 {
            return Err(Error::Param("max_pool_1d: window and stride must be positive".into()));
        }
        if t < window {
            return Err(Error::SequenceTooShort { len: t, min: window });
        }
        let tout = (t - window) / stride + 1;
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(tout * k);
        let mut argmax = Vec::with_capacity(tout * k);
        for p in 0..tout {
            for c in 0..k {
                let mut best = p * stride;
                for r in p * stride + 1..p * stride + window {
                    if d[r * k + c] > d[best * k + c] {
                        best = r;
                    }
                }
                out.push(d[best * k + c]);
                argmax.push(best);
            }
        }
        Ok(self.push(Tensor::new(&[tout, k], out)?, Op::MaxPool { x, argmax }, &[x]))
    }

    // ---- regularization and normalization ------------------------------

    /// Inverted dropout: identity in eval mode, otherwise each element is
    /// zeroed with probability `p` and survivors are scaled by 1/(1−p).
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Param(format!("dropout probability {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n).map(|_| if rng.uniform() < p { 0.0 } else { keep }).collect();
        let out = zip(self.value(x).data(), &mask, |a, m| a * m);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Dropout { x, mask }, &[x]))
    }

    /// Row-wise softmax over the first `valid` columns; the remaining
    /// columns are treated as −∞ and come out exactly zero.
    pub fn masked_softmax(&mut self, x: Var, valid: usize) -> Result<Var> {
        let (m, n) = self.mat(x, "masked_softmax")?;
        if valid == 0 || valid > n {
            return Err(shape_err(format!("masked_softmax: {valid} valid columns of {n}")));
        }
        let d = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &d[r * n..r * n + valid];
            let probs = softmax(row);
            out[r * n..r * n + valid].copy_from_slice(&probs);
        }
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MaskedSoftmax(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (t, d) = self.mat(x, "layer_norm")?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err(format!(
                "layer_norm: gain {:?} / bias {:?} do not match width {d}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xd = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; t * d];
        let mut inv_std = vec![0.0; t];
        let mut out = vec![0.0; t * d];
        for r in 0..t {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = g[c] * h + b[c];
            }
        }
        Ok(self.push(Tensor::new(&[t, d], out)?, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias]))
    }

    /// Mean over the batch of −log softmax(logits)[target].
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, c) = self.mat(logits, "softmax_cross_entropy")?;
        if targets.len() != b {
            return Err(shape_err(format!("softmax_cross_entropy: {} targets for batch of {b}", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Label(format!("target {bad} out of range for {c} classes")));
        }
        let d = self.value(logits).data();
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &d[r * c..(r + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let value = Tensor::scalar((loss / b as f64).max(0.0));
        Ok(self.push(value, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, &[logits]))
    }

    /// Records an operation whose forward value is computed by the caller
    /// and whose backward rule is supplied as a closure.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        self.push(value, Op::Custom { inputs: inputs.to_vec(), backward }, inputs)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    // ---- backward -------------------------------------------------------

    /// Populates gradients of the scalar `loss` for every node that requires
    /// them. Contributions through fan-out are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("node {} is not part of this graph", loss.0)));
        }
        if self.value(loss).len() != 1 {
            return Err(shape_err(format!("backward: loss must be scalar, got {:?}", self.shape(loss))));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Graph("backward: loss is detached from every parameter".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                for (v, dg) in self.input_grads(i, &g) {
                    if !self.nodes[v.0].requires_grad {
                        continue;
                    }
                    match &mut grads[v.0] {
                        Some(acc) => acc.iter_mut().zip(&dg).for_each(|(a, d)| *a += d),
                        slot => *slot = Some(dg),
                    }
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = out.shape()[1];
                let bt = transpose_raw(self.value(*b).data(), k, n);
                let da = matmul_raw(g, &bt, m, n, k);
                let at = transpose_raw(self.value(*a).data(), m, k);
                let db = matmul_raw(&at, g, k, m, n);
                vec![(*a, da), (*b, db)]
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2().unwrap();
                vec![(*a, transpose_raw(g, n, m))]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::AddBias(x, b) => {
                let n = self.value(*b).len();
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::Mul(a, b) => {
                let da = zip(g, self.value(*b).data(), |x, y| x * y);
                let db = zip(g, self.value(*a).data(), |x, y| x * y);
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|v| v * s).collect())],
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).len()])],
            Op::Act(x, kind) => {
                let xd = self.value(*x).data();
                let yd = out.data();
                let dx = match kind {
                    Activation::Relu => xd.iter().zip(g).map(|(&v, &d)| if v > 0.0 { d } else { 0.0 }).collect(),
                    Activation::Tanh => yd.iter().zip(g).map(|(y, d)| d * (1.0 - y * y)).collect(),
                    Activation::Sigmoid => yd.iter().zip(g).map(|(y, d)| d * y * (1.0 - y)).collect(),
                };
                vec![(*x, dx)]
            }
            Op::Concat { parts, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let trailing: usize = shape[axis + 1..].iter().product();
                let mut res: Vec<(Var, Vec<f64>)> =
                    parts.iter().map(|&p| (p, Vec::with_capacity(self.value(p).len()))).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (p, buf) in res.iter_mut() {
                        let chunk = self.shape(*p)[*axis] * trailing;
                        buf.extend_from_slice(&g[off..off + chunk]);
                        off += chunk;
                    }
                }
                res
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.value(*x).dims2().unwrap();
                let len = out.shape()[1];
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![(*x, dx)]
            }
            Op::SliceRows { x, start } => {
                let n = out.shape()[1];
                let mut dx = vec![0.0; self.value(*x).len()];
                dx[start * n..start * n + g.len()].copy_from_slice(g);
                vec![(*x, dx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Gather { table, ids, frozen_id } => {
                let d = out.shape()[1];
                let mut dt = vec![0.0; self.value(*table).len()];
                for (t, &id) in ids.iter().enumerate() {
                    if Some(id) == *frozen_id {
                        continue;
                    }
                    dt[id * d..(id + 1) * d].iter_mut().zip(&g[t * d..(t + 1) * d]).for_each(|(a, v)| *a += v);
                }
                vec![(*table, dt)]
            }
            Op::Conv1d { input, weights, bias, pad_left } => {
                let (t, din) = self.value(*input).dims2().unwrap();
                let ws = self.shape(*weights);
                let (k, w) = (ws[0], ws[1]);
                let tout = out.shape()[0];
                let x = self.value(*input).data();
                let wt = self.value(*weights).data();
                let mut dx = vec![0.0; t * din];
                let mut dw = vec![0.0; k * w * din];
                let mut db = vec![0.0; k];
                for p in 0..tout {
                    let gr = &g[p * k..(p + 1) * k];
                    db.iter_mut().zip(gr).for_each(|(a, v)| *a += v);
                    for j in 0..w {
                        let src = p + j;
                        if src < *pad_left || src - pad_left >= t {
                            continue;
                        }
                        let s = src - pad_left;
                        for (kk, &gv) in gr.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let base = (kk * w + j) * din;
                            for c in 0..din {
                                dx[s * din + c] += gv * wt[base + c];
                                dw[base + c] += gv * x[s * din + c];
                            }
                        }
                    }
                }
                vec![(*input, dx), (*weights, dw), (*bias, db)]
            }
            Op::MaxOverTime { x, argmax } => {
                let k = argmax.len();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (c, &r) in argmax.iter().enumerate() {
                    dx[r * k + c] += g[c];
                }
                vec![(*x, dx)]
            }
            Op::MaxPool { x, argmax } => {
                let k = out.shape()[1];
                let mut dx = vec![0.0; self.value(*x).len()];
                for (idx, &r) in argmax.iter().enumerate() {
                    dx[r * k + idx % k] += g[idx];
                }
                vec![(*x, dx)]
            }
            Op::Dropout { x, mask } => vec![(*x, zip(g, mask, |a, m| a * m))],
            Op::MaskedSoftmax(x) => {
                let (m, n) = out.dims2().unwrap();
                let y = out.data();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let s = dot(yr, gr);
                    for c in 0..n {
                        dx[r * n + c] = yr[c] * (gr[c] - s);
                    }
                }
                vec![(*x, dx)]
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (t, d) = out.dims2().unwrap();
                let gn = self.value(*gain).data();
                let mut dx = vec![0.0; t * d];
                let mut dg = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..t {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for c in 0..d {
                        let dh = gr[c] * gn[c];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[c];
                        dg[c] += gr[c] * hr[c];
                        dbias[c] += gr[c];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for c in 0..d {
                        let dh = gr[c] * gn[c];
                        dx[r * d + c] = inv_std[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                    }
                }
                vec![(*x, dx), (*gain, dg), (*bias, dbias)]
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let b = targets.len();
                let c = probs.len() / b;
                let scale = g[0] / b as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * c + t] -= scale;
                }
                vec![(*logits, dl)]
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                inputs.iter().copied().zip(backward(&vals, out, g)).collect()
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(cv, bv)| *cv += av * bv);
        }
    }
    c
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}
