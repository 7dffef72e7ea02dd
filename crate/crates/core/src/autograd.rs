//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as a node holding its forward value. Nodes
//! are referenced by [`Var`] handles. A node requires a gradient when any of its
//! inputs does; [`Tape::backward`] walks the tape in reverse, accumulates
//! adjoints into every gradient-carrying node and then clears the tape.
//!
//! All matrix operations treat a rank-1 value of length `k` as a `1 × k` row.

use crate::error::{Error, Result};
use crate::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Silu(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Slice {
        input: Var,
        row0: usize,
        col0: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by the `Var`s of the tape
/// that produced them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    requires_grad: Vec<bool>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. Nodes that require a gradient
    /// but do not influence the loss get zeros; constants get `None`.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        if !*self.requires_grad.get(v.0)? {
            return None;
        }
        let shape = self.shapes[v.0].clone();
        let data = match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; shape.iter().product()],
        };
        Tensor::new(shape, data).ok()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records `t` as an input; it carries a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable input.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`; the natural form for applying an `out × in` weight to row inputs.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        self.push("matmul_t", value, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).scale(c);
        self.push("scale", value, Op::Scale(a, c), &[a])
    }

    /// Adds a length-`n` row to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let r = self.value(row);
        if r.len() != n {
            return Err(Error::shape("add_row", format!("row of {} for {n} columns", r.len())));
        }
        let mut out = self.value(a).clone().with_requires_grad(false);
        let rd = r.data().to_vec();
        for i in 0..m {
            for (o, b) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(&rd) {
                *o += b;
            }
        }
        self.push("add_row", out, Op::AddRow(a, row), &[a, row])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(silu_scalar);
        self.push("silu", value, Op::Silu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push("relu", value, Op::Relu(a), &[a])
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked to zero.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let limit = if causal { (i + 1).min(n) } else { n };
            let row = &x[i * n..i * n + limit];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..limit {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                z += e;
            }
            for j in 0..limit {
                out[i * n + j] /= z;
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push("softmax_rows", value, Op::Softmax(a), &[a])
    }

    /// Row-wise layer normalization with per-column gain and bias.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::shape("layer_norm", format!("gain/bias must have {n} entries")));
        }
        let x = self.value(a).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mu) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                input: a,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[a, gain, bias],
        )
    }

    /// The `rows × cols` block starting at `(row0, col0)`.
    pub fn slice(&mut self, a: Var, row0: usize, rows: usize, col0: usize, cols: usize) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if row0 + rows > m || col0 + cols > n {
            return Err(Error::shape(
                "slice",
                format!("block [{row0}+{rows}, {col0}+{cols}] outside {m}×{n}"),
            ));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(rows * cols);
        for i in row0..row0 + rows {
            out.extend_from_slice(&x[i * n + col0..i * n + col0 + cols]);
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        self.push("slice", value, Op::Slice { input: a, row0, col0 }, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor> = parts.iter().map(|v| self.value(*v).clone()).collect();
        let value = Tensor::hstack(&values)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor> = parts.iter().map(|v| self.value(*v).clone()).collect();
        let value = Tensor::vstack(&values)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table)?;
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Input(format!("index {id} outside table of {v} rows")));
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        self.push(
            "gather",
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().with_requires_grad(false).reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).mean());
        self.push("mean", value, Op::Mean(a), &[a])
    }

    /// Mean over all entries of the squared difference.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let p = self.value(pred);
        let t = self.value(target);
        if p.shape() != t.shape() {
            return Err(Error::shape("mse", format!("{:?} vs {:?}", p.shape(), t.shape())));
        }
        let n = p.len().max(1) as f64;
        let s: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        self.push("mse", Tensor::scalar(s / n), Op::Mse(pred, target), &[pred, target])
    }

    /// Mean token-level cross-entropy (natural log) of row logits against class ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, v) = self.dims(logits)?;
        if targets.len() != m {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {m} rows", targets.len()),
            ));
        }
        if m == 0 {
            return Err(Error::Input("cross-entropy over an empty batch".into()));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; m * v];
        let mut loss = 0.0;
        for i in 0..m {
            let t = targets[i];
            if t >= v {
                return Err(Error::Input(format!("target {t} outside vocabulary of {v}")));
            }
            let row = &x[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|r| (r - max).exp()).sum();
            for j in 0..v {
                probs[i * v + j] = (row[j] - max).exp() / z;
            }
            loss += z.ln() + max - row[t];
        }
        let value = Tensor::scalar(loss / m as f64);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Reverse pass from a scalar `loss`. Clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let requires_grad = self.nodes.iter().map(|n| n.requires_grad).collect();
        self.nodes.clear();
        Ok(Gradients {
            grads,
            shapes,
            requires_grad,
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a)?;
                let (_, n) = self.dims(*b)?;
                if rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g, self.value(*b).data(), m, n, k, &mut da);
                    accumulate(grads, *a, &da);
                }
                if rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(self.value(*a).data(), g, m, k, n, &mut db);
                    accumulate(grads, *b, &db);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.dims(*a)?;
                let (n, _) = self.dims(*b)?;
                if rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nn(g, self.value(*b).data(), m, n, k, &mut da);
                    accumulate(grads, *a, &da);
                }
                if rg(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm_tn(g, self.value(*a).data(), m, n, k, &mut db);
                    accumulate(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g);
                }
                if rg(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g);
                }
                if rg(*b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    accumulate(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let d: Vec<f64> = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, &d);
                }
                if rg(*b) {
                    let d: Vec<f64> = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, &d);
                }
            }
            Op::Scale(a, c) => {
                let d: Vec<f64> = g.iter().map(|x| x * c).collect();
                accumulate(grads, *a, &d);
            }
            Op::AddRow(a, row) => {
                if rg(*a) {
                    accumulate(grads, *a, g);
                }
                if rg(*row) {
                    let (m, n) = self.dims(*a)?;
                    let mut d = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += g[i * n + j];
                        }
                    }
                    accumulate(grads, *row, &d);
                }
            }
            Op::Silu(a) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(gi, &x)| gi * silu_derivative(x))
                    .collect();
                accumulate(grads, *a, &d);
            }
            Op::Relu(a) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                    .collect();
                accumulate(grads, *a, &d);
            }
            Op::Softmax(a) => {
                let (m, n) = self.dims(*a)?;
                let p = node.value.data();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let pr = &p[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let s = dot(pr, gr);
                    for j in 0..n {
                        d[i * n + j] = pr[j] * (gr[j] - s);
                    }
                }
                accumulate(grads, *a, &d);
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = self.dims(*input)?;
                let gv = self.value(*gain).data();
                if rg(*input) {
                    let mut d = vec![0.0; m * n];
                    for i in 0..m {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..n {
                            let dh = g[i * n + j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[i * n + j];
                        }
                        mean_dh /= n as f64;
                        mean_dh_h /= n as f64;
                        for j in 0..n {
                            let dh = g[i * n + j] * gv[j];
                            d[i * n + j] = inv_std[i] * (dh - mean_dh - xhat[i * n + j] * mean_dh_h);
                        }
                    }
                    accumulate(grads, *input, &d);
                }
                if rg(*gain) {
                    let mut d = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                    accumulate(grads, *gain, &d);
                }
                if rg(*bias) {
                    let mut d = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += g[i * n + j];
                        }
                    }
                    accumulate(grads, *bias, &d);
                }
            }
            Op::Slice { input, row0, col0 } => {
                let (m, n) = self.dims(*input)?;
                let (rows, cols) = node.value.dims2()?;
                let mut d = vec![0.0; m * n];
                for i in 0..rows {
                    let dst = (row0 + i) * n + col0;
                    d[dst..dst + cols].copy_from_slice(&g[i * cols..(i + 1) * cols]);
                }
                accumulate(grads, *input, &d);
            }
            Op::ConcatCols(parts) => {
                let (m, total) = node.value.dims2()?;
                let mut offset = 0;
                for p in parts {
                    let (_, c) = self.dims(*p)?;
                    if rg(*p) {
                        let mut d = Vec::with_capacity(m * c);
                        for i in 0..m {
                            d.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                        }
                        accumulate(grads, *p, &d);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if rg(*p) {
                        accumulate(grads, *p, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::Gather { table, ids } => {
                let (v, dim) = self.dims(*table)?;
                let mut d = vec![0.0; v * dim];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..dim {
                        d[id * dim + j] += g[i * dim + j];
                    }
                }
                accumulate(grads, *table, &d);
            }
            Op::Reshape(a) => accumulate(grads, *a, g),
            Op::Sum(a) => {
                let d = vec![g[0]; self.value(*a).len()];
                accumulate(grads, *a, &d);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1) as f64;
                let d = vec![g[0] / n; self.value(*a).len()];
                accumulate(grads, *a, &d);
            }
            Op::Mse(p, t) => {
                let pv = self.value(*p).data();
                let tv = self.value(*t).data();
                let c = 2.0 * g[0] / pv.len().max(1) as f64;
                let d: Vec<f64> = pv.iter().zip(tv).map(|(a, b)| c * (a - b)).collect();
                if rg(*p) {
                    accumulate(grads, *p, &d);
                }
                if rg(*t) {
                    let neg: Vec<f64> = d.iter().map(|x| -x).collect();
                    accumulate(grads, *t, &neg);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (m, v) = self.dims(*logits)?;
                let c = g[0] / m as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * c).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * v + t] -= c;
                }
                accumulate(grads, *logits, &d);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(d).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(d.to_vec()),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_check;
    use crate::rng::RngState;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        RngState::new(seed, 0).uniform_tensor(shape, -2.0, 2.0)
    }

    #[test]
    fn linear_form_gradient_is_broadcast_input() {
        // loss = sum(W·x) => dW[i][j] = x[j] for every row i
        let mut tape = Tape::new();
        let w = tape.param(random(&[3, 4], 1));
        let x = tape.constant(Tensor::new(vec![4, 1], vec![0.5, -1.0, 2.0, 3.0]).unwrap());
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gw = grads.get(w).unwrap();
        for i in 0..3 {
            assert_eq!(gw.row(i), &[0.5, -1.0, 2.0, 3.0]);
        }
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut tape = Tape::new();
        let w = tape.param(random(&[2, 2], 2));
        let c = tape.constant(Tensor::scalar(3.0));
        let loss = tape.sum(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(w).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(random(&[2, 2], 3));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_clears_the_tape() {
        let mut tape = Tape::new();
        let w = tape.param(random(&[2, 2], 4));
        let loss = tape.sum(w).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.is_empty());
    }

    #[test]
    fn silu_gradient_matches_finite_differences() {
        let x = random(&[4, 5], 5);
        let err = finite_difference_check(
            |t, v| {
                let s = t.silu(v)?;
                t.sum(s)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    type Builder = fn(&mut Tape, Var) -> Result<Var>;

    #[test]
    fn every_differentiable_op_passes_gradient_check() {
        let cases: Vec<(&str, Builder)> = vec![
            ("matmul", |t, v| {
                let w = t.constant(random(&[4, 3], 10));
                let y = t.matmul(v, w)?;
                let y2 = t.mul(y, y)?;
                t.sum(y2)
            }),
            ("matmul_t", |t, v| {
                let w = t.constant(random(&[2, 4], 11));
                let y = t.matmul_t(v, w)?;
                let y = t.silu(y)?;
                t.sum(y)
            }),
            ("matmul_t rhs", |t, v| {
                let a = t.constant(random(&[5, 4], 12));
                let y = t.matmul_t(a, v)?;
                let y = t.silu(y)?;
                t.mean(y)
            }),
            ("add/sub/scale", |t, v| {
                let c = t.constant(random(&[3, 4], 13));
                let a = t.add(v, c)?;
                let b = t.sub(a, v)?;
                let b = t.mul(b, v)?;
                let s = t.scale(b, -1.5)?;
                let s = t.mul(s, v)?;
                t.sum(s)
            }),
            ("add_row", |t, v| {
                let r = t.slice(v, 0, 1, 0, 4)?;
                let r = t.reshape(r, vec![4])?;
                let y = t.add_row(v, r)?;
                let y = t.silu(y)?;
                t.sum(y)
            }),
            ("relu", |t, v| {
                let y = t.relu(v)?;
                let y = t.mul(y, y)?;
                t.sum(y)
            }),
            ("softmax causal", |t, v| {
                let sq = t.slice(v, 0, 3, 0, 3)?;
                let p = t.softmax_rows(sq, true)?;
                let w = t.constant(random(&[3, 3], 14));
                let y = t.mul(p, w)?;
                t.sum(y)
            }),
            ("softmax full", |t, v| {
                let p = t.softmax_rows(v, false)?;
                let w = t.constant(random(&[3, 4], 15));
                let y = t.mul(p, w)?;
                t.sum(y)
            }),
            ("layer_norm", |t, v| {
                let g = t.constant(random(&[4], 16));
                let b = t.constant(random(&[4], 17));
                let y = t.layer_norm(v, g, b, 1e-5)?;
                let w = t.constant(random(&[3, 4], 18));
                let y = t.mul(y, w)?;
                t.sum(y)
            }),
            ("layer_norm params", |t, v| {
                let x = t.constant(random(&[5, 4], 19));
                let g = t.slice(v, 0, 1, 0, 4)?;
                let b = t.slice(v, 1, 1, 0, 4)?;
                let y = t.layer_norm(x, g, b, 1e-5)?;
                let y = t.silu(y)?;
                t.sum(y)
            }),
            ("concat", |t, v| {
                let a = t.slice(v, 0, 3, 0, 2)?;
                let b = t.slice(v, 0, 3, 2, 2)?;
                let c = t.concat_cols(&[b, a])?;
                let d = t.concat_cols(&[a, b])?;
                let r = t.concat_rows(&[c, d])?;
                let s = t.concat_rows(&[a, b])?;
                let r = t.mul(r, r)?;
                let s = t.silu(s)?;
                let r = t.sum(r)?;
                let s = t.sum(s)?;
                t.add(r, s)
            }),
            ("gather", |t, v| {
                let y = t.gather(v, &[2, 0, 2, 1])?;
                let y = t.silu(y)?;
                t.sum(y)
            }),
            ("mse", |t, v| {
                let target = t.constant(random(&[3, 4], 21));
                t.mse(v, target)
            }),
            ("cross_entropy", |t, v| t.cross_entropy(v, &[1, 3, 0])),
        ];
        for (name, f) in cases {
            let x = random(&[3, 4], 100);
            let err = finite_difference_check(f, &x, 1e-6).unwrap();
            assert!(err < 1e-5, "{name}: {err}");
        }
    }

    #[test]
    fn causal_softmax_rows_sum_to_one_and_mask_future() {
        let mut tape = Tape::new();
        let s = tape.constant(random(&[5, 5], 30));
        let p = tape.softmax_rows(s, true).unwrap();
        let pv = tape.value(p);
        for i in 0..5 {
            let row = pv.row(i);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row[i + 1..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn gather_rejects_out_of_range_ids() {
        let mut tape = Tape::new();
        let table = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.gather(table, &[3]), Err(Error::Input(_))));
    }

    #[cfg(debug_assertions)]
    #[test]
    fn non_finite_values_fail_fast_with_op_name() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(f64::MAX));
        let err = tape.scale(a, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "scale" }));
    }
}
