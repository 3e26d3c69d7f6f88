//! Reverse-mode differentiation over an append-only operation tape.
//!
//! Every op pushes a node holding its output value and enough saved state to
//! run its vector-Jacobian product. Node indices only ever grow, so the tape
//! order is a topological order and [`Tape::backward`] is a single reverse
//! sweep. Parameters are borrowed, not copied, for the lifetime of the tape.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numeric::attention::{self, AttentionPattern};
use crate::numeric::tensor::Tensor;
use crate::rng::Rng;
use rand::Rng as _;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'p> {
    Borrowed(&'p [f64]),
    Owned(Vec<f64>),
}

impl Value<'_> {
    fn as_slice(&self) -> &[f64] {
        match self {
            Value::Borrowed(s) => s,
            Value::Owned(v) => v,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Transpose(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Dropout { x: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, pattern: Rc<AttentionPattern>, probs: Vec<f64> },
}

struct Node<'p> {
    shape: Vec<usize>,
    value: Value<'p>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    score_evals: u64,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `var`, or zeros if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match self.grads[var.0].take() {
            Some(g) => Tensor::new(shape, g).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn dims2(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [n] => Some((1, *n)),
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let dim = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, dim, inner)
}

fn accumulate<'g>(grads: &'g mut [Option<Vec<f64>>], var: Var, len: usize) -> &'g mut [f64] {
    grads[var.0].get_or_insert_with(|| vec![0.0; len])
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Query-key dot products computed by attention ops so far.
    pub fn score_evals(&self) -> u64 {
        self.score_evals
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a borrowed tensor whose gradient is tracked.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Value::Borrowed(t.data()),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers an owned tensor whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.as_slice()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        dims2(self.shape(v)).ok_or_else(|| Error::shape(op, self.shape(v), &[0, 0]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 || k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x != 0.0 {
                    for (o, &y) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                        *o += x * y;
                    }
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    /// `x[m, n] + row[n]`, broadcasting the row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, n) = self.matrix_dims(x, "add_row")?;
        if self.shape(row) != [n] {
            return Err(Error::shape("add_row", self.shape(x), self.shape(row)));
        }
        let rv = self.value(row);
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|r| r.iter().zip(rv).map(|(a, b)| a + b))
            .collect();
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), rg)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "transpose")?;
        let xv = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv[i * n + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n, m], out, Op::Transpose(x), rg))
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat", &[], &[]))?;
        let (r0, c0) = self.matrix_dims(first, "concat")?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat")?;
            match axis {
                0 if c == c0 => total += r,
                1 if r == r0 => total += c,
                _ => return Err(Error::shape("concat", self.shape(first), self.shape(p))),
            }
        }
        let (rows, cols) = if axis == 0 { (total, c0) } else { (r0, total) };
        let mut out = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for &p in parts {
                out.extend_from_slice(self.value(p));
            }
        } else {
            for i in 0..rows {
                for &p in parts {
                    let (_, c) = dims2(self.shape(p)).unwrap();
                    out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
                }
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, cols], out, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// `x[start..end, :]` (axis 0) or `x[:, start..end]` (axis 1).
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "slice")?;
        let limit = if axis == 0 { r } else { c };
        if axis > 1 || start >= end || end > limit {
            return Err(Error::shape("slice", self.shape(x), &[axis, start, end]));
        }
        let xv = self.value(x);
        let (shape, out) = if axis == 0 {
            (vec![end - start, c], xv[start * c..end * c].to_vec())
        } else {
            let w = end - start;
            let mut out = Vec::with_capacity(r * w);
            for i in 0..r {
                out.extend_from_slice(&xv[i * c + start..i * c + end]);
            }
            (vec![r, w], out)
        };
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Slice { x, axis, start }, rg))
    }

    /// Gathers rows of `table[vocab, d]` into an `[ids.len(), d]` tensor.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::shape("embedding", shape, &[ids.len()]));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Constraint(format!("embedding id {bad} out of range for table of {v} rows")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(vec![ids.len(), d], out, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        let (outer, dim, inner) = axis_split(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * dim + j) * inner + i;
                let max = (0..dim).map(|j| xv[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..dim {
                    let e = (xv[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..dim {
                    out[idx(j)] /= total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes each row of `x` over its last axis, then applies
    /// `gain * x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "layer_norm")?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
            rg,
        ))
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), rg)
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }, rg))
    }

    /// `-ln softmax(logits)[label]` for a single example.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        if label >= lv.len() {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[label]));
        }
        let max = lv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = lv.iter().map(|v| (v - max).exp()).sum();
        let lse = max + total.ln();
        let probs = lv.iter().map(|v| (v - lse).exp()).collect();
        let loss = lse - lv[label];
        let rg = self.rg(logits);
        Ok(self.push(vec![1], vec![loss], Op::CrossEntropy { logits, label, probs }, rg))
    }

    /// Multi-head scaled dot-product attention restricted to `pattern`.
    ///
    /// `q`, `k`, `v` are `[n, d]`; head `h` uses columns `h·d/heads ..
    /// (h+1)·d/heads`. Query rows listed with no keys produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, pattern: Rc<AttentionPattern>) -> Result<Var> {
        let (nq, d) = self.matrix_dims(q, "attention")?;
        let (nk, dk) = self.matrix_dims(k, "attention")?;
        if self.shape(k) != self.shape(v) || d != dk {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if pattern.n_queries() != nq || pattern.n_keys() != nk {
            return Err(Error::shape("attention", &[nq, nk], &[pattern.n_queries(), pattern.n_keys()]));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", &[d], &[heads]));
        }
        let (out, probs, evals) = attention::forward(self.value(q), self.value(k), self.value(v), d, heads, &pattern);
        self.score_evals += evals;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(vec![nq, d], out, Op::Attention { q, k, v, heads, pattern, probs }, rg))
    }

    /// Runs the reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.as_slice().len() != 1 {
            return Err(Error::shape("backward", &self.nodes[loss.0].shape, &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
        })
    }

    fn propagate(&self, node: &Node<'p>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = dims2(self.shape(a)).unwrap();
                let n = node.shape[1];
                let av = self.value(a);
                let bv = self.value(b);
                if self.rg(a) {
                    let da = accumulate(grads, a, m * k);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if self.rg(b) {
                    let db = accumulate(grads, b, k * n);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x != 0.0 {
                                for (o, &y) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *o += x * y;
                                }
                            }
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for x in [a, b] {
                    if self.rg(x) {
                        for (o, v) in accumulate(grads, x, g.len()).iter_mut().zip(g) {
                            *o += v;
                        }
                    }
                }
            }
            &Op::AddRow(x, row) => {
                if self.rg(x) {
                    for (o, v) in accumulate(grads, x, g.len()).iter_mut().zip(g) {
                        *o += v;
                    }
                }
                if self.rg(row) {
                    let n = self.shape(row)[0];
                    let dr = accumulate(grads, row, n);
                    for chunk in g.chunks(n) {
                        for (o, v) in dr.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                }
            }
            &Op::Mul(a, b) => {
                for (x, other) in [(a, b), (b, a)] {
                    if self.rg(x) {
                        let ov = self.value(other);
                        for ((o, v), w) in accumulate(grads, x, g.len()).iter_mut().zip(g).zip(ov) {
                            *o += v * w;
                        }
                    }
                }
            }
            &Op::Scale(x, c) => {
                if self.rg(x) {
                    for (o, v) in accumulate(grads, x, g.len()).iter_mut().zip(g) {
                        *o += v * c;
                    }
                }
            }
            &Op::Sum(x) => {
                if self.rg(x) {
                    let len = self.value(x).len();
                    for o in accumulate(grads, x, len).iter_mut() {
                        *o += g[0];
                    }
                }
            }
            &Op::Transpose(x) => {
                if self.rg(x) {
                    let (m, n) = dims2(self.shape(x)).unwrap();
                    let dx = accumulate(grads, x, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let cols = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = dims2(self.shape(p)).unwrap();
                    if self.rg(p) {
                        let dp = accumulate(grads, p, r * c);
                        if *axis == 0 {
                            for (o, v) in dp.iter_mut().zip(&g[offset * cols..(offset + r) * cols]) {
                                *o += v;
                            }
                        } else {
                            for i in 0..r {
                                for j in 0..c {
                                    dp[i * c + j] += g[i * cols + offset + j];
                                }
                            }
                        }
                    }
                    offset += if *axis == 0 { r } else { c };
                }
            }
            &Op::Slice { x, axis, start } => {
                if self.rg(x) {
                    let (r, c) = dims2(self.shape(x)).unwrap();
                    let dx = accumulate(grads, x, r * c);
                    if axis == 0 {
                        for (o, v) in dx[start * c..].iter_mut().zip(g) {
                            *o += v;
                        }
                    } else {
                        let w = node.shape[1];
                        for i in 0..r {
                            for j in 0..w {
                                dx[i * c + start + j] += g[i * w + j];
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.rg(*table) {
                    let (v, d) = dims2(self.shape(*table)).unwrap();
                    let dt = accumulate(grads, *table, v * d);
                    for (r, &i) in ids.iter().enumerate() {
                        for (o, x) in dt[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *o += x;
                        }
                    }
                }
            }
            &Op::Softmax { x, axis } => {
                if self.rg(x) {
                    let y = node.value.as_slice();
                    let (outer, dim, inner) = axis_split(&node.shape, axis);
                    let dx = accumulate(grads, x, y.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * dim + j) * inner + i;
                            let dot: f64 = (0..dim).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..dim {
                                dx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (m, n) = dims2(&node.shape).unwrap();
                let gv = self.value(*gain);
                if self.rg(*gain) {
                    let dg = accumulate(grads, *gain, n);
                    for r in 0..m {
                        for j in 0..n {
                            dg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if self.rg(*bias) {
                    let db = accumulate(grads, *bias, n);
                    for r in 0..m {
                        for j in 0..n {
                            db[j] += g[r * n + j];
                        }
                    }
                }
                if self.rg(*x) {
                    let dx = accumulate(grads, *x, m * n);
                    let mut dh = vec![0.0; n];
                    for r in 0..m {
                        let h = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            dh[j] = g[r * n + j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            dx[r * n + j] += inv_std[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                if self.rg(x) {
                    let xv = self.value(x);
                    for ((o, v), &xi) in accumulate(grads, x, g.len()).iter_mut().zip(g).zip(xv) {
                        *o += v * gelu_grad(xi);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.rg(*x) {
                    for ((o, v), m) in accumulate(grads, *x, g.len()).iter_mut().zip(g).zip(mask) {
                        *o += v * m;
                    }
                }
            }
            Op::CrossEntropy { logits, label, probs } => {
                if self.rg(*logits) {
                    let dl = accumulate(grads, *logits, probs.len());
                    for (j, (o, p)) in dl.iter_mut().zip(probs).enumerate() {
                        let target = if j == *label { 1.0 } else { 0.0 };
                        *o += g[0] * (p - target);
                    }
                }
            }
            Op::Attention { q, k, v, heads, pattern, probs } => {
                let d = node.shape[1];
                let (dq, dk, dv) = attention::backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    d,
                    *heads,
                    pattern,
                    probs,
                    g,
                );
                for (var, delta) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.rg(var) {
                        for (o, x) in accumulate(grads, var, delta.len()).iter_mut().zip(&delta) {
                            *o += x;
                        }
                    }
                }
            }
        }
    }
}
