//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node whose inputs were created earlier, so the
//! tape is already in topological order and the backward pass is a single
//! reverse sweep. Gradient buffers are allocated the first time a node is
//! reached during that sweep.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Softmax(Var, usize),
    WeightedLayerSum(Vec<Var>, Var),
    LayerNorm(Var, Vec<f64>),
    Gelu(Var),
    Tanh(Var),
    SqrtClamp(Var, f64),
    MeanRows(Var),
    SumAll(Var),
    L2NormalizeRows(Var, Vec<f64>),
    L2NormalizeCols(Var, Vec<f64>),
    Reshape(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    /// Mean cross-entropy over a batch of cosine rows; the local gradient
    /// with respect to the cosines is computed during the forward pass.
    AamCe(Var, Vec<f64>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn get_mut(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.as_mut())
    }
}

fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// a[m×n] · b[k×n]ᵀ
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// a[m×k]ᵀ · c[m×n]
fn mm_tn(a: &[f64], c: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &cv) in orow.iter_mut().zip(crow) {
                *o += av * cv;
            }
        }
    }
    out
}

fn transpose(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Shape(format!("{op} expects a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, false)
    }

    /// A differentiable leaf not backed by a stored parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, true)
    }

    /// Leaf for a stored parameter. Repeated calls with one id return the
    /// same node. Non-trainable parameters behave as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).detached(), Op::Leaf, store.is_trainable(id));
        self.nodes[v.0].param = Some(id);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat_dims(a, "transpose")?;
        let out = transpose(self.value(a).data(), m, n);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(a), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|x| x * c).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(&shape, out).unwrap(), Op::Scale(a, c), rg)
    }

    fn row_broadcast(&mut self, a: Var, row: Var, mul: bool) -> Result<Var> {
        let (m, n) = self.mat_dims(a, "row broadcast")?;
        let rs = self.shape(row);
        if rs.iter().product::<usize>() != n || (rs.len() == 2 && rs[0] != 1) {
            return Err(Error::dim("row broadcast", self.shape(a), rs));
        }
        let r = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            for (o, &rv) in out[i * n..(i + 1) * n].iter_mut().zip(r) {
                if mul {
                    *o *= rv;
                } else {
                    *o += rv;
                }
            }
        }
        let op = if mul { Op::MulRow(a, row) } else { Op::AddRow(a, row) };
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor::new(&[m, n], out)?, op, rg))
    }

    /// `a[m×n] + row[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, false)
    }

    /// `a[m×n] ⊙ row[n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, true)
    }

    /// Softmax of a matrix along `axis` (0: each column sums to 1, 1: each
    /// row sums to 1). Maximum-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.mat_dims(x, "softmax")?;
        if axis > 1 {
            return Err(Error::Shape(format!("softmax axis {axis} invalid for a matrix")));
        }
        let xv = self.value(x).data();
        if xv.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let mut out = vec![0.0; m * n];
        let (outer, inner, stride_o, stride_i) = if axis == 1 { (m, n, n, 1) } else { (n, m, 1, n) };
        for o in 0..outer {
            let base = o * stride_o;
            let mut mx = f64::NEG_INFINITY;
            for i in 0..inner {
                mx = mx.max(xv[base + i * stride_i]);
            }
            let mut sum = 0.0;
            for i in 0..inner {
                let e = (xv[base + i * stride_i] - mx).exp();
                out[base + i * stride_i] = e;
                sum += e;
            }
            for i in 0..inner {
                out[base + i * stride_i] /= sum;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::Softmax(x, axis), rg))
    }

    /// `Σ_l w[l] · layers[l]`.
    pub fn weighted_layer_sum(&mut self, layers: &[Var], w: Var) -> Result<Var> {
        let first = *layers
            .first()
            .ok_or_else(|| Error::EmptyInput("weighted_layer_sum over no layers".into()))?;
        let shape = self.shape(first).to_vec();
        for &l in layers {
            if self.shape(l) != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "ragged layer stack: {:?} vs {:?}",
                    shape,
                    self.shape(l)
                )));
            }
        }
        if self.value(w).len() != layers.len() {
            return Err(Error::dim("weighted_layer_sum", &[layers.len()], self.shape(w)));
        }
        let wv = self.value(w).data().to_vec();
        let mut out = vec![0.0; shape.iter().product()];
        for (&l, &wl) in layers.iter().zip(&wv) {
            for (o, z) in out.iter_mut().zip(self.value(l).data()) {
                *o += wl * z;
            }
        }
        let mut deps = layers.to_vec();
        deps.push(w);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::new(&shape, out)?, Op::WeightedLayerSum(layers.to_vec(), w), rg))
    }

    /// Row-wise standardization (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat_dims(x, "layer_norm")?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::LayerNorm(x, inv_std), rg))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let out = t.data().iter().map(|&v| f(v)).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&shape, out).unwrap(), op, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), |v| gelu(v).0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    /// `sqrt(max(x, floor))`
    pub fn sqrt_clamp(&mut self, x: Var, floor: f64) -> Var {
        self.map(x, Op::SqrtClamp(x, floor), |v| v.max(floor).sqrt())
    }

    /// Mean over rows: `[m×n] -> [1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat_dims(x, "mean_rows")?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(&xv[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[1, n], out)?, Op::MeanRows(x), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    fn normalize(&mut self, x: Var, by_rows: bool) -> Result<Var> {
        let (m, n) = self.mat_dims(x, "l2_normalize")?;
        let xv = self.value(x).data();
        let (outer, inner, so, si) = if by_rows { (m, n, n, 1) } else { (n, m, 1, n) };
        let mut out = vec![0.0; m * n];
        let mut norms = vec![0.0; outer];
        for o in 0..outer {
            let nrm = (0..inner)
                .map(|i| xv[o * so + i * si].powi(2))
                .sum::<f64>()
                .sqrt();
            if !(nrm > 0.0 && nrm.is_finite()) {
                return Err(Error::Numeric(format!("cannot normalize vector with norm {nrm}")));
            }
            norms[o] = nrm;
            for i in 0..inner {
                out[o * so + i * si] = xv[o * so + i * si] / nrm;
            }
        }
        let op = if by_rows {
            Op::L2NormalizeRows(x, norms)
        } else {
            Op::L2NormalizeCols(x, norms)
        };
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[m, n], out)?, op, rg))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        self.normalize(x, true)
    }

    pub fn l2_normalize_cols(&mut self, x: Var) -> Result<Var> {
        self.normalize(x, false)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).detached().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat_dims(x, "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(Error::Shape(format!("rows {start}..{} out of {m}", start + len)));
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[len, n], out)?, Op::SliceRows(x, start), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat_dims(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::Shape(format!("cols {start}..{} out of {n}", start + len)));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[m, len], out)?, Op::SliceCols(x, start), rg))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::EmptyInput("concat_rows of nothing".into()))?;
        let (_, n) = self.mat_dims(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (m, n2) = self.mat_dims(x, "concat_rows")?;
            if n2 != n {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(x)));
            }
            rows += m;
            out.extend_from_slice(self.value(x).data());
        }
        let rg = self.rg(xs);
        Ok(self.push(Tensor::new(&[rows, n], out)?, Op::ConcatRows(xs.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::EmptyInput("concat_cols of nothing".into()))?;
        let (m, _) = self.mat_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (m2, n) = self.mat_dims(x, "concat_cols")?;
            if m2 != m {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(x)));
            }
            widths.push(n);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&x, &n) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[i * n..(i + 1) * n]);
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(Tensor::new(&[m, total], out)?, Op::ConcatCols(xs.to_vec()), rg))
    }

    /// Additive-angular-margin cross-entropy over a `[B×C]` matrix of
    /// cosines. The target logit is `s·cos(θ_y + m)` with `θ_y + m` clamped to
    /// `[0, π]`; other logits are `s·cos θ_j`. Returns the batch mean.
    pub fn aam_cross_entropy(&mut self, cos: Var, labels: &[usize], margin: f64, scale: f64) -> Result<Var> {
        let (b, c) = self.mat_dims(cos, "aam_cross_entropy")?;
        if labels.len() != b {
            return Err(Error::dim("aam_cross_entropy", &[b, c], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Label {
                label: bad,
                n_classes: c,
            });
        }
        let cv = self.value(cos).data();
        if cv.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite cosine".into()));
        }
        let mut total = 0.0;
        let mut dcos = vec![0.0; b * c];
        let mut logits = vec![0.0; c];
        for (i, &y) in labels.iter().enumerate() {
            let row = &cv[i * c..(i + 1) * c];
            let (phi, dphi) = margin_target(row[y], margin);
            for j in 0..c {
                logits[j] = scale * if j == y { phi } else { row[j] };
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|z| (z - mx).exp()).sum();
            let lse = mx + sum.ln();
            total += lse - logits[y];
            for j in 0..c {
                let p = (logits[j] - lse).exp();
                let dz = (p - if j == y { 1.0 } else { 0.0 }) / b as f64;
                dcos[i * c + j] = scale * dz * if j == y { dphi } else { 1.0 };
            }
        }
        let rg = self.rg(&[cos]);
        Ok(self.push(Tensor::scalar(total / b as f64), Op::AamCe(cos, dcos), rg))
    }

    /// Reverse sweep from scalar `out` with seed 1.
    pub fn backward(&self, out: Var) -> Result<Grads> {
        if self.value(out).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(out)
            )));
        }
        self.backward_seeded(out, &[1.0])
    }

    /// Reverse sweep from `out` with an explicit upstream gradient.
    pub fn backward_seeded(&self, out: Var, seed: &[f64]) -> Result<Grads> {
        if seed.len() != self.value(out).len() {
            return Err(Error::dim("backward seed", self.shape(out), &[seed.len()]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed.to_vec());
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        if self.nodes[v.0].requires_grad {
            accumulate(&mut grads[v.0], g);
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let dims = |v: Var| {
            let s = self.nodes[v.0].value.shape();
            (s[0], s.get(1).copied().unwrap_or(1))
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(*a);
                let (_, n) = dims(*b);
                if self.nodes[a.0].requires_grad {
                    self.send(grads, *a, &mm_nt(g, val(*b), m, n, k));
                }
                if self.nodes[b.0].requires_grad {
                    self.send(grads, *b, &mm_tn(val(*a), g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = dims(*a);
                self.send(grads, *a, &transpose(g, n, m));
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g);
                self.send(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.send(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = g.iter().zip(val(*b)).map(|(g, b)| g * b).collect();
                let gb: Vec<f64> = g.iter().zip(val(*a)).map(|(g, a)| g * a).collect();
                self.send(grads, *a, &ga);
                self.send(grads, *b, &gb);
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.send(grads, *a, &ga);
            }
            Op::AddRow(a, row) => {
                let (m, n) = dims(*a);
                self.send(grads, *a, g);
                let mut gr = vec![0.0; n];
                for i in 0..m {
                    gr.iter_mut().zip(&g[i * n..(i + 1) * n]).for_each(|(r, v)| *r += v);
                }
                self.send(grads, *row, &gr);
            }
            Op::MulRow(a, row) => {
                let (m, n) = dims(*a);
                let av = val(*a);
                let rv = val(*row);
                let mut ga = vec![0.0; m * n];
                let mut gr = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = g[i * n + j] * rv[j];
                        gr[j] += g[i * n + j] * av[i * n + j];
                    }
                }
                self.send(grads, *a, &ga);
                self.send(grads, *row, &gr);
            }
            Op::Softmax(x, axis) => {
                let (m, n) = dims(*x);
                let (outer, inner, so, si) = if *axis == 1 { (m, n, n, 1) } else { (n, m, 1, n) };
                let mut gx = vec![0.0; m * n];
                for o in 0..outer {
                    let base = o * so;
                    let dot: f64 = (0..inner).map(|i| y[base + i * si] * g[base + i * si]).sum();
                    for i in 0..inner {
                        let k = base + i * si;
                        gx[k] = y[k] * (g[k] - dot);
                    }
                }
                self.send(grads, *x, &gx);
            }
            Op::WeightedLayerSum(layers, w) => {
                let wv = val(*w);
                let mut gw = vec![0.0; layers.len()];
                for (l, &lv) in layers.iter().enumerate() {
                    if self.nodes[lv.0].requires_grad {
                        let gl: Vec<f64> = g.iter().map(|v| v * wv[l]).collect();
                        self.send(grads, lv, &gl);
                    }
                    gw[l] = val(lv).iter().zip(g).map(|(z, g)| z * g).sum();
                }
                self.send(grads, *w, &gw);
            }
            Op::LayerNorm(x, inv_std) => {
                let (m, n) = dims(*x);
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let mg = gr.iter().sum::<f64>() / n as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        gx[i * n + j] = inv_std[i] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                self.send(grads, *x, &gx);
            }
            Op::Gelu(x) => {
                let gx: Vec<f64> = g.iter().zip(val(*x)).map(|(g, &v)| g * gelu(v).1).collect();
                self.send(grads, *x, &gx);
            }
            Op::Tanh(x) => {
                let gx: Vec<f64> = g.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect();
                self.send(grads, *x, &gx);
            }
            Op::SqrtClamp(x, floor) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(val(*x))
                    .zip(y)
                    .map(|((g, &xv), &yv)| if xv > *floor { g * 0.5 / yv } else { 0.0 })
                    .collect();
                self.send(grads, *x, &gx);
            }
            Op::MeanRows(x) => {
                let (m, n) = dims(*x);
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] = g[j] / m as f64;
                    }
                }
                self.send(grads, *x, &gx);
            }
            Op::SumAll(x) => {
                let gx = vec![g[0]; self.nodes[x.0].value.len()];
                self.send(grads, *x, &gx);
            }
            Op::L2NormalizeRows(x, norms) | Op::L2NormalizeCols(x, norms) => {
                let by_rows = matches!(node.op, Op::L2NormalizeRows(..));
                let (m, n) = dims(*x);
                let (outer, inner, so, si) = if by_rows { (m, n, n, 1) } else { (n, m, 1, n) };
                let mut gx = vec![0.0; m * n];
                for o in 0..outer {
                    let dot: f64 = (0..inner).map(|i| y[o * so + i * si] * g[o * so + i * si]).sum();
                    for i in 0..inner {
                        let k = o * so + i * si;
                        gx[k] = (g[k] - y[k] * dot) / norms[o];
                    }
                }
                self.send(grads, *x, &gx);
            }
            Op::Reshape(x) => self.send(grads, *x, g),
            Op::SliceRows(x, start) => {
                let (m, n) = dims(*x);
                let mut gx = vec![0.0; m * n];
                gx[start * n..start * n + g.len()].copy_from_slice(g);
                self.send(grads, *x, &gx);
            }
            Op::SliceCols(x, start) => {
                let (m, n) = dims(*x);
                let len = g.len() / m;
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    gx[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.send(grads, *x, &gx);
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = self.nodes[x.0].value.len();
                    self.send(grads, x, &g[off..off + len]);
                    off += len;
                }
            }
            Op::ConcatCols(xs) => {
                let m = node.value.rows();
                let total = node.value.cols();
                let mut off = 0;
                for &x in xs {
                    let (_, n) = dims(x);
                    let mut gx = Vec::with_capacity(m * n);
                    for i in 0..m {
                        gx.extend_from_slice(&g[i * total + off..i * total + off + n]);
                    }
                    self.send(grads, x, &gx);
                    off += n;
                }
            }
            Op::AamCe(cos, dcos) => {
                let gx: Vec<f64> = dcos.iter().map(|d| d * g[0]).collect();
                self.send(grads, *cos, &gx);
            }
        }
    }

    /// Adds the gradients of every parameter leaf into the store's
    /// accumulators. Frozen parameters are never touched.
    pub fn accumulate_param_grads(&self, grads: &Grads, store: &mut ParamStore) {
        let mut entries: Vec<(ParamId, Var)> = self.param_vars.iter().map(|(&p, &v)| (p, v)).collect();
        entries.sort();
        for (id, v) in entries {
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            if let Some(g) = grads.get(v) {
                store.get_mut(id).accumulate_grad(g);
            }
        }
    }
}

/// `cos(acos(c) + m)` and its derivative with respect to `c`, with the
/// angle clamped to `[0, π]`.
pub(crate) fn margin_target(c: f64, m: f64) -> (f64, f64) {
    if m == 0.0 {
        return (c, 1.0);
    }
    let cc = c.clamp(-1.0 + 1e-12, 1.0 - 1e-12);
    let theta = cc.acos();
    let a = theta + m;
    if a >= std::f64::consts::PI {
        return (-1.0, 0.0);
    }
    if a <= 0.0 {
        return (1.0, 0.0);
    }
    let d = if c == cc { a.sin() / theta.sin() } else { 0.0 };
    (a.cos(), d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    /// Projects a tensor-valued output onto fixed random weights so every
    /// output entry contributes to the checked scalar.
    fn project(g: &mut Graph, y: Var, seed: u64) -> Var {
        let shape = g.shape(y).to_vec();
        let r = g.constant(Tensor::randn(&shape, 1.0, &mut rng(seed)));
        let p = g.mul(y, r).unwrap();
        g.sum_all(p)
    }

    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
        finite_difference(&inputs, 1e-6, |g, vs| {
            let y = f(g, vs)?;
            Ok(project(g, y, 99))
        })
        .unwrap()
    }

    #[test]
    fn matmul_identity_and_small_case() {
        let mut g = Graph::new();
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let i = g.constant(Tensor::identity(2));
        let xv = g.constant(x.clone());
        let y = g.matmul(i, xv).unwrap();
        assert_eq!(g.value(y), &x);

        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut r = rng(1);
        let a = Tensor::randn(&[5, 4], 1.0, &mut r);
        let b = Tensor::randn(&[4, 3], 1.0, &mut r);
        let err = check(vec![a, b], |g, v| g.matmul(v[0], v[1]));
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_analytic_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[2.5, 2.5, 2.5]));
        let y = g.softmax(x, 1).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[1, 2], &[0.0, 3f64.ln()]));
        let y = g.softmax(x, 1).unwrap();
        assert!((g.value(y).data()[0] - 0.25).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[0.0, f64::NAN]));
        assert!(matches!(g.softmax(x, 1), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_gradient_axis0() {
        let x = Tensor::randn(&[7, 4], 1.0, &mut rng(2));
        let err = check(vec![x], |g, v| g.softmax(v[0], 0));
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn weighted_layer_sum_selection_and_zero() {
        let mut r = rng(3);
        let layers: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[5, 4], 1.0, &mut r)).collect();
        let mut g = Graph::new();
        let lv: Vec<Var> = layers.iter().map(|l| g.constant(l.clone())).collect();
        let w = g.constant(t(&[4], &[0.0, 0.0, 1.0, 0.0]));
        let o = g.weighted_layer_sum(&lv, w).unwrap();
        assert_eq!(g.value(o), &layers[2]);
        let w0 = g.constant(Tensor::zeros(&[4]));
        let o = g.weighted_layer_sum(&lv, w0).unwrap();
        assert!(g.value(o).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weighted_layer_sum_rejects_ragged_stack() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[5, 4]));
        let b = g.constant(Tensor::zeros(&[4, 4]));
        let w = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.weighted_layer_sum(&[a, b], w), Err(Error::Shape(_))));
    }

    #[test]
    fn weighted_layer_sum_gradient() {
        let mut r = rng(4);
        let mut inputs: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[5, 4], 1.0, &mut r)).collect();
        inputs.push(Tensor::randn(&[4], 1.0, &mut r));
        let err = check(inputs, |g, v| g.weighted_layer_sum(&v[..4], v[4]));
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        let mut r = rng(5);
        let a = Tensor::randn(&[3, 4], 1.0, &mut r);
        let b = Tensor::randn(&[3, 4], 1.0, &mut r);
        let row = Tensor::randn(&[4], 1.0, &mut r);
        let e = check(vec![a.clone(), b.clone()], |g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(s, v[1])?;
            let m = g.mul(d, v[1])?;
            Ok(g.scale(m, 0.7))
        });
        assert!(e < 1e-6, "arith {e}");
        let e = check(vec![a.clone(), row.clone()], |g, v| {
            let x = g.mul_row(v[0], v[1])?;
            g.add_row(x, v[1])
        });
        assert!(e < 1e-6, "row {e}");
        let e = check(vec![a.clone()], |g, v| {
            let x = g.layer_norm(v[0])?;
            let x = g.gelu(x);
            Ok(g.tanh(x))
        });
        assert!(e < 1e-6, "ln/gelu/tanh {e}");
        let e = check(vec![a.clone(), b.clone()], |g, v| {
            let x = g.transpose(v[0])?;
            let x = g.slice_cols(x, 1, 2)?;
            let y = g.slice_rows(v[1], 1, 2)?;
            let y = g.reshape(y, &[4, 2])?;
            let c = g.concat_cols(&[x, y])?;
            let d = g.concat_rows(&[c, c])?;
            g.mean_rows(d)
        });
        assert!(e < 1e-6, "structural {e}");
        let e = check(vec![a.clone()], |g, v| {
            let x = g.l2_normalize_rows(v[0])?;
            g.l2_normalize_cols(x)
        });
        assert!(e < 1e-6, "normalize {e}");
        let pos = Tensor::new(&[3, 4], a.data().iter().map(|v| v * v + 0.1).collect()).unwrap();
        let e = check(vec![pos], |g, v| Ok(g.sqrt_clamp(v[0], 1e-9)));
        assert!(e < 1e-6, "sqrt {e}");
    }

    #[test]
    fn aam_gradient() {
        let mut r = rng(6);
        let cos = Tensor::uniform(&[4, 5], 0.9, &mut r);
        let err = finite_difference(&[cos], 1e-5, |g, v| g.aam_cross_entropy(v[0], &[0, 3, 1, 4], 0.2, 30.0)).unwrap();
        // s = 30 amplifies curvature; objective-level tolerance applies.
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn backward_of_sum_equals_sum_of_backwards() {
        let mut r = rng(7);
        let a = Tensor::randn(&[3, 3], 1.0, &mut r);
        let b = Tensor::randn(&[3, 3], 1.0, &mut r);
        let build = |g: &mut Graph| {
            let av = g.input(a.clone());
            let bv = g.constant(b.clone());
            let p = g.matmul(av, bv).unwrap();
            let l1 = g.sum_all(p);
            let sm = g.softmax(av, 1).unwrap();
            let q = g.mul(sm, bv).unwrap();
            let l2 = g.sum_all(q);
            (av, l1, l2)
        };
        let mut g = Graph::new();
        let (av, l1, l2) = build(&mut g);
        let sum = g.add(l1, l2).unwrap();
        let joint = g.backward(sum).unwrap().get(av).unwrap().to_vec();
        let g1 = g.backward(l1).unwrap().get(av).unwrap().to_vec();
        let g2 = g.backward(l2).unwrap().get(av).unwrap().to_vec();
        for ((j, x), y) in joint.iter().zip(&g1).zip(&g2) {
            assert!((j - (x + y)).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_param_receives_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::full(&[2, 2], 0.5), false).unwrap();
        let u = store.add("u", Tensor::full(&[2, 2], 0.5), true).unwrap();
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let uv = g.param(&store, u);
        let p = g.matmul(wv, uv).unwrap();
        let l = g.sum_all(p);
        let grads = g.backward(l).unwrap();
        g.accumulate_param_grads(&grads, &mut store);
        assert!(store.get(w).grad().is_none());
        assert!(store.get(u).grad().is_some());
    }

    #[test]
    fn tied_param_accumulates_once_per_use() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::full(&[1, 1], 3.0), true).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, w);
        let b = g.param(&store, w);
        assert_eq!(a, b);
        let p = g.mul(a, b).unwrap();
        let l = g.sum_all(p);
        let grads = g.backward(l).unwrap();
        g.accumulate_param_grads(&grads, &mut store);
        assert_eq!(store.get(w).grad().unwrap(), &[6.0]);
    }

    #[test]
    fn margin_target_angle_clamp() {
        let (phi, d) = margin_target(-0.999, 0.5);
        assert_eq!(phi, -1.0);
        assert_eq!(d, 0.0);
        let (phi, _) = margin_target(0.3, 0.0);
        assert_eq!(phi, 0.3);
    }
}
