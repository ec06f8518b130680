//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op applied to its nodes in execution order, so the
//! tape is already topologically sorted and backward is a single reverse sweep.
//! Values are materialized eagerly; a node handle ([`Var`]) is just an index.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{gelu, gelu_grad, gemm, sigmoid, softmax_row, softplus};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradients of named leaves, keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Abs(Var),
    Softmax(Var),
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SliceLast {
        x: Var,
        start: usize,
    },
    ConcatLast(Vec<Var>),
    MaskedMean {
        x: Var,
        weights: Vec<f64>,
        counts: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    InBatchNll {
        sim: Var,
        positives: Vec<Vec<usize>>,
        exclude: Vec<Option<usize>>,
        probs: Vec<f64>,
        active: usize,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    name: Option<String>,
}

/// Recording of one forward computation.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    rng: ChaCha8Rng,
}

/// Result of [`Graph::backward`]: one optional gradient per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    names: Vec<Option<String>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of all named trainable leaves. Leaves that the loss does not
    /// depend on receive zero gradients.
    pub fn named(self) -> GradMap {
        let mut out = BTreeMap::new();
        for (g, name) in self.grads.into_iter().zip(self.names) {
            if let (Some(g), Some(name)) = (g, name) {
                out.insert(name, g);
            }
        }
        out
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training-mode graph whose dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Named leaf; gradients are produced for it when `requires_grad`.
    pub fn leaf(&mut self, name: impl Into<String>, value: Tensor, requires_grad: bool) -> Var {
        let v = self.push(value, Op::Leaf, requires_grad);
        self.nodes[v.0].name = Some(name.into());
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(shape, data), op, rg)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.value(x).data().iter().map(|v| f(*v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, data), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    /// Adds a vector along the last dimension of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let w = self.value(x).last_dim();
        if self.shape(bias) != [w] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} for last dim {w}", self.shape(bias)),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(w) {
            for (v, bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddBias(x, bias), rg))
    }

    /// `x · w` (or `x · wᵀ` when `trans_b`) over the last dimension of `x`;
    /// `w` is two-dimensional.
    pub fn matmul(&mut self, x: Var, w: Var, trans_b: bool) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 {
            return Err(Error::shape("matmul", format!("weight must be 2-D, got {ws:?}")));
        }
        let (k, n) = if trans_b { (ws[1], ws[0]) } else { (ws[0], ws[1]) };
        let xv = self.value(x);
        if xv.last_dim() != k {
            return Err(Error::shape(
                "matmul",
                format!("input {:?} against weight {ws:?} (trans_b={trans_b})", xv.shape()),
            ));
        }
        let m = xv.rows();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, xv.data(), false, self.value(w).data(), trans_b, &mut out, 0.0);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul { a: x, b: w, trans_b },
            rg,
        ))
    }

    /// Batched product of `[G, m, k]` with `[G, k, n]` (or `[G, n, k]` when `trans_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("batch_matmul", format!("{sa:?} vs {sb:?}")));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape("batch_matmul", format!("{sa:?} vs {sb:?} (trans_b={trans_b})")));
        }
        let mut out = vec![0.0; g * m * n];
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                false,
                &bd[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![g, m, n], out),
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} for shape {shape:?}")));
        }
        let out = permute_data(self.value(x).data(), &shape, perm);
        let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(new_shape, out),
            Op::Permute(x, perm.to_vec()),
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, Op::Abs(x), f64::abs)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        let w = t.last_dim();
        for row in t.data_mut().chunks_mut(w) {
            softmax_row(row);
        }
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Attention softmax over `[batch·heads, queries, keys]` scores where keys
    /// flagged invalid in `key_valid` (`[batch, keys]`, row-major) get exactly
    /// zero weight.
    pub fn masked_softmax(&mut self, x: Var, key_valid: Arc<Vec<bool>>, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || !s[0].is_multiple_of(heads) || key_valid.len() != (s[0] / heads) * s[2] {
            return Err(Error::shape(
                "masked_softmax",
                format!("scores {s:?}, {heads} heads, mask of {}", key_valid.len()),
            ));
        }
        let (g, q, k) = (s[0], s[1], s[2]);
        let mut t = self.value(x).clone();
        let data = t.data_mut();
        for gi in 0..g {
            let valid = &key_valid[(gi / heads) * k..(gi / heads + 1) * k];
            for qi in 0..q {
                let row = &mut data[(gi * q + qi) * k..(gi * q + qi + 1) * k];
                let max = row
                    .iter()
                    .zip(valid)
                    .filter(|(_, ok)| **ok)
                    .map(|(v, _)| *v)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (v, ok) in row.iter_mut().zip(valid) {
                    *v = if *ok { (*v - max).exp() } else { 0.0 };
                    sum += *v;
                }
                if sum > 0.0 {
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(t, Op::MaskedSoftmax(x), rg))
    }

    /// Layer normalization over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let w = self.value(x).last_dim();
        if self.shape(gamma) != [w] || self.shape(beta) != [w] {
            return Err(Error::shape(
                "layer_norm",
                format!("affine {:?}/{:?} for width {w}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * w..(r + 1) * w].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = xhat.clone();
        for row in out.chunks_mut(w) {
            for ((o, g), b) in row.iter_mut().zip(gd).zip(bd) {
                *o = *o * g + b;
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row lookup: `[ids.len(), width]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::shape("embedding", format!("table must be 2-D, got {:?}", t.shape())));
        }
        let (v, w) = (t.shape()[0], t.shape()[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Contract(format!("embedding id {bad} out of range for {v} rows")));
        }
        if ids.is_empty() {
            return Err(Error::shape("embedding", "no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * w);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), w], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Selects rows of `x` viewed as `[rows, last_dim]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.rows();
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(Error::shape("gather_rows", format!("rows {rows:?} from {n}")));
        }
        let w = xv.last_dim();
        let mut out = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            out.extend_from_slice(xv.row(r));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), w], out),
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout; identity outside training mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Dropout { x, mask }, rg))
    }

    /// Columns `[start, start + len)` of the last dimension.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let w = xv.last_dim();
        if len == 0 || start + len > w {
            return Err(Error::shape("slice_last", format!("[{start}, {}) of width {w}", start + len)));
        }
        let mut out = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SliceLast { x, start }, rg))
    }

    /// Concatenates along the last dimension; leading dimensions must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_last", "no inputs"))?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat_last", format!("{:?} vs {:?}", self.shape(first), s)));
            }
        }
        let rows = self.value(first).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).last_dim()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(shape, out), Op::ConcatLast(parts.to_vec()), rg))
    }

    /// Weighted mean over the middle axis of `[batch, len, width]` with 0/1
    /// weights `[batch, len]`. Errors on an all-zero weight row.
    pub fn masked_mean(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || weights.len() != s[0] * s[1] {
            return Err(Error::shape("masked_mean", format!("{s:?} with {} weights", weights.len())));
        }
        let (b, t, w) = (s[0], s[1], s[2]);
        let mut counts = vec![0.0; b];
        let mut out = vec![0.0; b * w];
        let xd = self.value(x).data();
        for bi in 0..b {
            let c: f64 = weights[bi * t..(bi + 1) * t].iter().sum();
            if c <= 0.0 {
                return Err(Error::Contract(format!("row {bi} has no non-pad positions")));
            }
            counts[bi] = c;
            let o = &mut out[bi * w..(bi + 1) * w];
            for ti in 0..t {
                let wt = weights[bi * t + ti];
                if wt != 0.0 {
                    let row = &xd[(bi * t + ti) * w..(bi * t + ti + 1) * w];
                    for (oo, v) in o.iter_mut().zip(row) {
                        *oo += wt * v;
                    }
                }
            }
            for oo in o.iter_mut() {
                *oo /= c;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![b, w], out),
            Op::MaskedMean {
                x,
                weights: weights.to_vec(),
                counts,
            },
            rg,
        ))
    }

    /// Scales each row (last dimension) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let w = xv.last_dim();
        let mut norms = Vec::with_capacity(xv.rows());
        let mut out = xv.data().to_vec();
        for (r, row) in out.chunks_mut(w).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Numeric(format!("row {r} has norm {n}")));
            }
            norms.push(n);
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::L2Normalize { x, norms }, rg))
    }

    /// Mean token cross-entropy of `[rows, classes]` logits; `None` targets are
    /// ignored. Errors when every target is ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, classes) = (lv.rows(), lv.last_dim());
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", format!("{} targets for {rows} rows", targets.len())));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Contract("cross_entropy with no active targets".into()));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(classes).enumerate() {
            if let Some(t) = targets[r] {
                if t >= classes {
                    return Err(Error::Contract(format!("target {t} out of range for {classes} classes")));
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - row[t];
                softmax_row(row);
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of one logit per row against targets in [0, 1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.numel() != targets.len() || targets.is_empty() {
            return Err(Error::shape("bce_with_logits", format!("{:?} vs {} targets", lv.shape(), targets.len())));
        }
        let loss = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(z, t)| softplus(*z) - t * z)
            .sum::<f64>()
            / targets.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Contrastive negative log-likelihood over a `[anchors, candidates]`
    /// score matrix. For anchor `a`, the softmax runs over every candidate but
    /// `exclude[a]`, and the loss averages `-log p` over the anchor's positives.
    /// Anchors without positives are skipped; the result averages the rest.
    pub fn in_batch_nll(
        &mut self,
        sim: Var,
        positives: &[Vec<usize>],
        exclude: &[Option<usize>],
    ) -> Result<Var> {
        let s = self.shape(sim).to_vec();
        if s.len() != 2 || positives.len() != s[0] || exclude.len() != s[0] {
            return Err(Error::shape("in_batch_nll", format!("{s:?} with {} anchors", positives.len())));
        }
        let n = s[1];
        let mut probs = vec![0.0; s[0] * n];
        let mut loss = 0.0;
        let mut active = 0;
        for a in 0..s[0] {
            if positives[a].is_empty() {
                continue;
            }
            if positives[a].iter().any(|&p| p >= n || Some(p) == exclude[a]) {
                return Err(Error::Contract(format!("invalid positive set for anchor {a}")));
            }
            active += 1;
            let row = self.value(sim).row(a);
            let pr = &mut probs[a * n..(a + 1) * n];
            let max = (0..n)
                .filter(|&x| Some(x) != exclude[a])
                .map(|x| row[x])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in 0..n {
                if Some(x) != exclude[a] {
                    pr[x] = (row[x] - max).exp();
                    sum += pr[x];
                }
            }
            let lse = max + sum.ln();
            for v in pr.iter_mut() {
                *v /= sum;
            }
            let np = positives[a].len() as f64;
            loss += positives[a].iter().map(|&p| lse - row[p]).sum::<f64>() / np;
        }
        if active == 0 {
            return Err(Error::Contract("no anchor has an in-batch positive".into()));
        }
        let rg = self.rg(sim);
        Ok(self.push(
            Tensor::scalar(loss / active as f64),
            Op::InBatchNll {
                sim,
                positives: positives.to_vec(),
                exclude: exclude.to_vec(),
                probs,
                active,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let l = lv.data()[0];
        if !l.is_finite() {
            return Err(Error::Numeric(format!("loss is {l}")));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut names: Vec<Option<String>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads, names });
        }
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if node.name.is_some() {
                    if grads[i].is_none() {
                        grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
                    }
                    names[i] = node.name.clone();
                }
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(Gradients { grads, names })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |o| add_into(o, gd));
                self.acc(grads, *b, |o| add_into(o, gd));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |o| add_into(o, gd));
                self.acc(grads, *b, |o| {
                    for (x, y) in o.iter_mut().zip(gd) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |o| {
                    for ((x, y), z) in o.iter_mut().zip(gd).zip(bv) {
                        *x += y * z;
                    }
                });
                self.acc(grads, *b, |o| {
                    for ((x, y), z) in o.iter_mut().zip(gd).zip(av) {
                        *x += y * z;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, |o| {
                    for (x, y) in o.iter_mut().zip(gd) {
                        *x += c * y;
                    }
                });
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, |o| add_into(o, gd));
                let w = g.last_dim();
                self.acc(grads, *b, |o| {
                    for row in gd.chunks(w) {
                        add_into(o, row);
                    }
                });
            }
            Op::MatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let n = g.last_dim();
                let m = g.rows();
                let k = av.last_dim();
                self.acc(grads, *a, |o| {
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, gd, false, bv.data(), !*trans_b, o, 1.0);
                });
                self.acc(grads, *b, |o| {
                    if *trans_b {
                        // B is [n, k]: dB = dCᵀ · A
                        gemm(n, m, k, gd, true, av.data(), false, o, 1.0);
                    } else {
                        gemm(k, m, n, av.data(), true, gd, false, o, 1.0);
                    }
                });
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (gr, m, k) = (sa[0], sa[1], sa[2]);
                let n = g.last_dim();
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                self.acc(grads, *a, |o| {
                    for t in 0..gr {
                        gemm(
                            m,
                            n,
                            k,
                            &gd[t * m * n..(t + 1) * m * n],
                            false,
                            &bd[t * k * n..(t + 1) * k * n],
                            !*trans_b,
                            &mut o[t * m * k..(t + 1) * m * k],
                            1.0,
                        );
                    }
                });
                self.acc(grads, *b, |o| {
                    for t in 0..gr {
                        let gt = &gd[t * m * n..(t + 1) * m * n];
                        let at = &ad[t * m * k..(t + 1) * m * k];
                        let ot = &mut o[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, gt, true, at, false, ot, 1.0);
                        } else {
                            gemm(k, m, n, at, true, gt, false, ot, 1.0);
                        }
                    }
                });
            }
            Op::Reshape(x) => self.acc(grads, *x, |o| add_into(o, gd)),
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(gd, g.shape(), &inv);
                self.acc(grads, *x, |o| add_into(o, &back));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |o| {
                    for ((acc, gg), v) in o.iter_mut().zip(gd).zip(xv) {
                        if *v > 0.0 {
                            *acc += gg;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |o| {
                    for ((acc, gg), v) in o.iter_mut().zip(gd).zip(xv) {
                        *acc += gg * gelu_grad(*v);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                self.acc(grads, *x, |o| {
                    for ((acc, gg), s) in o.iter_mut().zip(gd).zip(y) {
                        *acc += gg * s * (1.0 - s);
                    }
                });
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |o| {
                    for ((acc, gg), v) in o.iter_mut().zip(gd).zip(xv) {
                        if *v > 0.0 {
                            *acc += gg;
                        } else if *v < 0.0 {
                            *acc -= gg;
                        }
                    }
                });
            }
            Op::Softmax(x) | Op::MaskedSoftmax(x) => {
                let y = &node.value;
                let w = y.last_dim();
                self.acc(grads, *x, |o| {
                    for ((orow, grow), yrow) in o.chunks_mut(w).zip(gd.chunks(w)).zip(y.data().chunks(w)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((acc, gg), yy) in orow.iter_mut().zip(grow).zip(yrow) {
                            *acc += yy * (gg - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let w = g.last_dim();
                let gam = self.value(*gamma).data();
                self.acc(grads, *x, |o| {
                    for (r, (orow, grow)) in o.chunks_mut(w).zip(gd.chunks(w)).enumerate() {
                        let xh = &xhat[r * w..(r + 1) * w];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..w {
                            let gx = grow[j] * gam[j];
                            m1 += gx;
                            m2 += gx * xh[j];
                        }
                        m1 /= w as f64;
                        m2 /= w as f64;
                        for j in 0..w {
                            let gx = grow[j] * gam[j];
                            orow[j] += inv_std[r] * (gx - m1 - xh[j] * m2);
                        }
                    }
                });
                self.acc(grads, *gamma, |o| {
                    for (grow, xrow) in gd.chunks(w).zip(xhat.chunks(w)) {
                        for ((acc, gg), xh) in o.iter_mut().zip(grow).zip(xrow) {
                            *acc += gg * xh;
                        }
                    }
                });
                self.acc(grads, *beta, |o| {
                    for grow in gd.chunks(w) {
                        add_into(o, grow);
                    }
                });
            }
            Op::Embedding { table: x, ids: rows } | Op::GatherRows { x, rows } => {
                let w = g.last_dim();
                self.acc(grads, *x, |o| {
                    for (grow, &r) in gd.chunks(w).zip(rows) {
                        add_into(&mut o[r * w..(r + 1) * w], grow);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.acc(grads, *x, |o| {
                    for ((acc, gg), m) in o.iter_mut().zip(gd).zip(mask) {
                        *acc += gg * m;
                    }
                });
            }
            Op::SliceLast { x, start } => {
                let len = g.last_dim();
                let w = self.value(*x).last_dim();
                self.acc(grads, *x, |o| {
                    for (orow, grow) in o.chunks_mut(w).zip(gd.chunks(len)) {
                        add_into(&mut orow[*start..*start + len], grow);
                    }
                });
            }
            Op::ConcatLast(parts) => {
                let total = g.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    self.acc(grads, p, |o| {
                        for (orow, grow) in o.chunks_mut(w).zip(gd.chunks(total)) {
                            add_into(orow, &grow[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::MaskedMean { x, weights, counts } => {
                let s = self.shape(*x);
                let (b, t, w) = (s[0], s[1], s[2]);
                self.acc(grads, *x, |o| {
                    for bi in 0..b {
                        let grow = &gd[bi * w..(bi + 1) * w];
                        for ti in 0..t {
                            let wt = weights[bi * t + ti];
                            if wt != 0.0 {
                                let c = wt / counts[bi];
                                for (acc, gg) in o[(bi * t + ti) * w..(bi * t + ti + 1) * w].iter_mut().zip(grow) {
                                    *acc += c * gg;
                                }
                            }
                        }
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let w = y.last_dim();
                self.acc(grads, *x, |o| {
                    for (r, ((orow, grow), yrow)) in o
                        .chunks_mut(w)
                        .zip(gd.chunks(w))
                        .zip(y.data().chunks(w))
                        .enumerate()
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((acc, gg), yy) in orow.iter_mut().zip(grow).zip(yrow) {
                            *acc += (gg - yy * dot) / norms[r];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let scale = gd[0] / *count as f64;
                let w = self.value(*logits).last_dim();
                self.acc(grads, *logits, |o| {
                    for (r, (orow, prow)) in o.chunks_mut(w).zip(probs.chunks(w)).enumerate() {
                        if let Some(t) = targets[r] {
                            for (acc, p) in orow.iter_mut().zip(prow) {
                                *acc += scale * p;
                            }
                            orow[t] -= scale;
                        }
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let scale = gd[0] / targets.len() as f64;
                let z = self.value(*logits).data();
                self.acc(grads, *logits, |o| {
                    for ((acc, zz), t) in o.iter_mut().zip(z).zip(targets) {
                        *acc += scale * (sigmoid(*zz) - t);
                    }
                });
            }
            Op::InBatchNll {
                sim,
                positives,
                exclude,
                probs,
                active,
            } => {
                let scale = gd[0] / *active as f64;
                let n = self.value(*sim).last_dim();
                self.acc(grads, *sim, |o| {
                    for (a, pos) in positives.iter().enumerate() {
                        if pos.is_empty() {
                            continue;
                        }
                        let orow = &mut o[a * n..(a + 1) * n];
                        for x in 0..n {
                            if Some(x) != exclude[a] {
                                orow[x] += scale * probs[a * n + x];
                            }
                        }
                        let wp = scale / pos.len() as f64;
                        for &p in pos {
                            orow[p] -= wp;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                self.acc(grads, *x, |o| o.iter_mut().for_each(|v| *v += g0));
            }
            Op::Mean(x) => {
                let g0 = gd[0] / self.value(*x).numel() as f64;
                self.acc(grads, *x, |o| o.iter_mut().for_each(|v| *v += g0));
            }
        }
    }

    /// Runs `f` on the gradient buffer of `v`, allocating it on first use.
    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape().to_vec()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Row-major transpose of `data` (shape `shape`) so that output axis `i` is
/// input axis `perm[i]`.
fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    let inner = out_shape[nd - 1];
    let inner_stride = strides[nd - 1];
    loop {
        let base: usize = idx[..nd - 1].iter().zip(&strides).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            out.push(data[base + j * inner_stride]);
        }
        // advance the outer multi-index
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_formula() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let out = permute_data(&data, &shape, &[2, 0, 1]);
        // out[k][i][j] = in[i][j][k]
        for k in 0..4 {
            for i in 0..2 {
                for j in 0..3 {
                    assert_eq!(out[k * 6 + i * 3 + j], data[i * 12 + j * 4 + k]);
                }
            }
        }
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::new();
        let x = g.leaf("x", Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap(), true);
        let s = g.sum(x);
        let grads = g.backward(s).unwrap().named();
        assert_eq!(grads["x"].data(), &[1.0; 4]);
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let vals = vec![0.3, -1.2, 2.5, 4.0];
        let mut g = Graph::new();
        let x = g.leaf("x", Tensor::new(vec![2, 2], vals.clone()).unwrap(), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5);
        let grads = g.backward(loss).unwrap().named();
        assert_eq!(grads["x"].data(), vals.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar_and_nan() {
        let mut g = Graph::new();
        let x = g.leaf("x", Tensor::zeros(vec![3]), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
        let y = g.leaf("y", Tensor::scalar(f64::NAN), true);
        let s = g.sum(y);
        assert!(matches!(g.backward(s), Err(Error::Numeric(_))));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf("a", Tensor::full(vec![2], 2.0), true);
        let b = g.leaf("b", Tensor::full(vec![2], 3.0), false);
        let p = g.mul(a, b).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap().named();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads["a"].data(), &[3.0, 3.0]);
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2, 3], vec![5.0, 1.0, 9.0, 0.0, 0.0, 0.0]).unwrap());
        let y = g.masked_softmax(x, Arc::new(vec![true, true, false]), 1).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[2], 0.0);
        assert_eq!(v[5], 0.0);
        assert!((v[0] + v[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_is_identity_in_eval_and_seeded_in_training() {
        let t = Tensor::full(vec![64], 1.0);
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let y = g.dropout(x, 0.5).unwrap();
        assert_eq!(x, y);

        let run = |seed| {
            let mut g = Graph::training(seed);
            let x = g.constant(t.clone());
            let y = g.dropout(x, 0.5).unwrap();
            g.value(y).clone()
        };
        let a = run(7);
        assert_eq!(a, run(7));
        assert!(a.data().iter().all(|v| *v == 0.0 || *v == 2.0));
    }
}
