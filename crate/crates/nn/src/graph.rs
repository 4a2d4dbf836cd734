//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every primitive as a node in creation order, so node
//! inputs always precede the node itself and a single reverse sweep yields
//! exact gradients. Gradients are accumulated additively over fan-out.
//!
//! All row-wise primitives (dense layers, layer norm, causal attention within
//! a segment) compute each output row from the corresponding input rows only,
//! with a fixed accumulation order. Mutating later rows of a sequence therefore
//! leaves earlier outputs bit-identical.

use rand::Rng;

use crate::error::{NnError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    MatMulNT { a: usize, b: usize },
    AddBias { x: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    ScaleBy { a: usize, s: usize },
    Exp { a: usize },
    Relu { a: usize },
    Gelu { a: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    L2Normalize { x: usize, norms: Vec<f64>, eps: f64 },
    GatherRows { x: usize, idx: Vec<usize> },
    GatherSum { x: usize, groups: Vec<Vec<usize>> },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { a: usize, b: usize },
    Attention { q: usize, k: usize, v: usize, heads: usize, segments: Vec<usize>, weights: Vec<Tensor> },
    Sum { a: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, row_weights: Vec<f64>, probs: Vec<f64> },
    Bce { logits: usize, targets: Vec<f64>, pos_weight: Vec<f64>, row_weights: Vec<f64> },
    SqError { pred: usize, target: Vec<f64>, row_weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    binding: Option<(u64, ParamId)>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> NnError {
    NnError::Shape { op, detail }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(NnError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            binding: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// The single value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
            binding: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients without being bound to a store.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
            binding: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reads a parameter into the graph. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Leaf,
            needs_grad: store.is_trainable(id),
            binding: Some((store.uid(), id)),
        });
        Var(self.nodes.len() - 1)
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = &self.nodes[v.0].value;
        if t.shape().len() != 2 {
            return Err(shape_err(op, format!("expected a matrix, got shape {:?}", t.shape())));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    /// `a · b` for `a: [n, k]`, `b: [k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.mat_dims(a, "matmul")?;
        let (k2, m) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{n}, {k}] x [{k2}, {m}]")));
        }
        let mut out = vec![0.0; n * m];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![n, m], out)?, Op::MatMul { a: a.0, b: b.0 }, ng, "matmul")
    }

    /// `a · bᵀ` for `a: [n, k]`, `b: [m, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.mat_dims(a, "matmul_nt")?;
        let (m, k2) = self.mat_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("[{n}, {k}] x [{m}, {k2}]^T")));
        }
        let mut out = vec![0.0; n * m];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![n, m], out)?, Op::MatMulNT { a: a.0, b: b.0 }, ng, "matmul_nt")
    }

    /// Adds a `[m]` bias to every row of `x: [n, m]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = self.mat_dims(x, "add_bias")?;
        if self.value(b).len() != m {
            return Err(shape_err(
                "add_bias",
                format!("bias of length {} for {m} columns", self.value(b).len()),
            ));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for i in 0..n {
            for (o, bv) in out.row_mut(i).iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(out, Op::AddBias { x: x.0, b: b.0 }, ng, "add_bias")
    }

    /// Dense layer `x · w + b`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add { a: a.0, b: b.0 }, ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub { a: a.0, b: b.0 }, ng, "sub")
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul { a: a.0, b: b.0 }, ng, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.map(a, |x| x * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale { a: a.0, c }, ng, "scale")
    }

    /// Multiplies every element of `a` by the one-element node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("scale_by", format!("scale has shape {:?}", self.value(s).shape())));
        }
        let c = self.scalar(s);
        let out = self.map(a, |x| x * c);
        let ng = self.ng(a) || self.ng(s);
        self.push(out, Op::ScaleBy { a: a.0, s: s.0 }, ng, "scale_by")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, f64::exp);
        let ng = self.ng(a);
        self.push(out, Op::Exp { a: a.0 }, ng, "exp")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu { a: a.0 }, ng, "relu")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        let ng = self.ng(a);
        self.push(out, Op::Gelu { a: a.0 }, ng, "gelu")
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length `d`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.mat_dims(x, "layer_norm")?;
        if d == 0 || !(eps > 0.0) {
            return Err(NnError::Config(format!("layer_norm needs d >= 1 and eps > 0 (d={d}, eps={eps})")));
        }
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "affine lengths {} / {} for width {d}",
                    self.value(gamma).len(),
                    self.value(beta).len()
                ),
            ));
        }
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            Tensor::new(vec![n, d], out)?,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std },
            ng,
            "layer_norm",
        )
    }

    /// Scales every row to unit L2 norm; the denominator is `max(‖row‖, eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.mat_dims(x, "l2_normalize")?;
        let xv = self.value(x);
        let mut out = vec![0.0; n * d];
        let mut norms = vec![0.0; n];
        for i in 0..n {
            let row = xv.row(i);
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[i] = nrm;
            let den = nrm.max(eps);
            for j in 0..d {
                out[i * d + j] = row[j] / den;
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![n, d], out)?, Op::L2Normalize { x: x.0, norms, eps }, ng, "l2_normalize")
    }

    /// Selects rows of `x` by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.mat_dims(x, "gather_rows")?;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(shape_err("gather_rows", format!("row {i} out of {n}")));
            }
            out.extend_from_slice(xv.row(i));
        }
        let ng = self.ng(x);
        self.push(
            Tensor::new(vec![idx.len(), d], out)?,
            Op::GatherRows { x: x.0, idx: idx.to_vec() },
            ng,
            "gather_rows",
        )
    }

    /// Output row `r` is the sum of the rows of `x` listed in `groups[r]`
    /// (summed in list order; an empty group yields a zero row).
    pub fn gather_sum(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let (n, d) = self.mat_dims(x, "gather_sum")?;
        let xv = self.value(x);
        let mut out = vec![0.0; groups.len() * d];
        for (r, g) in groups.iter().enumerate() {
            let orow = &mut out[r * d..(r + 1) * d];
            for &i in g {
                if i >= n {
                    return Err(shape_err("gather_sum", format!("row {i} out of {n}")));
                }
                for (o, v) in orow.iter_mut().zip(xv.row(i)) {
                    *o += v;
                }
            }
        }
        let ng = self.ng(x);
        let rows = groups.len();
        self.push(Tensor::new(vec![rows, d], out)?, Op::GatherSum { x: x.0, groups }, ng, "gather_sum")
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows", "no inputs".into()));
        }
        let (_, d) = self.mat_dims(parts[0], "concat_rows")?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (n, dp) = self.mat_dims(p, "concat_rows")?;
            if dp != d {
                return Err(shape_err("concat_rows", format!("{dp} columns, expected {d}")));
            }
            out.extend_from_slice(self.value(p).data());
            rows += n;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::ConcatRows { parts: parts.iter().map(|p| p.0).collect() },
            ng,
            "concat_rows",
        )
    }

    /// `[a | b]` for matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, p) = self.mat_dims(a, "concat_cols")?;
        let (n2, q) = self.mat_dims(b, "concat_cols")?;
        if n != n2 {
            return Err(shape_err("concat_cols", format!("{n} vs {n2} rows")));
        }
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(self.value(a).row(i));
            out.extend_from_slice(self.value(b).row(i));
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![n, p + q], out)?, Op::ConcatCols { a: a.0, b: b.0 }, ng, "concat_cols")
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(NnError::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let shape = self.value(x).shape().to_vec();
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = self.constant(Tensor::new(shape, mask)?);
        self.mul(x, m)
    }

    /// Multi-head causal scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[T, d]` with `d` divisible by `heads`. `segments`
    /// lists consecutive sequence lengths summing to `T`; positions attend only
    /// to earlier-or-equal positions of their own segment. Per-segment weights
    /// `[heads, L, L]` are kept on the node (see [`Graph::attention_weights`]).
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: &[usize]) -> Result<Var> {
        let (t, d) = self.mat_dims(q, "attention")?;
        if self.value(k).shape() != [t, d] || self.value(v).shape() != [t, d] {
            return Err(shape_err("attention", "q, k, v must share shape".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(NnError::Config(format!("width {d} is not divisible by {heads} heads")));
        }
        if segments.iter().sum::<usize>() != t || segments.iter().any(|&l| l == 0) {
            return Err(shape_err("attention", format!("segments {segments:?} do not tile {t} rows")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; t * d];
        let mut all_weights = Vec::with_capacity(segments.len());
        let mut start = 0;
        let mut scores = Vec::new();
        for &len in segments {
            let mut w = vec![0.0; heads * len * len];
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..len {
                    let qi = &qv[(start + i) * d + c0..(start + i) * d + c0 + dh];
                    scores.clear();
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &kv[(start + j) * d + c0..(start + j) * d + c0 + dh];
                        let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        mx = mx.max(s);
                        scores.push(s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - mx).exp();
                        z += *s;
                    }
                    let wrow = &mut w[(h * len + i) * len..(h * len + i + 1) * len];
                    for j in 0..=i {
                        wrow[j] = scores[j] / z;
                    }
                    let orow = &mut out[(start + i) * d + c0..(start + i) * d + c0 + dh];
                    for j in 0..=i {
                        let vj = &vv[(start + j) * d + c0..(start + j) * d + c0 + dh];
                        let wij = wrow[j];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += wij * x;
                        }
                    }
                }
            }
            all_weights.push(Tensor::new(vec![heads, len, len], w)?);
            start += len;
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            Tensor::new(vec![t, d], out)?,
            Op::Attention { q: q.0, k: k.0, v: v.0, heads, segments: segments.to_vec(), weights: all_weights },
            ng,
            "attention",
        )
    }

    /// Per-segment `[heads, L, L]` attention weights of an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[Tensor]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum { a: a.0 }, ng, "sum")
    }

    /// `Σ_r w_r (logsumexp(logits_r) − logits_r[targets_r])`; `w_r = 1/R` when
    /// no weights are given.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], row_weights: Option<&[f64]>) -> Result<Var> {
        let (r, c) = self.mat_dims(logits, "cross_entropy")?;
        if targets.len() != r {
            return Err(shape_err("cross_entropy", format!("{} targets for {r} rows", targets.len())));
        }
        let weights = match row_weights {
            Some(w) if w.len() == r => w.to_vec(),
            Some(w) => return Err(shape_err("cross_entropy", format!("{} weights for {r} rows", w.len()))),
            None => vec![1.0 / r as f64; r],
        };
        let lv = self.value(logits);
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            let row = lv.row(i);
            let t = targets[i];
            if t >= c {
                return Err(shape_err("cross_entropy", format!("target {t} out of {c} classes")));
            }
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            let lse = mx + z.ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            loss += weights[i] * (lse - row[t]);
        }
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), row_weights: weights, probs },
            ng,
            "cross_entropy",
        )
    }

    /// Weighted binary cross-entropy on logits.
    ///
    /// `Σ_r w_r Σ_c [pos_c · y · softplus(−x) + (1 − y) · softplus(x)]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor, pos_weight: &[f64], row_weights: &[f64]) -> Result<Var> {
        let (r, c) = self.mat_dims(logits, "bce")?;
        if targets.len() != r * c || pos_weight.len() != c || row_weights.len() != r {
            return Err(shape_err(
                "bce",
                format!(
                    "logits [{r}, {c}], targets {:?}, {} class weights, {} row weights",
                    targets.shape(),
                    pos_weight.len(),
                    row_weights.len()
                ),
            ));
        }
        let lv = self.value(logits).data();
        let y = targets.data();
        let mut loss = 0.0;
        for i in 0..r {
            let mut row = 0.0;
            for j in 0..c {
                let x = lv[i * c + j];
                let t = y[i * c + j];
                row += pos_weight[j] * t * softplus(-x) + (1.0 - t) * softplus(x);
            }
            loss += row_weights[i] * row;
        }
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                logits: logits.0,
                targets: y.to_vec(),
                pos_weight: pos_weight.to_vec(),
                row_weights: row_weights.to_vec(),
            },
            ng,
            "bce",
        )
    }

    /// `Σ_r w_r Σ_c (pred − target)²`.
    pub fn weighted_sq_error(&mut self, pred: Var, target: &Tensor, row_weights: &[f64]) -> Result<Var> {
        let (r, c) = self.mat_dims(pred, "sq_error")?;
        if target.len() != r * c || row_weights.len() != r {
            return Err(shape_err(
                "sq_error",
                format!("pred [{r}, {c}], target {:?}, {} row weights", target.shape(), row_weights.len()),
            ));
        }
        let p = self.value(pred).data();
        let t = target.data();
        let mut loss = 0.0;
        for i in 0..r {
            let mut row = 0.0;
            for j in 0..c {
                let e = p[i * c + j] - t[i * c + j];
                row += e * e;
            }
            loss += row_weights[i] * row;
        }
        let ng = self.ng(pred);
        self.push(
            Tensor::scalar(loss),
            Op::SqError { pred: pred.0, target: t.to_vec(), row_weights: row_weights.to_vec() },
            ng,
            "sq_error",
        )
    }

    /// Smallest |pre-activation| over all ReLU inputs, if any ReLU was recorded.
    ///
    /// Central differences are only meaningful when no kink lies within the
    /// perturbation radius; gradient checks use this to verify that.
    pub fn min_relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { a } => Some(self.nodes[a].value.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))),
                _ => None,
            })
            .reduce(f64::min)
    }

    /// Reverse sweep from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", format!("loss has shape {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], idx: usize, contrib: Tensor) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        match &mut grads[idx] {
            Some(g) => g.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn zeros_like(&self, idx: usize) -> Tensor {
        Tensor::zeros(self.nodes[idx].value.shape())
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (n, k) = (self.nodes[*a].value.rows(), self.nodes[*a].value.cols());
                let m = self.nodes[*b].value.cols();
                if self.nodes[*a].needs_grad {
                    let mut da = self.zeros_like(*a);
                    matmul_nt_acc(gd, self.nodes[*b].value.data(), da.data_mut(), n, m, k);
                    self.acc(grads, *a, da);
                }
                if self.nodes[*b].needs_grad {
                    let mut db = self.zeros_like(*b);
                    matmul_tn_acc(self.nodes[*a].value.data(), gd, db.data_mut(), n, k, m);
                    self.acc(grads, *b, db);
                }
            }
            Op::MatMulNT { a, b } => {
                // out = a bᵀ, a: [n, k], b: [m, k]
                let (n, k) = (self.nodes[*a].value.rows(), self.nodes[*a].value.cols());
                let m = self.nodes[*b].value.rows();
                if self.nodes[*a].needs_grad {
                    let mut da = self.zeros_like(*a);
                    matmul_acc(gd, self.nodes[*b].value.data(), da.data_mut(), n, m, k);
                    self.acc(grads, *a, da);
                }
                if self.nodes[*b].needs_grad {
                    let mut db = self.zeros_like(*b);
                    matmul_tn_acc(gd, self.nodes[*a].value.data(), db.data_mut(), n, m, k);
                    self.acc(grads, *b, db);
                }
            }
            Op::AddBias { x, b } => {
                if self.nodes[*x].needs_grad {
                    self.acc(grads, *x, g.clone());
                }
                if self.nodes[*b].needs_grad {
                    let m = g.cols();
                    let mut db = vec![0.0; m];
                    for r in 0..g.rows() {
                        for (d, v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    let shape = self.nodes[*b].value.shape().to_vec();
                    self.acc(grads, *b, Tensor::new(shape, db).expect("bias shape"));
                }
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.acc(grads, *a, g.clone());
                if self.nodes[*b].needs_grad {
                    let neg = Tensor::new(g.shape().to_vec(), gd.iter().map(|v| -v).collect()).expect("shape");
                    self.acc(grads, *b, neg);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].needs_grad {
                    let da = gd.iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *a, Tensor::new(av.shape().to_vec(), da).expect("shape"));
                }
                if self.nodes[*b].needs_grad {
                    let db = gd.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *b, Tensor::new(bv.shape().to_vec(), db).expect("shape"));
                }
            }
            Op::Scale { a, c } => {
                let da = gd.iter().map(|v| v * c).collect();
                self.acc(grads, *a, Tensor::new(g.shape().to_vec(), da).expect("shape"));
            }
            Op::ScaleBy { a, s } => {
                let c = self.nodes[*s].value.data()[0];
                if self.nodes[*a].needs_grad {
                    let da = gd.iter().map(|v| v * c).collect();
                    self.acc(grads, *a, Tensor::new(g.shape().to_vec(), da).expect("shape"));
                }
                if self.nodes[*s].needs_grad {
                    let ds: f64 = gd.iter().zip(self.nodes[*a].value.data()).map(|(x, y)| x * y).sum();
                    let shape = self.nodes[*s].value.shape().to_vec();
                    self.acc(grads, *s, Tensor::new(shape, vec![ds]).expect("shape"));
                }
            }
            Op::Exp { a } => {
                let da = gd.iter().zip(node.value.data()).map(|(x, y)| x * y).collect();
                self.acc(grads, *a, Tensor::new(g.shape().to_vec(), da).expect("shape"));
            }
            Op::Relu { a } => {
                let av = &self.nodes[*a].value;
                let da = gd.iter().zip(av.data()).map(|(x, &y)| if y > 0.0 { *x } else { 0.0 }).collect();
                self.acc(grads, *a, Tensor::new(g.shape().to_vec(), da).expect("shape"));
            }
            Op::Gelu { a } => {
                let av = &self.nodes[*a].value;
                let da = gd
                    .iter()
                    .zip(av.data())
                    .map(|(gv, &x)| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                self.acc(grads, *a, Tensor::new(g.shape().to_vec(), da).expect("shape"));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, d) = (g.rows(), g.cols());
                let gam = self.nodes[*gamma].value.data();
                if self.nodes[*gamma].needs_grad || self.nodes[*beta].needs_grad {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..n {
                        for j in 0..d {
                            dg[j] += gd[r * d + j] * xhat[r * d + j];
                            db[j] += gd[r * d + j];
                        }
                    }
                    let gs = self.nodes[*gamma].value.shape().to_vec();
                    let bs = self.nodes[*beta].value.shape().to_vec();
                    self.acc(grads, *gamma, Tensor::new(gs, dg).expect("shape"));
                    self.acc(grads, *beta, Tensor::new(bs, db).expect("shape"));
                }
                if self.nodes[*x].needs_grad {
                    let mut dx = vec![0.0; n * d];
                    for r in 0..n {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gd[r * d + j] * gam[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gd[r * d + j] * gam[j];
                            dx[r * d + j] = inv_std[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                    self.acc(grads, *x, Tensor::new(vec![n, d], dx).expect("shape"));
                }
            }
            Op::L2Normalize { x, norms, eps } => {
                let (n, d) = (g.rows(), g.cols());
                let y = node.value.data();
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    let den = norms[r].max(*eps);
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let proj = if norms[r] > *eps { yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() } else { 0.0 };
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * proj) / den;
                    }
                }
                self.acc(grads, *x, Tensor::new(vec![n, d], dx).expect("shape"));
            }
            Op::GatherRows { x, idx } => {
                let mut dx = self.zeros_like(*x);
                for (r, &src) in idx.iter().enumerate() {
                    for (o, v) in dx.row_mut(src).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::GatherSum { x, groups } => {
                let mut dx = self.zeros_like(*x);
                for (r, grp) in groups.iter().enumerate() {
                    for &src in grp {
                        for (o, v) in dx.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    if self.nodes[p].needs_grad {
                        let shape = self.nodes[p].value.shape().to_vec();
                        self.acc(grads, p, Tensor::new(shape, gd[offset..offset + len].to_vec()).expect("shape"));
                    }
                    offset += len;
                }
            }
            Op::ConcatCols { a, b } => {
                let p = self.nodes[*a].value.cols();
                let q = self.nodes[*b].value.cols();
                let n = g.rows();
                if self.nodes[*a].needs_grad {
                    let mut da = Vec::with_capacity(n * p);
                    for r in 0..n {
                        da.extend_from_slice(&g.row(r)[..p]);
                    }
                    self.acc(grads, *a, Tensor::new(vec![n, p], da).expect("shape"));
                }
                if self.nodes[*b].needs_grad {
                    let mut db = Vec::with_capacity(n * q);
                    for r in 0..n {
                        db.extend_from_slice(&g.row(r)[p..]);
                    }
                    self.acc(grads, *b, Tensor::new(vec![n, q], db).expect("shape"));
                }
            }
            Op::Attention { q, k, v, heads, segments, weights } => {
                let d = g.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (
                    self.nodes[*q].value.data(),
                    self.nodes[*k].value.data(),
                    self.nodes[*v].value.data(),
                );
                let t = g.rows();
                let mut dq = vec![0.0; t * d];
                let mut dk = vec![0.0; t * d];
                let mut dv = vec![0.0; t * d];
                let mut dp = Vec::new();
                let mut start = 0;
                for (len, w) in segments.iter().zip(weights) {
                    let len = *len;
                    let wd = w.data();
                    for h in 0..*heads {
                        let c0 = h * dh;
                        for i in 0..len {
                            let wrow = &wd[(h * len + i) * len..(h * len + i + 1) * len];
                            let go = &gd[(start + i) * d + c0..(start + i) * d + c0 + dh];
                            dp.clear();
                            let mut wdot = 0.0;
                            for j in 0..=i {
                                let vj = &vv[(start + j) * d + c0..(start + j) * d + c0 + dh];
                                let pij = go.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                                dp.push(pij);
                                wdot += wrow[j] * pij;
                                let dvj = &mut dv[(start + j) * d + c0..(start + j) * d + c0 + dh];
                                for (o, x) in dvj.iter_mut().zip(go) {
                                    *o += wrow[j] * x;
                                }
                            }
                            for j in 0..=i {
                                let ds = wrow[j] * (dp[j] - wdot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for c in 0..dh {
                                    dq[(start + i) * d + c0 + c] += ds * kv[(start + j) * d + c0 + c];
                                    dk[(start + j) * d + c0 + c] += ds * qv[(start + i) * d + c0 + c];
                                }
                            }
                        }
                    }
                    start += len;
                }
                self.acc(grads, *q, Tensor::new(vec![t, d], dq).expect("shape"));
                self.acc(grads, *k, Tensor::new(vec![t, d], dk).expect("shape"));
                self.acc(grads, *v, Tensor::new(vec![t, d], dv).expect("shape"));
            }
            Op::Sum { a } => {
                let s = gd[0];
                self.acc(grads, *a, Tensor::filled(self.nodes[*a].value.shape(), s));
            }
            Op::CrossEntropy { logits, targets, row_weights, probs } => {
                let s = gd[0];
                let lv = &self.nodes[*logits].value;
                let c = lv.cols();
                let mut dl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * c + t] -= 1.0;
                    for j in 0..c {
                        dl[r * c + j] *= row_weights[r] * s;
                    }
                }
                self.acc(grads, *logits, Tensor::new(lv.shape().to_vec(), dl).expect("shape"));
            }
            Op::Bce { logits, targets, pos_weight, row_weights } => {
                let s = gd[0];
                let lv = &self.nodes[*logits].value;
                let c = lv.cols();
                let dl = lv
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(idx, &x)| {
                        let (r, j) = (idx / c, idx % c);
                        let y = targets[idx];
                        let grad = -pos_weight[j] * y * sigmoid(-x) + (1.0 - y) * sigmoid(x);
                        s * row_weights[r] * grad
                    })
                    .collect();
                self.acc(grads, *logits, Tensor::new(lv.shape().to_vec(), dl).expect("shape"));
            }
            Op::SqError { pred, target, row_weights } => {
                let s = gd[0];
                let pv = &self.nodes[*pred].value;
                let c = pv.cols();
                let dp = pv
                    .data()
                    .iter()
                    .zip(target)
                    .enumerate()
                    .map(|(idx, (p, t))| s * 2.0 * row_weights[idx / c] * (p - t))
                    .collect();
                self.acc(grads, *pred, Tensor::new(pv.shape().to_vec(), dp).expect("shape"));
            }
        }
    }

    /// Adds this graph's parameter gradients into `store`'s gradient buffers.
    pub fn accumulate_into(&self, grads: &Grads, store: &mut ParamStore) {
        let uid = store.uid();
        for (i, node) in self.nodes.iter().enumerate() {
            let Some((owner, id)) = node.binding else { continue };
            if owner != uid || !store.is_trainable(id) {
                continue;
            }
            if let Some(g) = &grads.grads[i] {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}
