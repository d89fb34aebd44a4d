//! Reverse-mode differentiation over a linear record of operations.
//!
//! Every operation evaluates eagerly and appends one node to the tape. Node
//! indices are a valid topological order, so [`Tape::backward`] is a single
//! reverse sweep that visits each node at most once.

use crate::error::{Error, Result};
use crate::mask::MaskMatrix;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layer-norm variance floor. Small enough that a normalised random vector
/// has unit variance to within 1e-6.
pub const LAYER_NORM_EPS: f64 = 1e-9;

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaskedSoftmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Concat(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScaleRows(Var, Var),
    SpanBilinear {
        a: Var,
        h: Var,
        spans: Vec<(usize, usize)>,
    },
    SpanLogProduct {
        logp: Var,
        spans: Vec<(usize, usize)>,
        clamped: Vec<bool>,
    },
    LogSoftmax(Var),
    Nll(Var, Vec<usize>),
    SelectCol(Var, usize),
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MaskedSoftmax(_) => "masked_softmax",
            Op::Attention { .. } => "attention",
            Op::Concat(_) => "concat",
            Op::GatherRows(..) => "gather_rows",
            Op::ScaleRows(..) => "scale_rows",
            Op::SpanBilinear { .. } => "span_bilinear",
            Op::SpanLogProduct { .. } => "span_log_product",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Nll(..) => "nll",
            Op::SelectCol(..) => "select_col",
            Op::Sum(_) => "sum",
        }
    }
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Per-head attention probabilities recorded by [`Tape::attention`].
#[derive(Clone, Debug)]
pub struct AttentionWeights<'a> {
    pub heads: usize,
    pub rows: usize,
    pub cols: usize,
    /// `heads x rows x cols`, row-major.
    pub probs: &'a [f64],
}

impl AttentionWeights<'_> {
    /// Head-averaged `rows x cols` weights.
    pub fn mean_over_heads(&self) -> Vec<f64> {
        let plane = self.rows * self.cols;
        let mut out = vec![0.0; plane];
        for h in 0..self.heads {
            for (o, p) in out.iter_mut().zip(&self.probs[h * plane..(h + 1) * plane]) {
                *o += p / self.heads as f64;
            }
        }
        out
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradients indexed by parameter id, without any leaf gradients.
    pub fn from_params(params: Vec<Option<Tensor>>) -> Self {
        Gradients {
            leaves: Vec::new(),
            params,
        }
    }

    /// Gradient of a leaf created with [`Tape::leaf`]; `None` when unreachable.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a parameter; `None` when the loss does not depend on it.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    pub fn touched(&self, id: ParamId) -> bool {
        self.param(id).is_some()
    }

    pub fn params(&self) -> &[Option<Tensor>] {
        &self.params
    }

    /// Parameter gradient or zeros shaped like the parameter.
    pub fn param_or_zeros(&self, store: &ParamStore, id: ParamId) -> Tensor {
        self.param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    }

    /// Adds another set of parameter gradients into this one.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m
                        .data_mut()
                        .iter_mut()
                        .zip(t.data())
                        .for_each(|(a, b)| *a += b),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().flatten().all(Tensor::is_finite)
    }
}

/// Operation record bound to a parameter store.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    non_finite: Option<(usize, &'static str)>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            non_finite: None,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// First node whose forward value contained NaN or infinity.
    pub fn non_finite(&self) -> Option<(usize, &'static str)> {
        self.non_finite
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some((idx, op.name()));
        }
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(idx)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input; its gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// The node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: true,
        });
        self.param_vars[id.0] = Some(Var(idx));
        Var(idx)
    }

    /// `x[.., k] @ w[k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.value(x), self.value(w));
        if ws.shape().len() != 2 || xs.last_dim() != ws.shape()[0] || xs.shape().is_empty() {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply {:?} by {:?}", xs.shape(), ws.shape()),
            ));
        }
        let (m, k, n) = (xs.outer(), ws.shape()[0], ws.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, xs.data(), false, ws.data(), false, &mut out, false);
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = n;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(x, w), rg))
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.value(x), self.value(b));
        if bs.numel() != xs.last_dim() || xs.shape().is_empty() {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} does not fit {:?}", bs.shape(), xs.shape()),
            ));
        }
        let d = bs.numel();
        let mut out = xs.clone();
        for row in out.data_mut().chunks_mut(d) {
            row.iter_mut().zip(bs.data()).for_each(|(o, b)| *o += b);
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.data_mut()
            .iter_mut()
            .zip(self.value(b).data())
            .for_each(|(o, v)| *o += v);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let mut out = self.value(a).clone();
        out.data_mut()
            .iter_mut()
            .zip(self.value(b).data())
            .for_each(|(o, v)| *o *= v);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Normalises every row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x);
        let d = xs.last_dim();
        if d == 0 || xs.shape().is_empty() {
            return Err(Error::shape("layer_norm", "cannot normalise an empty axis"));
        }
        let (gs, bs) = (self.value(gain), self.value(bias));
        if gs.numel() != d || bs.numel() != d {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} do not fit {:?}",
                    gs.shape(),
                    bs.shape(),
                    xs.shape()
                ),
            ));
        }
        let rows = xs.outer();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = xs.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gs.data()[c] + bs.data()[c];
            }
        }
        let out = Tensor::new(xs.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row-wise softmax restricted to the mask's visible entries.
    pub fn masked_softmax(&mut self, x: Var, mask: &MaskMatrix) -> Result<Var> {
        let xs = self.value(x);
        if xs.shape().len() != 2 || xs.shape() != [mask.rows(), mask.cols()] {
            return Err(Error::shape(
                "masked_softmax",
                format!(
                    "scores {:?} vs mask {}x{}",
                    xs.shape(),
                    mask.rows(),
                    mask.cols()
                ),
            ));
        }
        let mut out = xs.clone();
        let cols = mask.cols();
        for (i, row) in out.data_mut().chunks_mut(cols).enumerate() {
            masked_softmax_row(row, mask.row(i), i);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaskedSoftmax(x), rg))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[m, d]`, `k` and `v` are `[n, d]` and `mask` is `m x n`. The
    /// per-head width is `d / heads`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: &MaskMatrix,
        heads: usize,
    ) -> Result<Var> {
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let d = qs.last_dim();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        if qs.shape().len() != 2
            || ks.shape() != vs.shape()
            || ks.shape().len() != 2
            || ks.shape()[1] != d
            || mask.rows() != qs.shape()[0]
            || mask.cols() != ks.shape()[0]
        {
            return Err(Error::shape(
                "attention",
                format!(
                    "q {:?}, k {:?}, v {:?}, mask {}x{}",
                    qs.shape(),
                    ks.shape(),
                    vs.shape(),
                    mask.rows(),
                    mask.cols()
                ),
            ));
        }
        let (m, n) = (qs.shape()[0], ks.shape()[0]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * m * n];
        let mut out = vec![0.0; m * d];
        let (qd, kd, vd) = (qs.data(), ks.data(), vs.data());
        for h in 0..heads {
            let off = h * dh;
            for i in 0..m {
                let p = &mut probs[(h * m + i) * n..(h * m + i + 1) * n];
                let qi = &qd[i * d + off..i * d + off + dh];
                let mrow = mask.row(i);
                for j in 0..n {
                    if mrow[j] {
                        let kj = &kd[j * d + off..j * d + off + dh];
                        p[j] = scale * dot(qi, kj);
                    }
                }
                masked_softmax_row(p, mrow, i);
                let o = &mut out[i * d + off..i * d + off + dh];
                for j in 0..n {
                    let w = p[j];
                    if w != 0.0 {
                        let vj = &vd[j * d + off..j * d + off + dh];
                        o.iter_mut().zip(vj).for_each(|(a, b)| *a += w * b);
                    }
                }
            }
        }
        let out = Tensor::matrix(m, d, out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Attention probabilities of a node produced by [`Tape::attention`].
    pub fn attention_weights(&self, v: Var) -> Option<AttentionWeights<'_>> {
        match &self.nodes[v.0].op {
            Op::Attention { q, k, heads, probs, .. } => Some(AttentionWeights {
                heads: *heads,
                rows: self.value(*q).shape()[0],
                cols: self.value(*k).shape()[0],
                probs,
            }),
            _ => None,
        }
    }

    /// Concatenates along the last axis; leading shapes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "nothing to concatenate"))?;
        let lead = self.value(*first).outer();
        let lead_shape = {
            let s = self.value(*first).shape();
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).last_dim()).collect();
        for p in parts {
            let s = self.value(*p).shape();
            if s.is_empty() || s[..s.len() - 1] != lead_shape[..] {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs leading {:?}", s, lead_shape),
                ));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(lead * total);
        for r in 0..lead {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let mut shape = lead_shape;
        shape.push(total);
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Selects rows of a `[m, d]` tensor (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xs = self.value(x);
        if xs.shape().len() != 2 {
            return Err(Error::shape("gather_rows", format!("expected a matrix, got {:?}", xs.shape())));
        }
        let m = xs.shape()[0];
        if let Some(bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} out of range for {:?}", xs.shape()),
            ));
        }
        let d = xs.last_dim();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(xs.row(r));
        }
        let out = Tensor::matrix(rows.len(), d, out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows(x, rows.to_vec()), rg))
    }

    /// Multiplies row `i` of `x[m, d]` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xs, ss) = (self.value(x), self.value(s));
        if xs.shape().len() != 2 || ss.numel() != xs.shape()[0] {
            return Err(Error::shape(
                "scale_rows",
                format!("{:?} rows vs {:?} scales", xs.shape(), ss.shape()),
            ));
        }
        let d = xs.last_dim();
        let mut out = xs.clone();
        for (row, f) in out.data_mut().chunks_mut(d.max(1)).zip(ss.data()) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::ScaleRows(x, s), rg))
    }

    /// Bilinear span contraction.
    ///
    /// `a` is `[n, out * d]` holding `h_start @ U` with `U` laid out so that
    /// column `c * d + k` is `U[:, k]` of output channel `c`; `h` is `[n, d]`.
    /// Row `s` of the result is `a[i, c*d..(c+1)*d] . h[j]` for span `(i, j)`.
    pub fn span_bilinear(&mut self, a: Var, h: Var, spans: &[(usize, usize)]) -> Result<Var> {
        let (as_, hs) = (self.value(a), self.value(h));
        let d = hs.last_dim();
        if as_.shape().len() != 2 || hs.shape().len() != 2 || d == 0 || as_.last_dim() % d != 0 {
            return Err(Error::shape(
                "span_bilinear",
                format!("{:?} against {:?}", as_.shape(), hs.shape()),
            ));
        }
        let (na, nh) = (as_.shape()[0], hs.shape()[0]);
        if spans.iter().any(|&(i, j)| i >= na || j >= nh) {
            return Err(Error::shape("span_bilinear", "span index out of range"));
        }
        let out_dim = as_.last_dim() / d;
        let mut out = vec![0.0; spans.len() * out_dim];
        for (s, &(i, j)) in spans.iter().enumerate() {
            let ai = as_.row(i);
            let hj = hs.row(j);
            for c in 0..out_dim {
                out[s * out_dim + c] = dot(&ai[c * d..(c + 1) * d], hj);
            }
        }
        let out = Tensor::matrix(spans.len(), out_dim, out)?;
        let rg = self.rg(a) || self.rg(h);
        Ok(self.push(
            out,
            Op::SpanBilinear {
                a,
                h,
                spans: spans.to_vec(),
            },
            rg,
        ))
    }

    /// `exp(max(sum_{k=i..=j} logp[k], floor))` for every span `(i, j)`.
    pub fn span_log_product(
        &mut self,
        logp: Var,
        spans: &[(usize, usize)],
        floor: f64,
    ) -> Result<Var> {
        let lp = self.value(logp);
        let n = lp.numel();
        if spans.iter().any(|&(i, j)| i > j || j >= n) {
            return Err(Error::shape("span_log_product", "span index out of range"));
        }
        let mut prefix = vec![0.0; n + 1];
        for (k, v) in lp.data().iter().enumerate() {
            prefix[k + 1] = prefix[k] + v;
        }
        let mut clamped = Vec::with_capacity(spans.len());
        let out: Vec<f64> = spans
            .iter()
            .map(|&(i, j)| {
                let s = prefix[j + 1] - prefix[i];
                clamped.push(s < floor);
                s.max(floor).exp()
            })
            .collect();
        let rg = self.rg(logp);
        Ok(self.push(
            Tensor::vector(out),
            Op::SpanLogProduct {
                logp,
                spans: spans.to_vec(),
                clamped,
            },
            rg,
        ))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        if xs.shape().is_empty() || xs.last_dim() == 0 {
            return Err(Error::shape("log_softmax", format!("{:?}", xs.shape())));
        }
        let d = xs.last_dim();
        let mut out = xs.clone();
        for row in out.data_mut().chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSoftmax(x), rg))
    }

    /// Mean negative log-likelihood of `targets` under row log-probabilities.
    /// An empty batch yields zero.
    pub fn nll(&mut self, logp: Var, targets: &[usize]) -> Result<Var> {
        let lp = self.value(logp);
        let c = lp.last_dim();
        if lp.shape().is_empty() || lp.outer() != targets.len() || targets.iter().any(|&t| t >= c) {
            return Err(Error::shape(
                "nll",
                format!("{} targets against {:?}", targets.len(), lp.shape()),
            ));
        }
        let m = targets.len();
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -lp.data()[i * c + t])
            .sum();
        let loss = if m == 0 { 0.0 } else { total / m as f64 };
        let rg = self.rg(logp);
        Ok(self.push(Tensor::scalar(loss), Op::Nll(logp, targets.to_vec()), rg))
    }

    /// Mean softmax cross-entropy of `logits[m, c]` against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lp = self.log_softmax(logits)?;
        self.nll(lp, targets)
    }

    /// Column `col` of `x[m, c]` as a vector of length `m`.
    pub fn select_col(&mut self, x: Var, col: usize) -> Result<Var> {
        let xs = self.value(x);
        let c = xs.last_dim();
        if xs.shape().is_empty() || col >= c {
            return Err(Error::shape("select_col", format!("column {col} of {:?}", xs.shape())));
        }
        let out: Vec<f64> = (0..xs.outer()).map(|r| xs.data()[r * c + col]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(out), Op::SelectCol(x, col), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// `sum_i c_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, c) in terms {
            if self.value(v).numel() != 1 {
                return Err(Error::shape("weighted_sum", "terms must be scalars"));
            }
            let scaled = self.scale(v, c);
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled)?,
            });
        }
        Ok(acc.unwrap_or_else(|| self.constant(Tensor::scalar(0.0))))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.item().is_finite() {
            return Err(Error::Numerical(format!("loss is {}", lv.item())));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut leaves: Vec<Option<Tensor>> = vec![None; n];
        let mut params: Vec<Option<Tensor>> = vec![None; self.params.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let out = self.value(Var(idx));
            match &node.op {
                Op::Leaf => {
                    leaves[idx] = Some(Tensor::new(out.shape().to_vec(), g)?);
                }
                Op::Param(id) => {
                    params[id.0] = Some(Tensor::new(out.shape().to_vec(), g)?);
                }
                Op::MatMul(x, w) => {
                    let (xs, ws) = (self.value(*x), self.value(*w));
                    let (m, k, nn) = (xs.outer(), ws.shape()[0], ws.shape()[1]);
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        gemm(m, nn, k, &g, false, ws.data(), true, gx, true);
                    }
                    if let Some(gw) = self.slot(&mut grads, *w) {
                        gemm(k, m, nn, xs.data(), true, &g, false, gw, true);
                    }
                }
                Op::AddBias(x, b) => {
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        add_into(gx, &g);
                    }
                    if let Some(gb) = self.slot(&mut grads, *b) {
                        let d = gb.len();
                        for row in g.chunks(d) {
                            add_into(gb, row);
                        }
                    }
                }
                Op::Add(a, b) => {
                    if let Some(ga) = self.slot(&mut grads, *a) {
                        add_into(ga, &g);
                    }
                    if let Some(gb) = self.slot(&mut grads, *b) {
                        add_into(gb, &g);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    if let Some(ga) = self.slot(&mut grads, *a) {
                        for ((o, gg), y) in ga.iter_mut().zip(&g).zip(bv) {
                            *o += gg * y;
                        }
                    }
                    if let Some(gb) = self.slot(&mut grads, *b) {
                        for ((o, gg), x) in gb.iter_mut().zip(&g).zip(av) {
                            *o += gg * x;
                        }
                    }
                }
                Op::Scale(x, c) => {
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        gx.iter_mut().zip(&g).for_each(|(o, gg)| *o += c * gg);
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x).data();
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        for ((o, gg), v) in gx.iter_mut().zip(&g).zip(xv) {
                            *o += gg * gelu_grad(*v);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let d = out.last_dim();
                    let gv = self.value(*gain).data().to_vec();
                    if let Some(gg) = self.slot(&mut grads, *gain) {
                        for (row_g, row_h) in g.chunks(d).zip(xhat.chunks(d)) {
                            for c in 0..d {
                                gg[c] += row_g[c] * row_h[c];
                            }
                        }
                    }
                    if let Some(gb) = self.slot(&mut grads, *bias) {
                        for row in g.chunks(d) {
                            add_into(gb, row);
                        }
                    }
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        for (r, (row_g, row_h)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                            let dxhat: Vec<f64> = row_g.iter().zip(&gv).map(|(a, b)| a * b).collect();
                            let sum_d: f64 = dxhat.iter().sum();
                            let sum_dh: f64 = dxhat.iter().zip(row_h).map(|(a, b)| a * b).sum();
                            let k = inv_std[r] / d as f64;
                            for c in 0..d {
                                gx[r * d + c] +=
                                    k * (d as f64 * dxhat[c] - sum_d - row_h[c] * sum_dh);
                            }
                        }
                    }
                }
                Op::MaskedSoftmax(x) => {
                    let cols = out.last_dim();
                    let p = out.data();
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        for (r, row_g) in g.chunks(cols).enumerate() {
                            let pr = &p[r * cols..(r + 1) * cols];
                            let s = dot(pr, row_g);
                            for c in 0..cols {
                                gx[r * cols + c] += pr[c] * (row_g[c] - s);
                            }
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    self.attention_backward(&mut grads, &g, *q, *k, *v, *heads, probs);
                }
                Op::Concat(parts) => {
                    let total = out.last_dim();
                    let rows = out.outer();
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).last_dim();
                        if let Some(gp) = self.slot(&mut grads, *p) {
                            for r in 0..rows {
                                add_into(
                                    &mut gp[r * w..(r + 1) * w],
                                    &g[r * total + offset..r * total + offset + w],
                                );
                            }
                        }
                        offset += w;
                    }
                }
                Op::GatherRows(x, rows) => {
                    let d = out.last_dim();
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        for (s, &r) in rows.iter().enumerate() {
                            add_into(&mut gx[r * d..(r + 1) * d], &g[s * d..(s + 1) * d]);
                        }
                    }
                }
                Op::ScaleRows(x, s) => {
                    let d = out.last_dim().max(1);
                    let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        for (r, row) in g.chunks(d).enumerate() {
                            for c in 0..d {
                                gx[r * d + c] += row[c] * sv[r];
                            }
                        }
                    }
                    if let Some(gs) = self.slot(&mut grads, *s) {
                        for (r, row) in g.chunks(d).enumerate() {
                            gs[r] += dot(row, &xv[r * d..(r + 1) * d]);
                        }
                    }
                }
                Op::SpanBilinear { a, h, spans } => {
                    let out_dim = out.last_dim();
                    let hs = self.value(*h);
                    let d = hs.last_dim();
                    let av = self.value(*a);
                    if let Some(ga) = self.slot(&mut grads, *a) {
                        let width = out_dim * d;
                        for (s, &(i, j)) in spans.iter().enumerate() {
                            let hj = hs.row(j);
                            for c in 0..out_dim {
                                let gg = g[s * out_dim + c];
                                let dst = &mut ga[i * width + c * d..i * width + (c + 1) * d];
                                dst.iter_mut().zip(hj).for_each(|(o, x)| *o += gg * x);
                            }
                        }
                    }
                    if let Some(gh) = self.slot(&mut grads, *h) {
                        for (s, &(i, j)) in spans.iter().enumerate() {
                            let ai = av.row(i);
                            let dst = &mut gh[j * d..(j + 1) * d];
                            for c in 0..out_dim {
                                let gg = g[s * out_dim + c];
                                dst.iter_mut()
                                    .zip(&ai[c * d..(c + 1) * d])
                                    .for_each(|(o, x)| *o += gg * x);
                            }
                        }
                    }
                }
                Op::SpanLogProduct {
                    logp,
                    spans,
                    clamped,
                } => {
                    let y = out.data();
                    if let Some(gl) = self.slot(&mut grads, *logp) {
                        for (s, &(i, j)) in spans.iter().enumerate() {
                            if !clamped[s] {
                                let c = g[s] * y[s];
                                gl[i..=j].iter_mut().for_each(|o| *o += c);
                            }
                        }
                    }
                }
                Op::LogSoftmax(x) => {
                    let d = out.last_dim();
                    let y = out.data();
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        for (r, row) in g.chunks(d).enumerate() {
                            let s: f64 = row.iter().sum();
                            for c in 0..d {
                                gx[r * d + c] += row[c] - y[r * d + c].exp() * s;
                            }
                        }
                    }
                }
                Op::Nll(logp, targets) => {
                    let c = self.value(*logp).last_dim();
                    let m = targets.len();
                    if let Some(gl) = self.slot(&mut grads, *logp) {
                        for (i, &t) in targets.iter().enumerate() {
                            gl[i * c + t] -= g[0] / m as f64;
                        }
                    }
                }
                Op::SelectCol(x, col) => {
                    let c = self.value(*x).last_dim();
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        for (r, gg) in g.iter().enumerate() {
                            gx[r * c + col] += gg;
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        gx.iter_mut().for_each(|o| *o += g[0]);
                    }
                }
            }
        }
        Ok(Gradients { leaves, params })
    }

    /// Mutable gradient buffer for `v`, allocated on first use; `None` when `v`
    /// does not require a gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        grads: &mut [Option<Vec<f64>>],
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
    ) {
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let d = qs.last_dim();
        let (m, n) = (qs.shape()[0], ks.shape()[0]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; m * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut dp = vec![0.0; n];
        let (qd, kd, vd) = (qs.data(), ks.data(), vs.data());
        for h in 0..heads {
            let off = h * dh;
            for i in 0..m {
                let p = &probs[(h * m + i) * n..(h * m + i + 1) * n];
                let go = &g[i * d + off..i * d + off + dh];
                for j in 0..n {
                    if p[j] != 0.0 {
                        let vj = &vd[j * d + off..j * d + off + dh];
                        dp[j] = dot(go, vj);
                        dv[j * d + off..j * d + off + dh]
                            .iter_mut()
                            .zip(go)
                            .for_each(|(o, x)| *o += p[j] * x);
                    } else {
                        dp[j] = 0.0;
                    }
                }
                let s = dot(p, &dp);
                let qi = &qd[i * d + off..i * d + off + dh];
                for j in 0..n {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - s) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &kd[j * d + off..j * d + off + dh];
                    dq[i * d + off..i * d + off + dh]
                        .iter_mut()
                        .zip(kj)
                        .for_each(|(o, x)| *o += ds * x);
                    dk[j * d + off..j * d + off + dh]
                        .iter_mut()
                        .zip(qi)
                        .for_each(|(o, x)| *o += ds * x);
                }
            }
        }
        if let Some(gq) = self.slot(grads, q) {
            add_into(gq, &dq);
        }
        if let Some(gk) = self.slot(grads, k) {
            add_into(gk, &dk);
        }
        if let Some(gv) = self.slot(grads, v) {
            add_into(gv, &dv);
        }
    }
}

/// Softmax over the visible entries of one row, written in place. Hidden
/// entries become exactly zero. A row with nothing visible puts all weight on
/// position `self_idx` (clamped to the row).
pub fn masked_softmax_row(row: &mut [f64], mask: &[bool], self_idx: usize) {
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        if let Some(last) = row.len().checked_sub(1) {
            row[self_idx.min(last)] = 1.0;
        }
        return;
    }
    let mut total = 0.0;
    for (v, &m) in row.iter_mut().zip(mask) {
        if m {
            *v = (*v - max).exp();
            total += *v;
        } else {
            *v = 0.0;
        }
    }
    row.iter_mut().for_each(|v| *v /= total);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}
