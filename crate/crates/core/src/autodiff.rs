//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`], never copied. Calling [`Graph::backward`]
//! walks the tape once in reverse and returns parameter gradients.
//!
//! Operations are coarse (fused linear, layer norm, multi-head attention) so
//! a transformer forward pass is a few dozen nodes.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{gemm, MatMut, MatRef, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    #[inline]
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Input,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Modulate { x: Var, scale: Var, shift: Var },
    Scale(Var, f64),
    Gelu(Var),
    Silu(Var),
    Exp(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    LayerNorm { x: Var, gamma: Option<Var>, beta: Option<Var>, xhat: Tensor, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    MseTo { x: Var, target: Tensor },
    KlStdNormal { mu: Var, log_sigma: Var },
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    needs_grad: bool,
}

/// One recorded attention evaluation: `query_rows x key_rows` scores per head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionRecord {
    pub label: &'static str,
    pub query_rows: usize,
    pub key_rows: usize,
    pub heads: usize,
    pub output: Var,
}

impl AttentionRecord {
    /// Score-matrix entries of one head.
    pub fn score_elements(&self) -> usize {
        self.query_rows * self.key_rows
    }
}

pub struct Graph<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node<'a>>,
    frozen: bool,
    attention: Vec<AttentionRecord>,
}

/// Result of a backward pass.
pub struct Backward {
    pub params: Grads,
    nodes: Vec<Option<Tensor>>,
}

impl Backward {
    /// Gradient with respect to a leaf created by [`Graph::input_with_grad`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(s) => s.add_assign(&t),
        None => *slot = Some(t),
    }
}

fn slot_zeros(slot: &mut Option<Tensor>, rows: usize, cols: usize) -> &mut Tensor {
    slot.get_or_insert_with(|| Tensor::zeros(rows, cols))
}

fn col_sums(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, t.cols());
    for r in 0..t.rows() {
        for (o, x) in out.data_mut().iter_mut().zip(t.row(r)) {
            *o += x;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

// 0.5 (1 + tanh(u)) == sigmoid(2u), which costs one exp instead of a tanh.
#[inline]
fn gelu(x: f64) -> f64 {
    x * sigmoid(2.0 * GELU_C * (x + 0.044_715 * x * x * x))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let s = sigmoid(2.0 * GELU_C * (x + 0.044_715 * x * x * x));
    s + x * s * (1.0 - s) * 2.0 * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + math::exp(-x))
}

impl<'a> Graph<'a> {
    /// Graph whose parameters receive gradients.
    pub fn new(params: &'a ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            frozen: false,
            attention: Vec::new(),
        }
    }

    /// Graph that treats every parameter as a constant.
    pub fn inference(params: &'a ParamStore) -> Self {
        Self {
            frozen: true,
            ..Self::new(params)
        }
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    #[inline]
    fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    #[inline]
    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Attention evaluations recorded so far, in call order.
    pub fn attention_records(&self) -> &[AttentionRecord] {
        &self.attention
    }

    /// Softmax weights of an attention output, laid out `[head][query][key]`.
    pub fn attention_probs(&self, output: Var) -> Option<&[f64]> {
        match &self.nodes[output.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let params = self.params;
        self.nodes.push(Node {
            value: Value::Borrowed(params.get(id)),
            op: Op::Param(id),
            needs_grad: !self.frozen,
        });
        Var(self.nodes.len() - 1)
    }

    /// `x · w + b` with `w` stored `[in, out]` and `b` a `1 x out` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xr, xc) = self.shape(x);
        let (wr, wc) = self.shape(w);
        assert_eq!(xc, wr, "linear: input width {xc} vs weight rows {wr}");
        let mut out = Tensor::zeros(xr, wc);
        gemm(
            MatRef::normal(self.value(x)),
            MatRef::normal(self.value(w)),
            0.0,
            MatMut::whole(&mut out),
        );
        if let Some(b) = b {
            let bias = self.value(b);
            assert_eq!(bias.shape(), (1, wc));
            for r in 0..xr {
                for (o, bb) in out.row_mut(r).iter_mut().zip(bias.data()) {
                    *o += bb;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds a `1 x c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.shape(), (1, self.shape(x).1));
        let mut out = self.value(x).clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(row);
        self.push(out, Op::AddRow(x, row), ng)
    }

    /// Multiplies every row of `x` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.shape(), (1, self.shape(x).1));
        let mut out = self.value(x).clone();
        for i in 0..out.rows() {
            for (o, s) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o *= s;
            }
        }
        let ng = self.ng(x) || self.ng(row);
        self.push(out, Op::MulRow(x, row), ng)
    }

    /// `x * (1 + scale) + shift` with `1 x c` modulation rows.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let c = self.shape(x).1;
        assert_eq!(self.shape(scale), (1, c));
        assert_eq!(self.shape(shift), (1, c));
        let (s, sh) = (self.value(scale), self.value(shift));
        let mut out = self.value(x).clone();
        for i in 0..out.rows() {
            for ((o, a), b) in out.row_mut(i).iter_mut().zip(s.data()).zip(sh.data()) {
                *o = *o * (1.0 + a) + b;
            }
        }
        let ng = self.ng(x) || self.ng(scale) || self.ng(shift);
        self.push(out, Op::Modulate { x, scale, shift }, ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let ng = self.ng(x);
        self.push(out, Op::Silu(x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(math::exp);
        let ng = self.ng(x);
        self.push(out, Op::Exp(x), ng)
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let ng = self.ng(x);
        self.push(out, Op::Clamp { x, lo, hi }, ng)
    }

    /// Row-wise layer normalisation with optional `1 x c` affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
            rstd.push(rs);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gamma {
            let g = self.value(g);
            assert_eq!(g.shape(), (1, cols));
            for r in 0..rows {
                for (o, s) in out.row_mut(r).iter_mut().zip(g.data()) {
                    *o *= s;
                }
            }
        }
        if let Some(b) = beta {
            let b = self.value(b);
            assert_eq!(b.shape(), (1, cols));
            for r in 0..rows {
                for (o, s) in out.row_mut(r).iter_mut().zip(b.data()) {
                    *o += s;
                }
            }
        }
        let ng = self.ng(x)
            || gamma.is_some_and(|g| self.ng(g))
            || beta.is_some_and(|b| self.ng(b));
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Multi-head scaled dot-product attention. `q` is `[mq, heads*dh]`,
    /// `k` is `[mk, heads*dh]`, `v` is `[mk, heads*dv]`; the heads'
    /// outputs are concatenated into `[mq, heads*dv]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, label: &'static str) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (mq, qc) = qv.shape();
        let (mk, kc) = kv.shape();
        let (vr, vc) = vv.shape();
        assert!(heads > 0 && qc % heads == 0 && vc % heads == 0);
        assert_eq!(qc, kc, "attention: query/key widths differ");
        assert_eq!(mk, vr, "attention: key/value lengths differ");
        let dh = qc / heads;
        let dv = vc / heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let mut probs = vec![0.0; heads * mq * mk];
        let mut out = Tensor::zeros(mq, vc);
        for h in 0..heads {
            let p = &mut probs[h * mq * mk..(h + 1) * mq * mk];
            gemm(
                MatRef::col_block(qv.data(), mq, qc, h * dh, dh),
                MatRef::col_block(kv.data(), mk, kc, h * dh, dh).t(),
                0.0,
                MatMut::slice(p, mq, mk),
            );
            for row in p.chunks_mut(mk.max(1)) {
                let mut mx = f64::NEG_INFINITY;
                for s in row.iter_mut() {
                    *s *= scale;
                    mx = mx.max(*s);
                }
                let mut z = 0.0;
                for s in row.iter_mut() {
                    *s = math::exp(*s - mx);
                    z += *s;
                }
                for s in row.iter_mut() {
                    *s /= z;
                }
            }
            gemm(
                MatRef {
                    data: p,
                    offset: 0,
                    rows: mq,
                    cols: mk,
                    rs: mk as isize,
                    cs: 1,
                },
                MatRef::col_block(vv.data(), mk, vc, h * dv, dv),
                0.0,
                MatMut::col_block(out.data_mut(), mq, vc, h * dv, dv),
            );
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let var = self.push(out, Op::Attention { q, k, v, heads, probs }, ng);
        self.attention.push(AttentionRecord {
            label,
            query_rows: mq,
            key_rows: mk,
            heads,
            output: var,
        });
        var
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut off = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.rows(), rows, "concat_cols: row counts differ");
            let c = t.cols();
            for r in 0..rows {
                out.row_mut(r)[off..off + c].copy_from_slice(t.row(r));
            }
            off += c;
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        assert!(start + len <= t.cols());
        let out = Tensor::from_fn(t.rows(), len, |r, c| t.get(r, start + c));
        let ng = self.ng(x);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols(), cols, "concat_rows: column counts differ");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        assert!(start + len <= t.rows());
        let out = t.slice_rows(start, len);
        let ng = self.ng(x);
        self.push(out, Op::SliceRows { x, start }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::filled(1, 1, s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.len().max(1) as f64;
        let ng = self.ng(x);
        self.push(Tensor::filled(1, 1, s), Op::Mean(x), ng)
    }

    /// Mean squared difference to a constant target.
    pub fn mse_to(&mut self, x: Var, target: Tensor) -> Var {
        let t = self.value(x);
        assert_eq!(t.shape(), target.shape(), "mse_to: shape mismatch");
        let n = t.len().max(1) as f64;
        let s = t
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let ng = self.ng(x);
        self.push(Tensor::filled(1, 1, s), Op::MseTo { x, target }, ng)
    }

    /// `KL(N(mu, sigma^2) || N(0, 1))` summed over all entries.
    pub fn kl_std_normal(&mut self, mu: Var, log_sigma: Var) -> Var {
        let (m, l) = (self.value(mu), self.value(log_sigma));
        assert_eq!(m.shape(), l.shape());
        let s = crate::objective::kl_divergence(m, l);
        let ng = self.ng(mu) || self.ng(log_sigma);
        self.push(Tensor::filled(1, 1, s), Op::KlStdNormal { mu, log_sigma }, ng)
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, loss: Var) -> Grads {
        self.backward_full(loss).params
    }

    pub fn backward_full(&self, loss: Var) -> Backward {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar output");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut params = Grads::new(self.params.len());
        grads[loss.0] = Some(Tensor::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {
                    grads[i] = Some(dy);
                }
                Op::Param(id) => {
                    params.accumulate_owned(*id, dy);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    if self.ng(*x) {
                        let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                        gemm(MatRef::normal(&dy), MatRef::transposed(wv), 0.0, MatMut::whole(&mut dx));
                        accumulate(&mut grads[x.0], dx);
                    }
                    if self.ng(*w) {
                        let mut dw = Tensor::zeros(wv.rows(), wv.cols());
                        gemm(MatRef::transposed(xv), MatRef::normal(&dy), 0.0, MatMut::whole(&mut dw));
                        accumulate(&mut grads[w.0], dw);
                    }
                    if let Some(b) = b {
                        if self.ng(*b) {
                            accumulate(&mut grads[b.0], col_sums(&dy));
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        let mut da = Tensor::zeros(av.rows(), av.cols());
                        gemm(MatRef::normal(&dy), MatRef::transposed(bv), 0.0, MatMut::whole(&mut da));
                        accumulate(&mut grads[a.0], da);
                    }
                    if self.ng(*b) {
                        let mut db = Tensor::zeros(bv.rows(), bv.cols());
                        gemm(MatRef::transposed(av), MatRef::normal(&dy), 0.0, MatMut::whole(&mut db));
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads[a.0], dy.clone());
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads[b.0], dy);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads[a.0], dy.clone());
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads[b.0], dy.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads[a.0], dy.zip_map(self.value(*b), |g, y| g * y));
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads[b.0], dy.zip_map(self.value(*a), |g, x| g * x));
                    }
                }
                Op::AddRow(x, row) => {
                    if self.ng(*row) {
                        accumulate(&mut grads[row.0], col_sums(&dy));
                    }
                    if self.ng(*x) {
                        accumulate(&mut grads[x.0], dy);
                    }
                }
                Op::MulRow(x, row) => {
                    let (xv, rv) = (self.value(*x), self.value(*row));
                    if self.ng(*row) {
                        accumulate(&mut grads[row.0], col_sums(&dy.zip_map(xv, |g, a| g * a)));
                    }
                    if self.ng(*x) {
                        let mut dx = dy;
                        for r in 0..dx.rows() {
                            for (g, s) in dx.row_mut(r).iter_mut().zip(rv.data()) {
                                *g *= s;
                            }
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Modulate { x, scale, shift } => {
                    let (xv, sv) = (self.value(*x), self.value(*scale));
                    if self.ng(*shift) {
                        accumulate(&mut grads[shift.0], col_sums(&dy));
                    }
                    if self.ng(*scale) {
                        accumulate(&mut grads[scale.0], col_sums(&dy.zip_map(xv, |g, a| g * a)));
                    }
                    if self.ng(*x) {
                        let mut dx = dy;
                        for r in 0..dx.rows() {
                            for (g, s) in dx.row_mut(r).iter_mut().zip(sv.data()) {
                                *g *= 1.0 + s;
                            }
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Scale(x, s) => {
                    if self.ng(*x) {
                        let s = *s;
                        accumulate(&mut grads[x.0], dy.map(|g| g * s));
                    }
                }
                Op::Gelu(x) => {
                    if self.ng(*x) {
                        accumulate(&mut grads[x.0], dy.zip_map(self.value(*x), |g, a| g * gelu_grad(a)));
                    }
                }
                Op::Silu(x) => {
                    if self.ng(*x) {
                        accumulate(
                            &mut grads[x.0],
                            dy.zip_map(self.value(*x), |g, a| {
                                let s = sigmoid(a);
                                g * s * (1.0 + a * (1.0 - s))
                            }),
                        );
                    }
                }
                Op::Exp(x) => {
                    if self.ng(*x) {
                        accumulate(&mut grads[x.0], dy.zip_map(node.value.get(), |g, y| g * y));
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    if self.ng(*x) {
                        let (lo, hi) = (*lo, *hi);
                        accumulate(
                            &mut grads[x.0],
                            dy.zip_map(self.value(*x), |g, a| if a < lo || a > hi { 0.0 } else { g }),
                        );
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    if let Some(b) = beta {
                        if self.ng(*b) {
                            accumulate(&mut grads[b.0], col_sums(&dy));
                        }
                    }
                    if let Some(g) = gamma {
                        if self.ng(*g) {
                            accumulate(&mut grads[g.0], col_sums(&dy.zip_map(xhat, |a, b| a * b)));
                        }
                    }
                    if self.ng(*x) {
                        let cols = xhat.cols();
                        let mut dx = dy;
                        if let Some(g) = gamma {
                            let gv = self.value(*g);
                            for r in 0..dx.rows() {
                                for (d, s) in dx.row_mut(r).iter_mut().zip(gv.data()) {
                                    *d *= s;
                                }
                            }
                        }
                        for r in 0..dx.rows() {
                            let xh = xhat.row(r);
                            let row = dx.row_mut(r);
                            let m1 = row.iter().sum::<f64>() / cols as f64;
                            let m2 = row.iter().zip(xh).map(|(d, h)| d * h).sum::<f64>() / cols as f64;
                            for (d, h) in row.iter_mut().zip(xh) {
                                *d = rstd[r] * (*d - m1 - h * m2);
                            }
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (mq, qc) = qv.shape();
                    let (mk, vc) = vv.shape();
                    let heads = *heads;
                    let dh = qc / heads;
                    let dv = vc / heads;
                    let scale = 1.0 / math::sqrt(dh as f64);
                    let mut dq = Tensor::zeros(mq, qc);
                    let mut dk = Tensor::zeros(mk, qc);
                    let mut dvt = Tensor::zeros(mk, vc);
                    let mut dp = vec![0.0; mq * mk];
                    for h in 0..heads {
                        let p = &probs[h * mq * mk..(h + 1) * mq * mk];
                        let pref = MatRef {
                            data: p,
                            offset: 0,
                            rows: mq,
                            cols: mk,
                            rs: mk as isize,
                            cs: 1,
                        };
                        let dout = MatRef::col_block(dy.data(), mq, vc, h * dv, dv);
                        // dV_h = P^T dO_h
                        gemm(pref.t(), dout, 0.0, MatMut::col_block(dvt.data_mut(), mk, vc, h * dv, dv));
                        // dP = dO_h V_h^T
                        gemm(
                            dout,
                            MatRef::col_block(vv.data(), mk, vc, h * dv, dv).t(),
                            0.0,
                            MatMut::slice(&mut dp, mq, mk),
                        );
                        for r in 0..mq {
                            let prow = &p[r * mk..(r + 1) * mk];
                            let drow = &mut dp[r * mk..(r + 1) * mk];
                            let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                            for (d, pp) in drow.iter_mut().zip(prow) {
                                *d = pp * (*d - dot) * scale;
                            }
                        }
                        let ds = MatRef {
                            data: &dp,
                            offset: 0,
                            rows: mq,
                            cols: mk,
                            rs: mk as isize,
                            cs: 1,
                        };
                        gemm(
                            ds,
                            MatRef::col_block(kv.data(), mk, qc, h * dh, dh),
                            0.0,
                            MatMut::col_block(dq.data_mut(), mq, qc, h * dh, dh),
                        );
                        gemm(
                            ds.t(),
                            MatRef::col_block(qv.data(), mq, qc, h * dh, dh),
                            0.0,
                            MatMut::col_block(dk.data_mut(), mk, qc, h * dh, dh),
                        );
                    }
                    if self.ng(*q) {
                        accumulate(&mut grads[q.0], dq);
                    }
                    if self.ng(*k) {
                        accumulate(&mut grads[k.0], dk);
                    }
                    if self.ng(*v) {
                        accumulate(&mut grads[v.0], dvt);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (rows, c) = self.shape(*p);
                        if self.ng(*p) {
                            let g = slot_zeros(&mut grads[p.0], rows, c);
                            for r in 0..rows {
                                for (a, b) in g.row_mut(r).iter_mut().zip(&dy.row(r)[off..off + c]) {
                                    *a += b;
                                }
                            }
                        }
                        off += c;
                    }
                }
                Op::SliceCols { x, start } => {
                    if self.ng(*x) {
                        let (rows, cols) = self.shape(*x);
                        let g = slot_zeros(&mut grads[x.0], rows, cols);
                        let w = dy.cols();
                        for r in 0..rows {
                            for (a, b) in g.row_mut(r)[*start..*start + w].iter_mut().zip(dy.row(r)) {
                                *a += b;
                            }
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (rows, cols) = self.shape(*p);
                        if self.ng(*p) {
                            let g = slot_zeros(&mut grads[p.0], rows, cols);
                            for (a, b) in g
                                .data_mut()
                                .iter_mut()
                                .zip(&dy.data()[off * cols..(off + rows) * cols])
                            {
                                *a += b;
                            }
                        }
                        off += rows;
                    }
                }
                Op::SliceRows { x, start } => {
                    if self.ng(*x) {
                        let (rows, cols) = self.shape(*x);
                        let g = slot_zeros(&mut grads[x.0], rows, cols);
                        let len = dy.rows();
                        for (a, b) in g.data_mut()[start * cols..(start + len) * cols]
                            .iter_mut()
                            .zip(dy.data())
                        {
                            *a += b;
                        }
                    }
                }
                Op::Sum(x) => {
                    if self.ng(*x) {
                        let (r, c) = self.shape(*x);
                        accumulate(&mut grads[x.0], Tensor::filled(r, c, dy.get(0, 0)));
                    }
                }
                Op::Mean(x) => {
                    if self.ng(*x) {
                        let (r, c) = self.shape(*x);
                        let n = (r * c).max(1) as f64;
                        accumulate(&mut grads[x.0], Tensor::filled(r, c, dy.get(0, 0) / n));
                    }
                }
                Op::MseTo { x, target } => {
                    if self.ng(*x) {
                        let xv = self.value(*x);
                        let k = 2.0 * dy.get(0, 0) / xv.len().max(1) as f64;
                        accumulate(&mut grads[x.0], xv.zip_map(target, |a, b| k * (a - b)));
                    }
                }
                Op::KlStdNormal { mu, log_sigma } => {
                    let g = dy.get(0, 0);
                    if self.ng(*mu) {
                        accumulate(&mut grads[mu.0], self.value(*mu).map(|m| g * m));
                    }
                    if self.ng(*log_sigma) {
                        accumulate(
                            &mut grads[log_sigma.0],
                            self.value(*log_sigma).map(|l| g * (math::exp(2.0 * l) - 1.0)),
                        );
                    }
                }
            }
        }
        Backward {
            params,
            nodes: grads,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        crate::params::normal_init(rng, r, c, 1.0)
    }

    /// Central differences of `f` around every entry of the input leaf.
    fn check_input_grad(
        build: impl Fn(&mut Graph<'_>, Var) -> Var,
        x0: &Tensor,
        tol: f64,
    ) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input_with_grad(x0.clone());
        let y = build(&mut g, x);
        let analytic = g.backward_full(y).wrt(x).cloned().unwrap_or_else(|| Tensor::zeros(x0.rows(), x0.cols()));
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new(&store);
                let x = g.input(xp);
                let y = build(&mut g, x);
                g.value(y).get(0, 0)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let denom = fd.abs().max(a.abs()).max(1e-3);
            assert!(
                (fd - a).abs() / denom < tol,
                "entry {i}: analytic {a} vs finite difference {fd}"
            );
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = rand_tensor(&mut rng, 3, 4);
        let w = rand_tensor(&mut rng, 3, 4);
        check_input_grad(
            |g, x| {
                let a = g.gelu(x);
                let b = g.silu(x);
                let c = g.mul(a, b);
                let e = g.exp(c);
                let wv = g.input(w.clone());
                let d = g.sub(e, wv);
                let s = g.scale(d, 0.7);
                let cl = g.clamp(s, -0.9, 50.0);
                g.mse_to(cl, Tensor::zeros(3, 4))
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn layer_norm_and_row_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = rand_tensor(&mut rng, 4, 5);
        let gamma = rand_tensor(&mut rng, 1, 5);
        let beta = rand_tensor(&mut rng, 1, 5);
        check_input_grad(
            |g, x| {
                let gm = g.input(gamma.clone());
                let bt = g.input(beta.clone());
                let ln = g.layer_norm(x, Some(gm), Some(bt));
                let sc = g.slice_rows(x, 1, 1);
                let sh = g.slice_rows(x, 2, 1);
                let m = g.modulate(ln, sc, sh);
                let gate = g.slice_rows(x, 0, 1);
                let y = g.mul_row(m, gate);
                let y = g.add_row(y, gate);
                let sq = g.mul(y, y);
                g.sum(sq)
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn attention_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = rand_tensor(&mut rng, 5, 4);
        let wq = rand_tensor(&mut rng, 4, 4);
        let wk = rand_tensor(&mut rng, 4, 4);
        let wv = rand_tensor(&mut rng, 4, 6);
        let ctx = rand_tensor(&mut rng, 3, 4);
        check_input_grad(
            |g, x| {
                let (a, b, c) = (g.input(wq.clone()), g.input(wk.clone()), g.input(wv.clone()));
                let q = g.linear(x, a, None);
                let cx = g.input(ctx.clone());
                let kk = g.concat_rows(&[cx, x]);
                let k = g.linear(kk, b, None);
                let v = g.linear(kk, c, None);
                let o = g.attention(q, k, v, 2, "test");
                let t = g.slice_cols(o, 1, 4);
                let u = g.concat_cols(&[t, x]);
                let sq = g.mul(u, u);
                g.mean(sq)
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn attention_rows_are_probability_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let q = g.input(rand_tensor(&mut rng, 3, 8));
        let k = g.input(rand_tensor(&mut rng, 7, 8));
        let v = g.input(rand_tensor(&mut rng, 7, 8));
        let o = g.attention(q, k, v, 4, "rows");
        let p = g.attention_probs(o).unwrap();
        assert_eq!(p.len(), 4 * 3 * 7);
        for row in p.chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(g.attention_records()[0].score_elements(), 21);
    }

    #[test]
    fn kl_and_param_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let w = store.insert("w", rand_tensor(&mut rng, 3, 2));
        let b = store.insert("b", rand_tensor(&mut rng, 1, 2));
        let x = rand_tensor(&mut rng, 4, 3);
        let loss_of = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let xi = g.input(x.clone());
            let (wv, bv) = (g.param(w), g.param(b));
            let y = g.linear(xi, wv, Some(bv));
            let mu = g.slice_cols(y, 0, 1);
            let ls = g.slice_cols(y, 1, 1);
            let l = g.kl_std_normal(mu, ls);
            let v = g.value(l).get(0, 0);
            (v, g.backward(l))
        };
        let (_, grads) = loss_of(&store);
        for id in [w, b] {
            let analytic = grads.get(id).unwrap().clone();
            for i in 0..analytic.len() {
                let mut sp = store.clone();
                sp.get_mut(id).data_mut()[i] += 1e-6;
                let mut sm = store.clone();
                sm.get_mut(id).data_mut()[i] -= 1e-6;
                let fd = (loss_of(&sp).0 - loss_of(&sm).0) / 2e-6;
                assert!((fd - analytic.data()[i]).abs() < 1e-5 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn inference_graph_yields_no_param_gradients() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::filled(2, 2, 0.5));
        let mut g = Graph::inference(&store);
        let x = g.input_with_grad(Tensor::filled(1, 2, 1.0));
        let wv = g.param(w);
        let y = g.linear(x, wv, None);
        let s = g.sum(y);
        let back = g.backward_full(s);
        assert!(back.params.get(w).is_none());
        assert_eq!(back.wrt(x).unwrap(), &Tensor::filled(1, 2, 1.0));
    }
}
