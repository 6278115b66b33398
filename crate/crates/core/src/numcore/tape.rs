//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation evaluates eagerly, checks its output for NaN/Inf and
//! appends a node holding the value plus whatever context its backward rule
//! needs. Nodes are only ever appended after their inputs, so replaying the
//! tape in reverse index order is a valid topological traversal.
//!
//! Parameters are borrowed from a [`ParamStore`] and bound lazily, so a
//! forward pass never copies weights.

use std::borrow::Cow;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GlotError, Result};
use crate::numcore::kernels::{self, Exec};
use crate::numcore::{AttentionMask, ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the second operand of `add`/`mul` is laid over the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// `b` is a `d`-vector (or `1×d`) repeated across every row.
    Row,
    /// `b` is `F×1` repeated across every column.
    Col,
}

enum Op {
    Leaf,
    Param(ParamId),
    Add { a: Var, b: Var, bcast: Bcast },
    Mul { a: Var, b: Var, bcast: Bcast },
    Affine { a: Var, scale: f64 },
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Sigmoid { a: Var },
    Relu { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    MaskedScores { q: Var, k: Var, mask: Arc<AttentionMask>, scale: f64 },
    MaskedSoftmax { x: Var, mask: Arc<AttentionMask> },
    MaskedWeightedSum { alpha: Var, v: Var, mask: Arc<AttentionMask> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Conv1d { x: Var, w: Var, b: Var },
    MeanRows { a: Var },
    BroadcastRows { a: Var },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    SliceCols { a: Var, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    Dropout { a: Var, scale_mask: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Deliberate backward-rule corruption, used as a negative control by the
/// gradient checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    SigmoidBackward,
}

pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    params: Option<&'p ParamStore>,
    bound: Vec<Option<Var>>,
    training: bool,
    rng: Option<ChaCha8Rng>,
    score_evaluations: u64,
    fault: Option<Fault>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    /// Evaluation-mode tape with no parameter store.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: None,
            bound: Vec::new(),
            training: false,
            rng: None,
            score_evaluations: 0,
            fault: None,
        }
    }

    /// Evaluation-mode tape that can bind parameters from `params`.
    pub fn with_params(params: &'p ParamStore) -> Self {
        Tape { params: Some(params), bound: vec![None; params.len()], ..Tape::new() }
    }

    /// Switches dropout on, drawing masks from a generator seeded with `seed`.
    pub fn train(mut self, seed: u64) -> Self {
        self.training = true;
        self.rng = Some(ChaCha8Rng::seed_from_u64(seed));
        self
    }

    pub fn with_fault(mut self, fault: Fault) -> Self {
        self.fault = Some(fault);
        self
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

    /// (query, key) dot products computed by score kernels so far.
    pub fn score_evaluations(&self) -> u64 {
        self.score_evaluations
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, requires_grad: bool, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(GlotError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value: Cow::Owned(value), requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", t, false, Op::Leaf)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push("leaf", t, true, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let store = self.params.expect("tape has no parameter store");
        self.nodes.push(Node { value: Cow::Borrowed(store.get(id)), requires_grad: true, op: Op::Param(id) });
        let v = Var(self.nodes.len() - 1);
        self.bound[id.0] = Some(v);
        v
    }

    fn bcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Bcast::Same);
        }
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.rank() == 2 {
            let (r, c) = (sa[0], sa[1]);
            if (tb.rank() == 1 && sb[0] == c) || (tb.rank() == 2 && sb == [1, c]) {
                return Ok(Bcast::Row);
            }
            if tb.rank() == 2 && sb == [r, 1] {
                return Ok(Bcast::Col);
            }
        }
        Err(GlotError::shape(op, format!("cannot broadcast {sb:?} onto {sa:?}")))
    }

    fn binary_map(&self, a: Var, b: Var, bcast: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let tb = self.value(b).data();
        let cols = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match bcast {
                    Bcast::Same => tb[i],
                    Bcast::Row => tb[i % cols],
                    Bcast::Col => tb[i / cols],
                };
                f(x, y)
            })
            .collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bcast = self.bcast_kind("add", a, b)?;
        let out = self.binary_map(a, b, bcast, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push("add", out, rg, Op::Add { a, b, bcast })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bcast = self.bcast_kind("mul", a, b)?;
        let out = self.binary_map(a, b, bcast, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", out, rg, Op::Mul { a, b, bcast })
    }

    /// `scale · a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| scale * x + shift).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push("affine", out, rg, Op::Affine { a, scale })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.affine(a, s, 0.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.value(a).require_matrix("matmul")?;
        let (q2, r) = self.value(b).require_matrix("matmul")?;
        if q != q2 {
            return Err(GlotError::shape("matmul", format!("{p}x{q} · {q2}x{r}")));
        }
        let mut out = vec![0.0; p * r];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, p, q, r, Exec::auto(p * r * q));
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::from_parts(vec![p, r], out), rg, Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).require_matrix("transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push("transpose", Tensor::from_parts(vec![c, r], out), rg, Op::Transpose { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| sigmoid(x)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push("sigmoid", out, rg, Op::Sigmoid { a })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x.max(0.0)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push("relu", out, rg, Op::Relu { a })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push("sum", Tensor::scalar(s), rg, Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.sum() / t.len() as f64;
        let rg = self.rg(a);
        self.push("mean", Tensor::scalar(m), rg, Op::Mean { a })
    }

    /// `S[i][j] = scale·⟨q_i, k_j⟩` for allowed pairs, 0 elsewhere. Only the
    /// allowed pairs are evaluated, and each one bumps the score counter.
    pub fn masked_scores(&mut self, q: Var, k: Var, mask: &Arc<AttentionMask>, scale: f64) -> Result<Var> {
        let (lq, d) = self.value(q).require_matrix("masked_scores")?;
        let (lk, d2) = self.value(k).require_matrix("masked_scores")?;
        if d != d2 || !mask.same_shape(lq, lk) {
            return Err(GlotError::shape(
                "masked_scores",
                format!("q {lq}x{d}, k {lk}x{d2}, mask {}x{}", mask.rows(), mask.cols()),
            ));
        }
        let (qd, kd) = (self.value(q).data(), self.value(k).data());
        let mut out = vec![0.0; lq * lk];
        kernels::for_each_row(&mut out, lk, Exec::auto(mask.count() * d), |i, row| {
            let qi = &qd[i * d..(i + 1) * d];
            for &j in mask.row(i) {
                row[j] = scale * kernels::dot(qi, &kd[j * d..(j + 1) * d]);
            }
        });
        self.score_evaluations += mask.count() as u64;
        let rg = self.rg(q) || self.rg(k);
        self.push(
            "masked_scores",
            Tensor::from_parts(vec![lq, lk], out),
            rg,
            Op::MaskedScores { q, k, mask: Arc::clone(mask), scale },
        )
    }

    /// Row-wise softmax over allowed entries; masked entries are exactly 0.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: &Arc<AttentionMask>) -> Result<Var> {
        let (r, c) = self.value(x).require_matrix("masked_softmax_rows")?;
        if !mask.same_shape(r, c) {
            return Err(GlotError::shape("masked_softmax_rows", "mask shape differs from input"));
        }
        if let Some(row) = (0..r).find(|&i| mask.row(i).is_empty()) {
            return Err(GlotError::precondition("masked_softmax_rows", format!("row {row} has no allowed entry")));
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; r * c];
        kernels::for_each_row(&mut out, c, Exec::auto(mask.count() * 8), |i, row| {
            let xi = &xd[i * c..(i + 1) * c];
            let members = mask.row(i);
            let m = members.iter().map(|&j| xi[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for &j in members {
                let e = (xi[j] - m).exp();
                row[j] = e;
                s += e;
            }
            for &j in members {
                row[j] /= s;
            }
        });
        let rg = self.rg(x);
        self.push(
            "masked_softmax_rows",
            Tensor::from_parts(vec![r, c], out),
            rg,
            Op::MaskedSoftmax { x, mask: Arc::clone(mask) },
        )
    }

    /// `out_i = Σ_{j allowed} α[i][j] · v_j`.
    pub fn masked_weighted_sum(&mut self, alpha: Var, v: Var, mask: &Arc<AttentionMask>) -> Result<Var> {
        let (lq, lk) = self.value(alpha).require_matrix("masked_weighted_sum")?;
        let (lk2, d) = self.value(v).require_matrix("masked_weighted_sum")?;
        if lk != lk2 || !mask.same_shape(lq, lk) {
            return Err(GlotError::shape("masked_weighted_sum", format!("alpha {lq}x{lk}, v {lk2}x{d}")));
        }
        let (ad, vd) = (self.value(alpha).data(), self.value(v).data());
        let mut out = vec![0.0; lq * d];
        kernels::for_each_row(&mut out, d, Exec::auto(mask.count() * d), |i, row| {
            for &j in mask.row(i) {
                let w = ad[i * lk + j];
                for (o, &vj) in row.iter_mut().zip(&vd[j * d..(j + 1) * d]) {
                    *o += w * vj;
                }
            }
        });
        let rg = self.rg(alpha) || self.rg(v);
        self.push(
            "masked_weighted_sum",
            Tensor::from_parts(vec![lq, d], out),
            rg,
            Op::MaskedWeightedSum { alpha, v, mask: Arc::clone(mask) },
        )
    }

    /// Per-row `gain ⊙ (x − μ)/√(σ² + eps) + bias` with population variance.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (r, d) = (tx.rows(), tx.cols());
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(GlotError::shape("layer_norm", format!("gain/bias must have width {d}")));
        }
        if eps <= 0.0 {
            return Err(GlotError::precondition("layer_norm", "eps must be positive"));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; r * d];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = tx.row(i);
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
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let shape = tx.shape().to_vec();
        self.push("layer_norm", Tensor::from_parts(shape, out), rg, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// Same-length 1-D convolution over the sequence axis with zero padding.
    /// `x`: F×c_in, `w`: c_out×c_in×k (k odd), `b`: c_out.
    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (f, cin) = self.value(x).require_matrix("conv1d_same")?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 3 || ws[1] != cin {
            return Err(GlotError::shape("conv1d_same", format!("kernel {ws:?} for input width {cin}")));
        }
        let (cout, k) = (ws[0], ws[2]);
        if k % 2 == 0 {
            return Err(GlotError::Config(format!("conv kernel size must be odd, got {k}")));
        }
        if self.value(b).len() != cout {
            return Err(GlotError::shape("conv1d_same", "bias width differs from output channels"));
        }
        let half = (k - 1) / 2;
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; f * cout];
        kernels::for_each_row(&mut out, cout, Exec::auto(f * cout * cin * k), |t, row| {
            for (o, slot) in row.iter_mut().enumerate() {
                let mut acc = bd[o];
                for j in 0..k {
                    let src = t as isize + j as isize - half as isize;
                    if src < 0 || src >= f as isize {
                        continue;
                    }
                    let xr = &xd[src as usize * cin..(src as usize + 1) * cin];
                    for (c, &xv) in xr.iter().enumerate() {
                        acc += wd[(o * cin + c) * k + j] * xv;
                    }
                }
                *slot = acc;
            }
        });
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push("conv1d_same", Tensor::from_parts(vec![f, cout], out), rg, Op::Conv1d { x, w, b })
    }

    /// Column means of an F×d matrix, as a d-vector.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (f, d) = self.value(a).require_matrix("global_avg_pool")?;
        let ad = self.value(a).data();
        let mut out = vec![0.0; d];
        for i in 0..f {
            for (o, &v) in out.iter_mut().zip(&ad[i * d..(i + 1) * d]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= f as f64);
        let rg = self.rg(a);
        self.push("global_avg_pool", Tensor::from_parts(vec![d], out), rg, Op::MeanRows { a })
    }

    /// Repeats a d-vector into `rows` identical rows.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.rows() != 1 || rows == 0 {
            return Err(GlotError::shape("broadcast_rows", format!("need a single row, got {:?}", ta.shape())));
        }
        let d = ta.cols();
        let data = ta.data().repeat(rows);
        let rg = self.rg(a);
        self.push("broadcast_rows", Tensor::from_parts(vec![rows, d], data), rg, Op::BroadcastRows { a })
    }

    /// Stacks along the feature axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| GlotError::shape("concat_channels", "no inputs"))?;
        let r = self.value(first).require_matrix("concat_channels")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).require_matrix("concat_channels")?;
            if pr != r {
                return Err(GlotError::shape("concat_channels", format!("row counts {r} and {pr}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            "concat_channels",
            Tensor::from_parts(vec![r, total], out),
            rg,
            Op::ConcatCols { parts: parts.to_vec() },
        )
    }

    /// Stacks along the sequence axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| GlotError::shape("concat_rows", "no inputs"))?;
        let c = self.value(first).require_matrix("concat_rows")?.1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).require_matrix("concat_rows")?;
            if pc != c {
                return Err(GlotError::shape("concat_rows", format!("widths {c} and {pc}")));
            }
            rows += pr;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat_rows", Tensor::from_parts(vec![rows, c], out), rg, Op::ConcatRows { parts: parts.to_vec() })
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.value(a).require_matrix("slice_cols")?;
        if start >= end || end > c {
            return Err(GlotError::shape("slice_cols", format!("range {start}..{end} of width {c}")));
        }
        let w = end - start;
        let ta = self.value(a);
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&ta.row(i)[start..end]);
        }
        let rg = self.rg(a);
        self.push("slice_cols", Tensor::from_parts(vec![r, w], out), rg, Op::SliceCols { a, start })
    }

    /// Embedding lookup: row `ids[i]` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).require_matrix("gather_rows")?;
        if ids.is_empty() {
            return Err(GlotError::shape("gather_rows", "no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(GlotError::Data(format!("token id {bad} out of range for vocabulary of {v}")));
        }
        let tt = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tt.row(i));
        }
        let rg = self.rg(table);
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![ids.len(), d], out),
            rg,
            Op::Gather { table, ids: ids.to_vec() },
        )
    }

    /// Inverted dropout. Identity (the same node) when not training or when
    /// `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(GlotError::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let n = self.value(a).len();
        let rng = self.rng.as_mut().expect("training tape carries an rng");
        let scale_mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let ta = self.value(a);
        let data = ta.data().iter().zip(&scale_mask).map(|(x, m)| x * m).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push("dropout", out, rg, Op::Dropout { a, scale_mask })
    }

    /// Mean token cross-entropy over positions whose target is not `pad_id`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad_id: Option<usize>) -> Result<Var> {
        let (l, v) = self.value(logits).require_matrix("cross_entropy")?;
        if targets.len() != l {
            return Err(GlotError::shape("cross_entropy", format!("{} targets for {l} positions", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(GlotError::Data(format!("target id {bad} outside vocabulary of {v}")));
        }
        let kept: Vec<Option<usize>> = targets.iter().map(|&t| (Some(t) != pad_id).then_some(t)).collect();
        let count = kept.iter().flatten().count();
        if count == 0 {
            return Err(GlotError::Contract("cross_entropy: every position is padding".into()));
        }
        let lt = self.value(logits);
        let mut probs = vec![0.0; l * v];
        let mut total = 0.0;
        for i in 0..l {
            let row = lt.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|x| (x - m).exp()).sum();
            let log_z = m + s.ln();
            for j in 0..v {
                probs[i * v + j] = (row[j] - log_z).exp();
            }
            if let Some(t) = kept[i] {
                total += log_z - row[t];
            }
        }
        let rg = self.rg(logits);
        self.push(
            "cross_entropy",
            Tensor::scalar(total / count as f64),
            rg,
            Op::CrossEntropy { logits, targets: kept, probs, count },
        )
    }

    /// Propagates d`loss`/d(node) back through the tape, consuming it.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(GlotError::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut param_grads = vec![None; self.bound.len()];
        let mut leaf_grads = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            let Some(g) = grads[idx].take() else { continue };
            let t = Tensor::from_parts(node.value.shape().to_vec(), g);
            match node.op {
                Op::Param(id) => param_grads[id.0] = Some(t),
                Op::Leaf if node.requires_grad => leaf_grads.push((Var(idx), t)),
                _ => {}
            }
        }
        Ok(Gradients { params: param_grads, leaves: leaf_grads })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add { a, b, bcast } => {
                self.accum(grads, *a, |buf| add_into(buf, g));
                self.accum(grads, *b, |buf| reduce_bcast(buf, g, *bcast, self.value(*a).cols()));
            }
            Op::Mul { a, b, bcast } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let cols = ta.cols();
                self.accum(grads, *a, |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[i] += gi * tb.data()[bcast_index(i, cols, *bcast)];
                    }
                });
                self.accum(grads, *b, |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[bcast_index(i, cols, *bcast)] += gi * ta.data()[i];
                    }
                });
            }
            Op::Affine { a, scale } => {
                self.accum(grads, *a, |buf| buf.iter_mut().zip(g).for_each(|(o, gi)| *o += scale * gi));
            }
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (p, q, r) = (ta.rows(), ta.cols(), tb.cols());
                // dA = G·Bᵀ, dB = Aᵀ·G
                self.accum(grads, *a, |buf| {
                    let mut tmp = vec![0.0; p * q];
                    kernels::matmul_bt(g, tb.data(), &mut tmp, p, r, q, Exec::auto(p * q * r));
                    add_into(buf, &tmp);
                });
                self.accum(grads, *b, |buf| {
                    let mut tmp = vec![0.0; q * r];
                    kernels::matmul_at(ta.data(), g, &mut tmp, p, q, r, Exec::auto(p * q * r));
                    add_into(buf, &tmp);
                });
            }
            Op::Transpose { a } => {
                let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                self.accum(grads, *a, |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Sigmoid { a } => {
                let corrupt = if self.fault == Some(Fault::SigmoidBackward) { 1.5 } else { 1.0 };
                self.accum(grads, *a, |buf| {
                    for ((o, gi), y) in buf.iter_mut().zip(g).zip(out) {
                        *o += corrupt * gi * y * (1.0 - y);
                    }
                });
            }
            Op::Relu { a } => {
                let x = self.value(*a).data();
                self.accum(grads, *a, |buf| {
                    for ((o, gi), xi) in buf.iter_mut().zip(g).zip(x) {
                        if *xi > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Sum { a } => {
                self.accum(grads, *a, |buf| buf.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Mean { a } => {
                let n = self.value(*a).len() as f64;
                self.accum(grads, *a, |buf| buf.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::MaskedScores { q, k, mask, scale } => {
                let (tq, tk) = (self.value(*q), self.value(*k));
                let d = tq.cols();
                let lk = tk.rows();
                self.accum(grads, *q, |buf| {
                    for i in 0..mask.rows() {
                        for &j in mask.row(i) {
                            let gij = scale * g[i * lk + j];
                            for (o, kv) in buf[i * d..(i + 1) * d].iter_mut().zip(tk.row(j)) {
                                *o += gij * kv;
                            }
                        }
                    }
                });
                self.accum(grads, *k, |buf| {
                    for i in 0..mask.rows() {
                        for &j in mask.row(i) {
                            let gij = scale * g[i * lk + j];
                            for (o, qv) in buf[j * d..(j + 1) * d].iter_mut().zip(tq.row(i)) {
                                *o += gij * qv;
                            }
                        }
                    }
                });
            }
            Op::MaskedSoftmax { x, mask } => {
                let c = mask.cols();
                self.accum(grads, *x, |buf| {
                    for i in 0..mask.rows() {
                        let members = mask.row(i);
                        let dot: f64 = members.iter().map(|&j| out[i * c + j] * g[i * c + j]).sum();
                        for &j in members {
                            buf[i * c + j] += out[i * c + j] * (g[i * c + j] - dot);
                        }
                    }
                });
            }
            Op::MaskedWeightedSum { alpha, v, mask } => {
                let (ta, tv) = (self.value(*alpha), self.value(*v));
                let (lk, d) = (ta.cols(), tv.cols());
                self.accum(grads, *alpha, |buf| {
                    for i in 0..mask.rows() {
                        let gi = &g[i * d..(i + 1) * d];
                        for &j in mask.row(i) {
                            buf[i * lk + j] += kernels::dot(gi, tv.row(j));
                        }
                    }
                });
                self.accum(grads, *v, |buf| {
                    for i in 0..mask.rows() {
                        let gi = &g[i * d..(i + 1) * d];
                        for &j in mask.row(i) {
                            let w = ta.data()[i * lk + j];
                            for (o, gv) in buf[j * d..(j + 1) * d].iter_mut().zip(gi) {
                                *o += w * gv;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gamma = self.value(*gain).data();
                let d = gamma.len();
                let rows = inv_std.len();
                self.accum(grads, *x, |buf| {
                    for i in 0..rows {
                        let gi = &g[i * d..(i + 1) * d];
                        let hi = &xhat[i * d..(i + 1) * d];
                        let dh: Vec<f64> = gi.iter().zip(gamma).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hi).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            buf[i * d + j] += inv_std[i] * (dh[j] - mean_dh - hi[j] * mean_dh_h);
                        }
                    }
                });
                self.accum(grads, *gain, |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[i % d] += gi * xhat[i];
                    }
                });
                self.accum(grads, *bias, |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[i % d] += gi;
                    }
                });
            }
            Op::Conv1d { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (f, cin) = (tx.rows(), tx.cols());
                let (cout, k) = (tw.shape()[0], tw.shape()[2]);
                let half = (k - 1) / 2;
                let (xd, wd) = (tx.data(), tw.data());
                let taps = |t: usize, j: usize| {
                    let src = t as isize + j as isize - half as isize;
                    (src >= 0 && src < f as isize).then_some(src as usize)
                };
                self.accum(grads, *x, |buf| {
                    for t in 0..f {
                        for o in 0..cout {
                            let gto = g[t * cout + o];
                            for j in 0..k {
                                let Some(src) = taps(t, j) else { continue };
                                for c in 0..cin {
                                    buf[src * cin + c] += gto * wd[(o * cin + c) * k + j];
                                }
                            }
                        }
                    }
                });
                self.accum(grads, *w, |buf| {
                    for t in 0..f {
                        for o in 0..cout {
                            let gto = g[t * cout + o];
                            for j in 0..k {
                                let Some(src) = taps(t, j) else { continue };
                                for c in 0..cin {
                                    buf[(o * cin + c) * k + j] += gto * xd[src * cin + c];
                                }
                            }
                        }
                    }
                });
                self.accum(grads, *b, |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[i % cout] += gi;
                    }
                });
            }
            Op::MeanRows { a } => {
                let (f, d) = (self.value(*a).rows(), self.value(*a).cols());
                self.accum(grads, *a, |buf| {
                    for (i, o) in buf.iter_mut().enumerate() {
                        *o += g[i % d] / f as f64;
                    }
                });
            }
            Op::BroadcastRows { a } => {
                let d = self.value(*a).cols();
                self.accum(grads, *a, |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[i % d] += gi;
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let (r, w) = (self.value(p).rows(), self.value(p).cols());
                    self.accum(grads, p, |buf| {
                        for i in 0..r {
                            for j in 0..w {
                                buf[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accum(grads, p, |buf| add_into(buf, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::SliceCols { a, start } => {
                let c = self.value(*a).cols();
                let w = node.value.cols();
                self.accum(grads, *a, |buf| {
                    for i in 0..node.value.rows() {
                        for j in 0..w {
                            buf[i * c + start + j] += g[i * w + j];
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = self.value(*table).cols();
                self.accum(grads, *table, |buf| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            buf[id * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::Dropout { a, scale_mask } => {
                self.accum(grads, *a, |buf| {
                    for ((o, gi), m) in buf.iter_mut().zip(g).zip(scale_mask) {
                        *o += gi * m;
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let v = self.value(*logits).cols();
                let s = g[0] / *count as f64;
                self.accum(grads, *logits, |buf| {
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            buf[i * v + j] += s * (probs[i * v + j] - onehot);
                        }
                    }
                });
            }
        }
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(buf);
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    leaves: Vec<(Var, Tensor)>,
}

impl Gradients {
    /// Gradient of a leaf created with [`Tape::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.iter().find(|(l, _)| *l == v).map(|(_, t)| t)
    }

    /// Gradient of a bound parameter; `None` if it did not reach the loss.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    pub fn into_params(self) -> Vec<Option<Tensor>> {
        self.params
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(buf: &mut [f64], g: &[f64]) {
    buf.iter_mut().zip(g).for_each(|(o, gi)| *o += gi);
}

#[inline]
fn bcast_index(i: usize, cols: usize, bcast: Bcast) -> usize {
    match bcast {
        Bcast::Same => i,
        Bcast::Row => i % cols,
        Bcast::Col => i / cols,
    }
}

fn reduce_bcast(buf: &mut [f64], g: &[f64], bcast: Bcast, cols: usize) {
    for (i, gi) in g.iter().enumerate() {
        buf[bcast_index(i, cols, bcast)] += gi;
    }
}
