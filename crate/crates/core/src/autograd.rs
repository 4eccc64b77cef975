//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every forward operation appends a node holding its value and, when
//! gradients are enabled, whatever it needs for its backward rule. Each
//! operation kind is a variant of one closed enum and `backward` matches it
//! exhaustively, so an operation without a derivative rule does not compile.
//!
//! All tape values are rank-2; vectors are stored as `[1 × n]` rows or
//! `[L × 1]` columns.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::math::{
    dot, elu_plus_one, elu_plus_one_grad, gemm_acc, gemm_at_acc, gemm_bt_acc, layer_norm_kernel,
    linear_attention_backward, linear_attention_kernel, shape_str, sigmoid, silu, silu_grad,
    softmax_attention_backward, softmax_attention_kernel, LayerNormCache, Tensor,
};
use crate::params::{ParamId, ParamStore};
use crate::tadn::{causal_mean_kernel, convex_mix, delta_scan_backward, delta_scan_kernel, KEY_NORM_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Operation kinds, exposed so a test hook can corrupt one derivative rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Param,
    Linear,
    MatMulBt,
    Add,
    Sub,
    Mul,
    Scale,
    AddCol,
    MulCol,
    Sigmoid,
    Silu,
    EluPlusOne,
    Concat,
    CausalMean,
    RowDot,
    LayerNorm,
    L2NormalizeHeads,
    Mix,
    Gather,
    SliceRows,
    SoftmaxAttention,
    LinearAttention,
    DeltaScan,
    CrossEntropy,
    Sum,
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kinds = [
            OpKind::Linear,
            OpKind::MatMulBt,
            OpKind::Add,
            OpKind::Sub,
            OpKind::Mul,
            OpKind::Scale,
            OpKind::AddCol,
            OpKind::MulCol,
            OpKind::Sigmoid,
            OpKind::Silu,
            OpKind::EluPlusOne,
            OpKind::Concat,
            OpKind::CausalMean,
            OpKind::RowDot,
            OpKind::LayerNorm,
            OpKind::L2NormalizeHeads,
            OpKind::Mix,
            OpKind::Gather,
            OpKind::SliceRows,
            OpKind::SoftmaxAttention,
            OpKind::LinearAttention,
            OpKind::DeltaScan,
            OpKind::CrossEntropy,
            OpKind::Sum,
        ];
        kinds
            .into_iter()
            .find(|k| format!("{k:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown operation kind {s:?}")))
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Var },
    MatMulBt { a: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddCol { a: Var, col: Var },
    MulCol { a: Var, col: Var },
    Sigmoid(Var),
    Silu(Var),
    EluPlusOne(Var),
    Concat(Var, Var),
    CausalMean(Var),
    RowDot(Var, Var),
    LayerNorm { x: Var, gain: Var, shift: Var, cache: Option<LayerNormCache> },
    L2NormalizeHeads { x: Var, heads: usize },
    Mix { gate: Var, a: Var, b: Var },
    Gather { table: Var, ids: Vec<usize> },
    SliceRows { x: Var, start: usize },
    SoftmaxAttention { q: Var, k: Var, v: Var, heads: usize, weights: Vec<f64> },
    LinearAttention { q: Var, k: Var, v: Var, heads: usize },
    DeltaScan { q: Var, k: Var, v: Var, beta: Var, gate: Var, heads: usize, states: Vec<f64> },
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
    Sum(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param(_) => OpKind::Param,
            Op::Linear { .. } => OpKind::Linear,
            Op::MatMulBt { .. } => OpKind::MatMulBt,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddCol { .. } => OpKind::AddCol,
            Op::MulCol { .. } => OpKind::MulCol,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Silu(_) => OpKind::Silu,
            Op::EluPlusOne(_) => OpKind::EluPlusOne,
            Op::Concat(..) => OpKind::Concat,
            Op::CausalMean(_) => OpKind::CausalMean,
            Op::RowDot(..) => OpKind::RowDot,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::L2NormalizeHeads { .. } => OpKind::L2NormalizeHeads,
            Op::Mix { .. } => OpKind::Mix,
            Op::Gather { .. } => OpKind::Gather,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::SoftmaxAttention { .. } => OpKind::SoftmaxAttention,
            Op::LinearAttention { .. } => OpKind::LinearAttention,
            Op::DeltaScan { .. } => OpKind::DeltaScan,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum(_) => OpKind::Sum,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Multiplies every gradient emitted by one operation kind; used to verify
/// that the finite-difference checker catches a broken derivative rule.
#[derive(Debug, Clone, Copy)]
pub struct GradFault {
    pub kind: OpKind,
    pub factor: f64,
}

/// Parameter gradients produced by [`Tape::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// One tensor per store entry, zero where the loss does not depend on it.
    pub fn into_dense(mut self, store: &ParamStore) -> Vec<Tensor> {
        store
            .iter()
            .map(|(id, _, t)| match self.params.remove(&id) {
                Some(g) => g.reshape(t.shape()).expect("gradient has the parameter's element count"),
                None => Tensor::zeros(t.shape()),
            })
            .collect()
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    params: BTreeMap<ParamId, Var>,
    fault: Option<GradFault>,
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data).expect("tape op produced inconsistent shape")
}

impl Tape {
    /// A tape that records everything needed for [`Tape::backward`].
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            params: BTreeMap::new(),
            fault: None,
        }
    }

    /// A forward-only tape: large backward caches (attention weights, scan
    /// states) are not kept.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn with_fault(mut self, fault: GradFault) -> Self {
        self.fault = Some(fault);
        self
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by recorded values and backward caches.
    pub fn bytes(&self) -> usize {
        let cache = |op: &Op| match op {
            Op::SoftmaxAttention { weights, .. } => weights.len(),
            Op::DeltaScan { states, .. } => states.len(),
            Op::LayerNorm { cache: Some(c), .. } => c.normalized.len() + c.inv_std.len(),
            _ => 0,
        };
        self.nodes.iter().map(|n| (n.value.len() + cache(&n.op)) * 8).sum()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: kind_name(op.kind()),
            });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        let value = if value.shape().len() == 2 {
            value
        } else {
            let n = value.len();
            value.reshape(&[1, n])?
        };
        self.push(value, Op::Leaf)
    }

    /// Reads a parameter from the store; repeated reads share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let t = store.get(id);
        let value = if t.shape().len() == 2 {
            t.clone()
        } else {
            t.clone().reshape(&[1, t.len()])?
        };
        let v = self.push(value, Op::Param(id))?;
        self.params.insert(id, v);
        Ok(v)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(op, shape_str(self.value(a)), shape_str(self.value(b))));
        }
        Ok(())
    }

    /// `x · W + b`, `W: [d_in × d_out]`, `b: [1 × d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (l, d_in) = self.dims(x);
        let (wr, d_out) = self.dims(w);
        if wr != d_in || self.value(b).len() != d_out {
            return Err(Error::shape(
                "linear",
                format!("weight [{d_in} x _] and bias"),
                format!("{} {}", shape_str(self.value(w)), shape_str(self.value(b))),
            ));
        }
        let mut out = Vec::with_capacity(l * d_out);
        for _ in 0..l {
            out.extend_from_slice(self.value(b).data());
        }
        gemm_acc(self.value(x).data(), self.value(w).data(), &mut out, l, d_in, d_out);
        self.push(mat(l, d_out, out), Op::Linear { x, w, b })
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul_bt", format!("shared dimension {k}"), format!("{k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(mat(m, n, out), Op::MatMulBt { a, b })
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (r, c) = self.dims(a);
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        self.push(mat(r, c, data), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    fn check_col(&self, op: &'static str, a: Var, col: Var) -> Result<()> {
        let (r, _) = self.dims(a);
        if self.dims(col) != (r, 1) {
            return Err(Error::shape(op, format!("[{r} x 1] column"), shape_str(self.value(col))));
        }
        Ok(())
    }

    /// `a[L×n] + col[L×1]`, broadcasting the column across each row.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.check_col("add_col", a, col)?;
        let (r, c) = self.dims(a);
        let mut data = self.value(a).data().to_vec();
        for i in 0..r {
            let s = self.value(col).data()[i];
            data[i * c..(i + 1) * c].iter_mut().for_each(|x| *x += s);
        }
        self.push(mat(r, c, data), Op::AddCol { a, col })
    }

    /// `a[L×n] ⊙ col[L×1]`, broadcasting the column across each row.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.check_col("mul_col", a, col)?;
        let (r, c) = self.dims(a);
        let mut data = self.value(a).data().to_vec();
        for i in 0..r {
            let s = self.value(col).data()[i];
            data[i * c..(i + 1) * c].iter_mut().for_each(|x| *x *= s);
        }
        self.push(mat(r, c, data), Op::MulCol { a, col })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(silu);
        self.push(v, Op::Silu(a))
    }

    pub fn elu_plus_one(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(elu_plus_one);
        self.push(v, Op::EluPlusOne(a))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if ra != rb {
            return Err(Error::shape("concat", format!("{ra} rows"), format!("{rb} rows")));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(self.value(a).row(i));
            data.extend_from_slice(self.value(b).row(i));
        }
        self.push(mat(ra, ca + cb, data), Op::Concat(a, b))
    }

    /// Row `t` of the result is the mean of rows `0..=t`.
    pub fn causal_mean(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let data = causal_mean_kernel(self.value(a).data(), r, c);
        self.push(mat(r, c, data), Op::CausalMean(a))
    }

    /// Per-row inner products, `[L × 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (r, _) = self.dims(a);
        let data = (0..r).map(|i| dot(self.value(a).row(i), self.value(b).row(i))).collect();
        self.push(mat(r, 1, data), Op::RowDot(a, b))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(gain).len() != c || self.value(shift).len() != c {
            return Err(Error::shape("layer_norm", format!("gain/shift of {c}"), shape_str(self.value(gain))));
        }
        let (out, cache) = layer_norm_kernel(self.value(x).data(), self.value(gain).data(), self.value(shift).data(), c);
        let cache = self.grad_enabled.then_some(cache);
        self.push(mat(r, c, out), Op::LayerNorm { x, gain, shift, cache })
    }

    /// Unit-normalises each head's slice of every row.
    pub fn l2_normalize_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if heads == 0 || c % heads != 0 {
            return Err(Error::InvalidArgument(format!("width {c} not divisible into {heads} heads")));
        }
        let data = crate::tadn::l2_normalize_heads_kernel(self.value(x).data(), c, heads);
        self.push(mat(r, c, data), Op::L2NormalizeHeads { x, heads })
    }

    /// `gate ⊙ a + (1 − gate) ⊙ b`, all the same shape.
    pub fn mix(&mut self, gate: Var, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mix", gate, a)?;
        self.same_shape("mix", a, b)?;
        let (r, c) = self.dims(a);
        let (g, x, y) = (self.value(gate).data(), self.value(a).data(), self.value(b).data());
        let data = (0..r * c).map(|i| convex_mix(g[i], x[i], y[i])).collect();
        self.push(mat(r, c, data), Op::Mix { gate, a, b })
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, c) = self.dims(table);
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= n {
                return Err(Error::InvalidArgument(format!("row {i} out of range for table of {n}")));
            }
            data.extend_from_slice(self.value(table).row(i));
        }
        self.push(
            mat(ids.len(), c, data),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > r {
            return Err(Error::shape("slice_rows", format!("{} rows", start + len), format!("{r} rows")));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        self.push(mat(len, c, data), Op::SliceRows { x, start })
    }

    /// Causal multi-head softmax attention on projected `q`, `k`, `v`.
    pub fn softmax_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        crate::math::check_qkv("softmax_attention", self.value(q), self.value(k), self.value(v), heads)?;
        let (l, d) = self.dims(q);
        let mut weights = Vec::new();
        let keep = self.grad_enabled.then_some(&mut weights);
        let out = softmax_attention_kernel(self.value(q).data(), self.value(k).data(), self.value(v).data(), l, d, heads, true, keep);
        self.push(mat(l, d, out), Op::SoftmaxAttention { q, k, v, heads, weights })
    }

    /// Causal normalised linear attention on feature-mapped `q`, `k`.
    pub fn linear_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        crate::math::check_qkv("linear_attention", self.value(q), self.value(k), self.value(v), heads)?;
        let (l, d) = self.dims(q);
        let out = linear_attention_kernel(self.value(q).data(), self.value(k).data(), self.value(v).data(), l, d, heads, true);
        self.push(mat(l, d, out), Op::LinearAttention { q, k, v, heads })
    }

    /// Gated delta recurrence; `beta` and `gate` are `[L × 1]`.
    pub fn delta_scan(&mut self, q: Var, k: Var, v: Var, beta: Var, gate: Var, heads: usize) -> Result<Var> {
        crate::math::check_qkv("delta_scan", self.value(q), self.value(k), self.value(v), heads)?;
        self.check_col("delta_scan", q, beta)?;
        self.check_col("delta_scan", q, gate)?;
        let (l, d) = self.dims(q);
        let mut states = Vec::new();
        let keep = self.grad_enabled.then_some(&mut states);
        let out = delta_scan_kernel(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            self.value(beta).data(),
            self.value(gate).data(),
            l,
            d,
            heads,
            keep,
        );
        self.push(mat(l, d, out), Op::DeltaScan { q, k, v, beta, gate, heads, states })
    }

    /// `−log softmax(logits)[target]` for `[1 × V]` logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = self.value(logits).data();
        if target >= z.len() {
            return Err(Error::InvalidArgument(format!("target {target} out of range for {} logits", z.len())));
        }
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|x| (x - max).exp()).sum();
        let lse = max + sum.ln();
        let probs = z.iter().map(|x| (x - lse).exp()).collect();
        let loss = lse - z[target];
        self.push(mat(1, 1, vec![loss]), Op::CrossEntropy { logits, target, probs })
    }

    /// Sum of all elements, `[1 × 1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        self.push(mat(1, 1, vec![total]), Op::Sum(a))
    }

    /// Gradients of the scalar `loss` with respect to every parameter read on
    /// this tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::InvalidArgument("backward on an inference tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "scalar loss", shape_str(self.value(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut emitted: Vec<(Var, Vec<f64>)> = Vec::with_capacity(3);
            let val = |v: Var| self.nodes[v.0].value.data();
            let dims = |v: Var| self.dims(v);
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let t = Tensor::new(self.nodes[idx].value.shape().to_vec(), dy)?;
                    out.params.insert(*id, t);
                }
                Op::Linear { x, w, b } => {
                    let (l, d_in) = dims(*x);
                    let d_out = node.value.cols();
                    let mut dx = vec![0.0; l * d_in];
                    gemm_bt_acc(&dy, val(*w), &mut dx, l, d_out, d_in);
                    let mut dw = vec![0.0; d_in * d_out];
                    gemm_at_acc(val(*x), &dy, &mut dw, l, d_in, d_out);
                    let mut db = vec![0.0; d_out];
                    for row in dy.chunks(d_out) {
                        db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                    emitted.extend([(*x, dx), (*w, dw), (*b, db)]);
                }
                Op::MatMulBt { a, b } => {
                    let (m, k) = dims(*a);
                    let (n, _) = dims(*b);
                    let mut da = vec![0.0; m * k];
                    gemm_acc(&dy, val(*b), &mut da, m, n, k);
                    let mut db = vec![0.0; n * k];
                    gemm_at_acc(&dy, val(*a), &mut db, m, n, k);
                    emitted.extend([(*a, da), (*b, db)]);
                }
                Op::Add(a, b) => emitted.extend([(*a, dy.clone()), (*b, dy)]),
                Op::Sub(a, b) => {
                    let neg = dy.iter().map(|g| -g).collect();
                    emitted.extend([(*a, dy), (*b, neg)]);
                }
                Op::Mul(a, b) => {
                    let da = dy.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                    let db = dy.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                    emitted.extend([(*a, da), (*b, db)]);
                }
                Op::Scale(a, s) => emitted.push((*a, dy.iter().map(|g| g * s).collect())),
                Op::AddCol { a, col } => {
                    let c = node.value.cols();
                    let dcol = dy.chunks(c).map(|r| r.iter().sum()).collect();
                    emitted.extend([(*a, dy), (*col, dcol)]);
                }
                Op::MulCol { a, col } => {
                    let c = node.value.cols();
                    let cv = val(*col);
                    let av = val(*a);
                    let mut da = dy.clone();
                    let mut dcol = vec![0.0; cv.len()];
                    for i in 0..cv.len() {
                        da[i * c..(i + 1) * c].iter_mut().for_each(|g| *g *= cv[i]);
                        dcol[i] = dot(&dy[i * c..(i + 1) * c], &av[i * c..(i + 1) * c]);
                    }
                    emitted.extend([(*a, da), (*col, dcol)]);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    emitted.push((*a, dy.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect()));
                }
                Op::Silu(a) => {
                    emitted.push((*a, dy.iter().zip(val(*a)).map(|(g, &x)| g * silu_grad(x)).collect()));
                }
                Op::EluPlusOne(a) => {
                    emitted.push((*a, dy.iter().zip(val(*a)).map(|(g, &x)| g * elu_plus_one_grad(x)).collect()));
                }
                Op::Concat(a, b) => {
                    let (_, ca) = dims(*a);
                    let c = node.value.cols();
                    let mut da = Vec::with_capacity(dy.len());
                    let mut db = Vec::with_capacity(dy.len());
                    for row in dy.chunks(c) {
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    emitted.extend([(*a, da), (*b, db)]);
                }
                Op::CausalMean(a) => {
                    let (r, c) = dims(*a);
                    let mut dx = vec![0.0; r * c];
                    let mut acc = vec![0.0; c];
                    for t in (0..r).rev() {
                        let inv = 1.0 / (t + 1) as f64;
                        for j in 0..c {
                            acc[j] += dy[t * c + j] * inv;
                            dx[t * c + j] = acc[j];
                        }
                    }
                    emitted.push((*a, dx));
                }
                Op::RowDot(a, b) => {
                    let (r, c) = dims(*a);
                    let (av, bv) = (val(*a), val(*b));
                    let mut da = vec![0.0; r * c];
                    let mut db = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] = dy[i] * bv[i * c + j];
                            db[i * c + j] = dy[i] * av[i * c + j];
                        }
                    }
                    emitted.extend([(*a, da), (*b, db)]);
                }
                Op::LayerNorm { x, gain, shift, cache } => {
                    let cache = cache.as_ref().expect("layer norm cache on a gradient tape");
                    let (r, c) = dims(*x);
                    let g = val(*gain);
                    let mut dx = vec![0.0; r * c];
                    let mut dgain = vec![0.0; c];
                    let mut dshift = vec![0.0; c];
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        let xh = &cache.normalized[i * c..(i + 1) * c];
                        let go = &dy[i * c..(i + 1) * c];
                        for j in 0..c {
                            dxhat[j] = go[j] * g[j];
                            dgain[j] += go[j] * xh[j];
                            dshift[j] += go[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dot(&dxhat, xh) / c as f64;
                        for j in 0..c {
                            dx[i * c + j] = cache.inv_std[i] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                    emitted.extend([(*x, dx), (*gain, dgain), (*shift, dshift)]);
                }
                Op::L2NormalizeHeads { x, heads } => {
                    let c = node.value.cols();
                    let dh = c / heads;
                    let xv = val(*x);
                    let y = node.value.data();
                    let mut dx = vec![0.0; dy.len()];
                    for s in (0..dy.len()).step_by(dh) {
                        let r = s..s + dh;
                        let n = xv[r.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                        if n > KEY_NORM_FLOOR {
                            let proj = dot(&y[r.clone()], &dy[r.clone()]);
                            for j in r {
                                dx[j] = (dy[j] - y[j] * proj) / n;
                            }
                        } else {
                            for j in r {
                                dx[j] = dy[j] / KEY_NORM_FLOOR;
                            }
                        }
                    }
                    emitted.push((*x, dx));
                }
                Op::Mix { gate, a, b } => {
                    let (g, av, bv) = (val(*gate), val(*a), val(*b));
                    let n = dy.len();
                    let dg = (0..n).map(|i| dy[i] * (av[i] - bv[i])).collect();
                    let da = (0..n).map(|i| dy[i] * g[i]).collect();
                    let db = (0..n).map(|i| dy[i] * (1.0 - g[i])).collect();
                    emitted.extend([(*gate, dg), (*a, da), (*b, db)]);
                }
                Op::Gather { table, ids } => {
                    let (n, c) = dims(*table);
                    let mut dt = vec![0.0; n * c];
                    for (r, &i) in ids.iter().enumerate() {
                        dt[i * c..(i + 1) * c].iter_mut().zip(&dy[r * c..(r + 1) * c]).for_each(|(a, g)| *a += g);
                    }
                    emitted.push((*table, dt));
                }
                Op::SliceRows { x, start } => {
                    let (r, c) = dims(*x);
                    let mut dx = vec![0.0; r * c];
                    dx[start * c..start * c + dy.len()].copy_from_slice(&dy);
                    emitted.push((*x, dx));
                }
                Op::SoftmaxAttention { q, k, v, heads, weights } => {
                    let (l, d) = dims(*q);
                    let (dq, dk, dv) = softmax_attention_backward(val(*q), val(*k), val(*v), weights, &dy, l, d, *heads, true);
                    emitted.extend([(*q, dq), (*k, dk), (*v, dv)]);
                }
                Op::LinearAttention { q, k, v, heads } => {
                    let (l, d) = dims(*q);
                    let (dq, dk, dv) = linear_attention_backward(val(*q), val(*k), val(*v), &dy, l, d, *heads, true);
                    emitted.extend([(*q, dq), (*k, dk), (*v, dv)]);
                }
                Op::DeltaScan { q, k, v, beta, gate, heads, states } => {
                    let (l, d) = dims(*q);
                    let g = delta_scan_backward(val(*q), val(*k), val(*v), val(*beta), val(*gate), states, &dy, l, d, *heads);
                    emitted.extend([(*q, g.dq), (*k, g.dk), (*v, g.dv), (*beta, g.dbeta), (*gate, g.dgate)]);
                }
                Op::CrossEntropy { logits, target, probs } => {
                    let mut dz: Vec<f64> = probs.iter().map(|p| p * dy[0]).collect();
                    dz[*target] -= dy[0];
                    emitted.push((*logits, dz));
                }
                Op::Sum(a) => emitted.push((*a, vec![dy[0]; self.value(*a).len()])),
            }
            if let Some(f) = self.fault.filter(|f| f.kind == node.op.kind()) {
                for (_, g) in emitted.iter_mut() {
                    g.iter_mut().for_each(|x| *x *= f.factor);
                }
            }
            for (v, g) in emitted {
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(out)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn kind_name(kind: OpKind) -> &'static str {
    match kind {
        OpKind::Leaf => "leaf",
        OpKind::Param => "param",
        OpKind::Linear => "linear",
        OpKind::MatMulBt => "matmul_bt",
        OpKind::Add => "add",
        OpKind::Sub => "sub",
        OpKind::Mul => "mul",
        OpKind::Scale => "scale",
        OpKind::AddCol => "add_col",
        OpKind::MulCol => "mul_col",
        OpKind::Sigmoid => "sigmoid",
        OpKind::Silu => "silu",
        OpKind::EluPlusOne => "elu_plus_one",
        OpKind::Concat => "concat",
        OpKind::CausalMean => "causal_mean",
        OpKind::RowDot => "row_dot",
        OpKind::LayerNorm => "layer_norm",
        OpKind::L2NormalizeHeads => "l2_normalize_heads",
        OpKind::Mix => "mix",
        OpKind::Gather => "gather",
        OpKind::SliceRows => "slice_rows",
        OpKind::SoftmaxAttention => "softmax_attention",
        OpKind::LinearAttention => "linear_attention",
        OpKind::DeltaScan => "delta_scan",
        OpKind::CrossEntropy => "cross_entropy",
        OpKind::Sum => "sum",
    }
}
