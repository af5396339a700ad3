//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Every op appends one node to a [`Tape`]; nodes are only ever appended, so
//! the tape order is a topological order and the backward sweep is a single
//! reverse pass that visits each node at most once.
//!
//! Convolutions are cross-correlations with symmetric zero padding:
//!
//! ```text
//! out[t] = Σ_k taps[k] · signal[t + k − (K − 1) / 2]
//! ```
//!
//! so a kernel whose mass sits left of centre moves signal mass forward
//! (towards larger indices).

use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
    Softplus,
    Abs,
    Square,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Relu => "relu",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Softplus => "softplus",
            Unary::Abs => "abs",
            Unary::Square => "square",
        }
    }

    fn forward(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(0.0),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Softplus => softplus(x),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Softplus => sigmoid(x),
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
        }
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

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LogClamped { x: Var, threshold: f64 },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    VecMat(Var, Var),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Row { x: Var, row: usize },
    StackRows(Vec<Var>),
    ConcatCols(Var, Var),
    BroadcastRows(Var),
    Reshape(Var),
    SoftmaxMasked { x: Var, valid: Vec<bool> },
    Conv1dSame { signal: Var, taps: Var },
    ConvBank { signal: Var, bank: Var },
    Conv1dMulti { x: Var, w: Var, b: Var },
    Gather { table: Var, ids: Vec<usize> },
    L2NormalizeRows { x: Var, eps: f64 },
    RowDot(Var, Var),
    RowLogSumExp(Var),
    PickCols { x: Var, cols: Vec<usize> },
    PlaceCols { x: Var, cols: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// A tape is single-owner; build one per forward pass (or per example when
/// accumulating gradients in parallel) and discard it after [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by a backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` was not reached.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `v`; zeros when unreached.
    pub fn tensor(&self, tape: &Tape, v: Var) -> Tensor {
        let value = tape.value(v);
        match self.get(v) {
            Some(g) => Tensor::new(value.shape().to_vec(), g.to_vec())
                .expect("gradient length matches node value"),
            None => value.same_shape_zeros(),
        }
    }
}

fn check2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(Error::shape(op, format!("expected matrix, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn check1(op: &'static str, t: &Tensor) -> Result<usize> {
    if t.ndim() != 1 {
        return Err(Error::shape(op, format!("expected vector, got {:?}", t.shape())));
    }
    Ok(t.shape()[0])
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            op => self.inputs(op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Unary(_, x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::LogClamped { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Slice { x, .. }
            | Op::Row { x, .. }
            | Op::BroadcastRows(x)
            | Op::Reshape(x)
            | Op::SoftmaxMasked { x, .. }
            | Op::Gather { table: x, .. }
            | Op::L2NormalizeRows { x, .. }
            | Op::RowLogSumExp(x)
            | Op::PickCols { x, .. }
            | Op::PlaceCols { x, .. } => vec![*x],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::VecMat(a, b)
            | Op::Dot(a, b)
            | Op::ConcatCols(a, b)
            | Op::RowDot(a, b) => vec![*a, *b],
            Op::Conv1dSame { signal, taps } => vec![*signal, *taps],
            Op::ConvBank { signal, bank } => vec![*signal, *bank],
            Op::Conv1dMulti { x, w, b } => vec![*x, *w, *b],
            Op::Concat(vs) | Op::StackRows(vs) => vs.clone(),
        }
    }

    /// Records a tensor as a leaf. Gradients are accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    // ---------------------------------------------------------------- elementwise

    fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| kind.forward(v));
        self.push(out, Op::Unary(kind, x), kind.name())
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Softplus, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `m [r, c] + v [c]`, broadcasting `v` over rows.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let (tm, tv) = (self.value(m), self.value(v));
        let (r, c) = check2("add_row", tm)?;
        if check1("add_row", tv)? != c {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", tm.shape(), tv.shape())));
        }
        let mut data = tm.data().to_vec();
        for i in 0..r {
            for (d, x) in data[i * c..(i + 1) * c].iter_mut().zip(tv.data()) {
                *d += x;
            }
        }
        let out = Tensor::new(vec![r, c], data)?;
        self.push(out, Op::AddRow(m, v), "add_row")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor), "scale")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x), "add_scalar")
    }

    /// `ln(x)` where `x > threshold`, `floor` elsewhere (zero gradient there).
    pub fn log_clamped(&mut self, x: Var, threshold: f64, floor: f64) -> Result<Var> {
        let out = self
            .value(x)
            .map(|v| if v > threshold { v.ln() } else { floor });
        self.push(out, Op::LogClamped { x, threshold }, "log_clamped")
    }

    // ---------------------------------------------------------------- linear algebra

    /// `a [m, k] · b [k, n] -> [m, n]`, or `a [m, k] · b [k] -> [m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = check2("matmul", ta)?;
        let (kb, n, vec_out) = match tb.ndim() {
            1 => (tb.shape()[0], 1, true),
            2 => (tb.shape()[0], tb.shape()[1], false),
            _ => return Err(Error::shape("matmul", format!("rhs {:?}", tb.shape()))),
        };
        if k != kb {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        if n == 1 && k > 0 {
            for (o, arow) in out.iter_mut().zip(ad.chunks_exact(k)) {
                *o = dot(arow, bd);
            }
        } else {
            for i in 0..m {
                let arow = &ad[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (p, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    for (o, &bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                        *o += av * bv;
                    }
                }
            }
        }
        let shape = if vec_out { vec![m] } else { vec![m, n] };
        self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), "matmul")
    }

    /// `a [m, k] · bᵀ` for `b [n, k]`, giving `[m, n]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = check2("matmul_t", ta)?;
        let (n, kb) = check2("matmul_t", tb)?;
        if k != kb {
            return Err(Error::shape("matmul_t", format!("{:?} x {:?}ᵀ", ta.shape(), tb.shape())));
        }
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(arow, &bd[j * k..(j + 1) * k]);
            }
        }
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b), "matmul_t")
    }

    /// `Σ_i w[i] · x[i, :]` for `w [m]`, `x [m, n]`; rows summed in index order.
    pub fn vecmat(&mut self, w: Var, x: Var) -> Result<Var> {
        let (tw, tx) = (self.value(w), self.value(x));
        let m = check1("vecmat", tw)?;
        let (mx, n) = check2("vecmat", tx)?;
        if m != mx {
            return Err(Error::shape("vecmat", format!("{:?} x {:?}", tw.shape(), tx.shape())));
        }
        let mut out = vec![0.0; n];
        for (i, &wi) in tw.data().iter().enumerate() {
            for (o, &xv) in out.iter_mut().zip(tx.row(i)) {
                *o += wi * xv;
            }
        }
        self.push(Tensor::vector(out), Op::VecMat(w, x), "vecmat")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::shape("mean", "empty input"));
        }
        let s = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), "mean")
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("dot", ta, tb)?;
        let s = dot(ta.data(), tb.data());
        self.push(Tensor::scalar(s), Op::Dot(a, b), "dot")
    }

    // ---------------------------------------------------------------- structural

    /// Concatenates vectors (or flattens tensors) end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), "concat")
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.len() {
            return Err(Error::shape("slice", format!("{start}+{len} > {}", t.len())));
        }
        let out = Tensor::vector(t.data()[start..start + len].to_vec());
        self.push(out, Op::Slice { x, start }, "slice")
    }

    pub fn row(&mut self, x: Var, row: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, _) = check2("row", t)?;
        if row >= r {
            return Err(Error::shape("row", format!("row {row} of {r}")));
        }
        let out = Tensor::vector(t.row(row).to_vec());
        self.push(out, Op::Row { x, row }, "row")
    }

    /// Stacks equal-length vectors into a `[rows.len(), n]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::shape("stack_rows", "no rows"));
        }
        let n = self.value(rows[0]).len();
        let mut data = Vec::with_capacity(n * rows.len());
        for &r in rows {
            let t = self.value(r);
            if t.len() != n {
                return Err(Error::shape("stack_rows", format!("row of {} vs {n}", t.len())));
            }
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows.len(), n], data)?;
        self.push(out, Op::StackRows(rows.to_vec()), "stack_rows")
    }

    /// `[a | b]` for `a [m, p]`, `b [m, q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, p) = check2("concat_cols", ta)?;
        let (mb, q) = check2("concat_cols", tb)?;
        if m != mb {
            return Err(Error::shape("concat_cols", format!("{:?} | {:?}", ta.shape(), tb.shape())));
        }
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        let out = Tensor::new(vec![m, p + q], data)?;
        self.push(out, Op::ConcatCols(a, b), "concat_cols")
    }

    /// Repeats a vector `[n]` as every row of an `[rows, n]` matrix.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        let t = self.value(v);
        let n = check1("broadcast_rows", t)?;
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, n], data)?;
        self.push(out, Op::BroadcastRows(v), "broadcast_rows")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push(out, Op::Reshape(x), "reshape")
    }

    /// Row lookup `table[ids[i], :]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, e) = check2("gather", t)?;
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(Error::invalid(format!("index {id} out of range for table of {v} rows")));
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), e], data)?;
        self.push(out, Op::Gather { table, ids: ids.to_vec() }, "gather")
    }

    // ---------------------------------------------------------------- nn primitives

    /// Softmax over the entries where `valid` is true; the rest are exactly 0.
    ///
    /// Stabilised by subtracting the max over valid entries. Masked entries
    /// receive no gradient.
    pub fn softmax_masked(&mut self, x: Var, valid: &[bool]) -> Result<Var> {
        let t = self.value(x);
        let n = check1("softmax_masked", t)?;
        if valid.len() != n {
            return Err(Error::shape("softmax_masked", format!("mask {} vs {n}", valid.len())));
        }
        let out = Tensor::vector(softmax_masked_values(t.data(), valid)?);
        self.push(out, Op::SoftmaxMasked { x, valid: valid.to_vec() }, "softmax_masked")
    }

    /// Same-length cross-correlation of a vector with an odd-length kernel.
    pub fn conv1d_same(&mut self, signal: Var, taps: Var) -> Result<Var> {
        let (ts, tk) = (self.value(signal), self.value(taps));
        check1("conv1d_same", ts)?;
        let k = check1("conv1d_same", tk)?;
        if k % 2 == 0 {
            return Err(Error::invalid(format!("conv1d_same needs an odd kernel, got {k} taps")));
        }
        let out = Tensor::vector(conv1d_same_values(ts.data(), tk.data()));
        self.push(out, Op::Conv1dSame { signal, taps }, "conv1d_same")
    }

    /// Applies a bank `[F, K]` of odd-length kernels to one signal `[L]`,
    /// returning `[L, F]`.
    pub fn conv_bank(&mut self, signal: Var, bank: Var) -> Result<Var> {
        let (ts, tb) = (self.value(signal), self.value(bank));
        let l = check1("conv_bank", ts)?;
        let (f, k) = check2("conv_bank", tb)?;
        if k % 2 == 0 {
            return Err(Error::invalid(format!("conv_bank needs odd kernels, got {k} taps")));
        }
        let c = (k / 2) as isize;
        let s = ts.data();
        let mut out = vec![0.0; l * f];
        for fi in 0..f {
            let taps = tb.row(fi);
            for t in 0..l {
                let mut acc = 0.0;
                for (kk, &w) in taps.iter().enumerate() {
                    let idx = t as isize + kk as isize - c;
                    if idx >= 0 && (idx as usize) < l {
                        acc += w * s[idx as usize];
                    }
                }
                out[t * f + fi] = acc;
            }
        }
        let out = Tensor::new(vec![l, f], out)?;
        self.push(out, Op::ConvBank { signal, bank }, "conv_bank")
    }

    /// Multi-channel same-padded convolution: `x [T, Cin]`, `w [Cout, Cin·K]`
    /// (kernel-major within each input channel), `b [Cout]` -> `[T, Cout]`.
    pub fn conv1d_multi(&mut self, x: Var, w: Var, b: Var, kernel: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (t_len, cin) = check2("conv1d_multi", tx)?;
        let (cout, wk) = check2("conv1d_multi", tw)?;
        if kernel.is_multiple_of(2) || wk != cin * kernel || check1("conv1d_multi", tb)? != cout {
            return Err(Error::shape(
                "conv1d_multi",
                format!("x {:?}, w {:?}, b {:?}, kernel {kernel}", tx.shape(), tw.shape(), tb.shape()),
            ));
        }
        let c = (kernel / 2) as isize;
        let mut out = vec![0.0; t_len * cout];
        for t in 0..t_len {
            for o in 0..cout {
                let wrow = tw.row(o);
                let mut acc = tb.data()[o];
                for k in 0..kernel {
                    let idx = t as isize + k as isize - c;
                    if idx < 0 || idx as usize >= t_len {
                        continue;
                    }
                    let xrow = tx.row(idx as usize);
                    for (ci, &xv) in xrow.iter().enumerate() {
                        acc += wrow[ci * kernel + k] * xv;
                    }
                }
                out[t * cout + o] = acc;
            }
        }
        let out = Tensor::new(vec![t_len, cout], out)?;
        self.push(out, Op::Conv1dMulti { x, w, b }, "conv1d_multi")
    }

    /// L2-normalises a vector, or each row of a matrix, with a norm floor.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::L2NormalizeRows { x, eps }, "l2_normalize")
    }

    /// Row-wise dot product of two equally shaped matrices.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("row_dot", ta, tb)?;
        let (r, _) = check2("row_dot", ta)?;
        let out = (0..r).map(|i| dot(ta.row(i), tb.row(i))).collect();
        self.push(Tensor::vector(out), Op::RowDot(a, b), "row_dot")
    }

    /// Stabilised `log Σ_j exp(x[i, j])` per row.
    pub fn row_logsumexp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, _) = check2("row_logsumexp", t)?;
        let out = (0..r).map(|i| logsumexp(t.row(i))).collect();
        self.push(Tensor::vector(out), Op::RowLogSumExp(x), "row_logsumexp")
    }

    /// `out[i] = x[i, cols[i]]`.
    pub fn pick_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = check2("pick_cols", t)?;
        if cols.len() != r || cols.iter().any(|&j| j >= c) {
            return Err(Error::shape("pick_cols", format!("{} indices into {:?}", cols.len(), t.shape())));
        }
        let out = cols.iter().enumerate().map(|(i, &j)| t.at2(i, j)).collect();
        self.push(Tensor::vector(out), Op::PickCols { x, cols: cols.to_vec() }, "pick_cols")
    }

    /// Scatters `x [r]` into an `[r, ncols]` zero matrix at `(i, cols[i])`.
    pub fn place_cols(&mut self, x: Var, cols: &[usize], ncols: usize) -> Result<Var> {
        let t = self.value(x);
        let r = check1("place_cols", t)?;
        if cols.len() != r || cols.iter().any(|&j| j >= ncols) {
            return Err(Error::shape("place_cols", format!("{} indices, {ncols} cols", cols.len())));
        }
        let mut data = vec![0.0; r * ncols];
        for (i, &j) in cols.iter().enumerate() {
            data[i * ncols + j] = t.data()[i];
        }
        let out = Tensor::new(vec![r, ncols], data)?;
        self.push(out, Op::PlaceCols { x, cols: cols.to_vec() }, "place_cols")
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let t = self.value(loss);
        if t.len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", t.shape())));
        }
        if !t.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        self.backward_with_seed(loss, &[1.0])
    }

    /// Reverse sweep seeded with an explicit output cotangent (a
    /// vector-Jacobian product).
    pub fn backward_with_seed(&self, output: Var, seed: &[f64]) -> Result<Gradients> {
        if seed.len() != self.value(output).len() {
            return Err(Error::shape(
                "backward",
                format!("seed of {} for output {:?}", seed.len(), self.value(output).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.to_vec());
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Unary(kind, x) => {
                let xd = val(*x).data();
                let ga = acc(grads, *x, xd.len());
                for i in 0..xd.len() {
                    ga[i] += g[i] * kind.derivative(xd[i], y[i]);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if rg(*a) {
                    acc(grads, *a, g.len()).iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if rg(*b) {
                    acc(grads, *b, g.len())
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &v)| *d += sign * v);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if rg(*a) {
                    let ga = acc(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                }
                if rg(*b) {
                    let gb = acc(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                }
            }
            Op::AddRow(m, v) => {
                let c = val(*v).len();
                if rg(*m) {
                    acc(grads, *m, g.len()).iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
                if rg(*v) {
                    let gv = acc(grads, *v, c);
                    for row in g.chunks(c) {
                        gv.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
                    }
                }
            }
            Op::Scale(x, f) => {
                acc(grads, *x, g.len()).iter_mut().zip(g).for_each(|(d, &v)| *d += f * v);
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                acc(grads, *x, g.len()).iter_mut().zip(g).for_each(|(d, &v)| *d += v);
            }
            Op::LogClamped { x, threshold } => {
                let xd = val(*x).data();
                let ga = acc(grads, *x, xd.len());
                for i in 0..xd.len() {
                    if xd[i] > *threshold {
                        ga[i] += g[i] / xd[i];
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = if tb.ndim() == 1 { 1 } else { tb.shape()[1] };
                let (ad, bd) = (ta.data(), tb.data());
                if n == 1 && k > 0 {
                    if rg(*a) {
                        let ga = acc(grads, *a, m * k);
                        for (garow, &gv) in ga.chunks_exact_mut(k).zip(g) {
                            for (d, &bv) in garow.iter_mut().zip(bd) {
                                *d += gv * bv;
                            }
                        }
                    }
                    if rg(*b) {
                        let gb = acc(grads, *b, k);
                        for (arow, &gv) in ad.chunks_exact(k).zip(g) {
                            for (d, &av) in gb.iter_mut().zip(arow) {
                                *d += av * gv;
                            }
                        }
                    }
                    return;
                }
                if rg(*a) {
                    // dA[i, p] = Σ_j g[i, j] · B[p, j]
                    let ga = acc(grads, *a, m * k);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] += dot(grow, &bd[p * n..(p + 1) * n]);
                        }
                    }
                }
                if rg(*b) {
                    // dB[p, j] = Σ_i A[i, p] · g[i, j]
                    let gb = acc(grads, *b, k * n);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (d, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                }
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[0];
                let (ad, bd) = (ta.data(), tb.data());
                if rg(*a) {
                    // dA[i, :] = Σ_j g[i, j] · B[j, :]
                    let ga = acc(grads, *a, m * k);
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for (d, &bv) in ga[i * k..(i + 1) * k].iter_mut().zip(&bd[j * k..(j + 1) * k]) {
                                *d += gv * bv;
                            }
                        }
                    }
                }
                if rg(*b) {
                    // dB[j, :] = Σ_i g[i, j] · A[i, :]
                    let gb = acc(grads, *b, n * k);
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for (d, &av) in gb[j * k..(j + 1) * k].iter_mut().zip(&ad[i * k..(i + 1) * k]) {
                                *d += gv * av;
                            }
                        }
                    }
                }
            }
            Op::VecMat(w, x) => {
                let (tw, tx) = (val(*w), val(*x));
                let m = tw.len();
                let n = g.len();
                if rg(*w) {
                    let gw = acc(grads, *w, m);
                    for (i, d) in gw.iter_mut().enumerate() {
                        *d += dot(g, tx.row(i));
                    }
                }
                if rg(*x) {
                    let gx = acc(grads, *x, m * n);
                    for (i, &wi) in tw.data().iter().enumerate() {
                        for (d, &gv) in gx[i * n..(i + 1) * n].iter_mut().zip(g) {
                            *d += wi * gv;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let n = val(*x).len();
                acc(grads, *x, n).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                let s = g[0] / n as f64;
                acc(grads, *x, n).iter_mut().for_each(|d| *d += s);
            }
            Op::Dot(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if rg(*a) {
                    let ga = acc(grads, *a, ad.len());
                    for i in 0..ad.len() {
                        ga[i] += g[0] * bd[i];
                    }
                }
                if rg(*b) {
                    let gb = acc(grads, *b, bd.len());
                    for i in 0..bd.len() {
                        gb[i] += g[0] * ad[i];
                    }
                }
            }
            Op::Concat(parts) | Op::StackRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    if rg(p) {
                        acc(grads, p, n)
                            .iter_mut()
                            .zip(&g[off..off + n])
                            .for_each(|(d, &v)| *d += v);
                    }
                    off += n;
                }
            }
            Op::Slice { x, start } => {
                let n = val(*x).len();
                acc(grads, *x, n)[*start..*start + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, &v)| *d += v);
            }
            Op::Row { x, row } => {
                let n = val(*x).len();
                let c = g.len();
                acc(grads, *x, n)[row * c..(row + 1) * c]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, &v)| *d += v);
            }
            Op::ConcatCols(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, p) = (ta.shape()[0], ta.shape()[1]);
                let q = tb.shape()[1];
                if rg(*a) {
                    let ga = acc(grads, *a, m * p);
                    for i in 0..m {
                        for j in 0..p {
                            ga[i * p + j] += g[i * (p + q) + j];
                        }
                    }
                }
                if rg(*b) {
                    let gb = acc(grads, *b, m * q);
                    for i in 0..m {
                        for j in 0..q {
                            gb[i * q + j] += g[i * (p + q) + p + j];
                        }
                    }
                }
            }
            Op::BroadcastRows(v) => {
                let n = val(*v).len();
                let gv = acc(grads, *v, n);
                for row in g.chunks(n) {
                    gv.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
                }
            }
            Op::SoftmaxMasked { x, valid } => {
                let s: f64 = (0..y.len()).filter(|&i| valid[i]).map(|i| y[i] * g[i]).sum();
                let gx = acc(grads, *x, y.len());
                for i in 0..y.len() {
                    if valid[i] {
                        gx[i] += y[i] * (g[i] - s);
                    }
                }
            }
            Op::Conv1dSame { signal, taps } => {
                let (sd, kd) = (val(*signal).data(), val(*taps).data());
                let l = sd.len();
                let c = (kd.len() / 2) as isize;
                if rg(*signal) {
                    let gs = acc(grads, *signal, l);
                    for t in 0..l {
                        for (k, &w) in kd.iter().enumerate() {
                            let idx = t as isize + k as isize - c;
                            if idx >= 0 && (idx as usize) < l {
                                gs[idx as usize] += g[t] * w;
                            }
                        }
                    }
                }
                if rg(*taps) {
                    let gk = acc(grads, *taps, kd.len());
                    for t in 0..l {
                        for (k, d) in gk.iter_mut().enumerate() {
                            let idx = t as isize + k as isize - c;
                            if idx >= 0 && (idx as usize) < l {
                                *d += g[t] * sd[idx as usize];
                            }
                        }
                    }
                }
            }
            Op::ConvBank { signal, bank } => {
                let (ts, tb) = (val(*signal), val(*bank));
                let sd = ts.data();
                let l = sd.len();
                let (f, k) = (tb.shape()[0], tb.shape()[1]);
                let c = (k / 2) as isize;
                if rg(*signal) {
                    let gs = acc(grads, *signal, l);
                    for fi in 0..f {
                        let taps = tb.row(fi);
                        for t in 0..l {
                            let gv = g[t * f + fi];
                            for (kk, &w) in taps.iter().enumerate() {
                                let idx = t as isize + kk as isize - c;
                                if idx >= 0 && (idx as usize) < l {
                                    gs[idx as usize] += gv * w;
                                }
                            }
                        }
                    }
                }
                if rg(*bank) {
                    let gb = acc(grads, *bank, f * k);
                    for fi in 0..f {
                        for t in 0..l {
                            let gv = g[t * f + fi];
                            for kk in 0..k {
                                let idx = t as isize + kk as isize - c;
                                if idx >= 0 && (idx as usize) < l {
                                    gb[fi * k + kk] += gv * sd[idx as usize];
                                }
                            }
                        }
                    }
                }
            }
            Op::Conv1dMulti { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let (t_len, cin) = (tx.shape()[0], tx.shape()[1]);
                let cout = tw.shape()[0];
                let kernel = tw.shape()[1] / cin;
                let c = (kernel / 2) as isize;
                if rg(*b) {
                    let gb = acc(grads, *b, cout);
                    for t in 0..t_len {
                        for o in 0..cout {
                            gb[o] += g[t * cout + o];
                        }
                    }
                }
                if rg(*w) {
                    let gw = acc(grads, *w, cout * cin * kernel);
                    for t in 0..t_len {
                        for o in 0..cout {
                            let gv = g[t * cout + o];
                            for k in 0..kernel {
                                let idx = t as isize + k as isize - c;
                                if idx < 0 || idx as usize >= t_len {
                                    continue;
                                }
                                let xrow = tx.row(idx as usize);
                                let base = o * cin * kernel;
                                for (ci, &xv) in xrow.iter().enumerate() {
                                    gw[base + ci * kernel + k] += gv * xv;
                                }
                            }
                        }
                    }
                }
                if rg(*x) {
                    let gx = acc(grads, *x, t_len * cin);
                    for t in 0..t_len {
                        for o in 0..cout {
                            let gv = g[t * cout + o];
                            let wrow = tw.row(o);
                            for k in 0..kernel {
                                let idx = t as isize + k as isize - c;
                                if idx < 0 || idx as usize >= t_len {
                                    continue;
                                }
                                let base = idx as usize * cin;
                                for ci in 0..cin {
                                    gx[base + ci] += gv * wrow[ci * kernel + k];
                                }
                            }
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let tt = val(*table);
                let e = tt.shape()[1];
                let gt = acc(grads, *table, tt.len());
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..e {
                        gt[id * e + j] += g[i * e + j];
                    }
                }
            }
            Op::L2NormalizeRows { x, eps } => {
                let tx = val(*x);
                let cols = tx.cols().max(1);
                let gx = acc(grads, *x, tx.len());
                for (r, xrow) in tx.data().chunks(cols).enumerate() {
                    let norm = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let yrow = &y[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let dst = &mut gx[r * cols..(r + 1) * cols];
                    if norm > *eps {
                        let yg = dot(yrow, grow);
                        for j in 0..cols {
                            dst[j] += (grow[j] - yrow[j] * yg) / norm;
                        }
                    } else {
                        for j in 0..cols {
                            dst[j] += grow[j] / eps;
                        }
                    }
                }
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let c = ta.cols();
                if rg(*a) {
                    let ga = acc(grads, *a, ta.len());
                    for (i, &gv) in g.iter().enumerate() {
                        for j in 0..c {
                            ga[i * c + j] += gv * tb.data()[i * c + j];
                        }
                    }
                }
                if rg(*b) {
                    let gb = acc(grads, *b, tb.len());
                    for (i, &gv) in g.iter().enumerate() {
                        for j in 0..c {
                            gb[i * c + j] += gv * ta.data()[i * c + j];
                        }
                    }
                }
            }
            Op::RowLogSumExp(x) => {
                let tx = val(*x);
                let c = tx.cols();
                let gx = acc(grads, *x, tx.len());
                for (i, &gv) in g.iter().enumerate() {
                    for j in 0..c {
                        gx[i * c + j] += gv * (tx.data()[i * c + j] - y[i]).exp();
                    }
                }
            }
            Op::PickCols { x, cols } => {
                let tx = val(*x);
                let c = tx.cols();
                let gx = acc(grads, *x, tx.len());
                for (i, &j) in cols.iter().enumerate() {
                    gx[i * c + j] += g[i];
                }
            }
            Op::PlaceCols { x, cols } => {
                let ncols = node.value.cols();
                let gx = acc(grads, *x, cols.len());
                for (i, &j) in cols.iter().enumerate() {
                    gx[i] += g[i * ncols + j];
                }
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Plain-value masked softmax shared by the tape op and non-differentiable
/// callers.
pub fn softmax_masked_values(x: &[f64], valid: &[bool]) -> Result<Vec<f64>> {
    let m = x
        .iter()
        .zip(valid)
        .filter(|(_, &ok)| ok)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(Error::invalid("softmax over an all-masked input"));
    }
    let mut out: Vec<f64> = x
        .iter()
        .zip(valid)
        .map(|(&v, &ok)| if ok { (v - m).exp() } else { 0.0 })
        .collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    Ok(out)
}

/// Plain-value cross-correlation with the tape's padding convention.
pub fn conv1d_same_values(signal: &[f64], taps: &[f64]) -> Vec<f64> {
    let l = signal.len();
    let c = (taps.len() / 2) as isize;
    (0..l)
        .map(|t| {
            taps.iter()
                .enumerate()
                .filter_map(|(k, &w)| {
                    let idx = t as isize + k as isize - c;
                    (idx >= 0 && (idx as usize) < l).then(|| w * signal[idx as usize])
                })
                .sum()
        })
        .collect()
}
