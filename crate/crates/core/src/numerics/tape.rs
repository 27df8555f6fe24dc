//! Reverse-mode gradient tape.
//!
//! Every forward operation appends a node holding its value and the recipe
//! needed to push gradients back to its inputs. `backward` walks the nodes in
//! reverse creation order, so each recorded operation is visited exactly once
//! per call. Leaf gradients persist across calls and accumulate; gradients of
//! intermediate nodes are scratch space rebuilt on every call.

use std::collections::HashMap;

use crate::error::{contract_err, dim_err, Error, Result};

use super::kernels::{self, axis_split, gemm};
use super::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation with a hand-written vector-Jacobian product.
///
/// `grads[i]` is `Some` exactly when input `i` needs a gradient; the buffer
/// is zero-initialised and the implementation adds its contribution.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        out_grad: &[f64],
        grads: &mut [Option<Vec<f64>>],
    );
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Softmax(Var, usize),
    LogSigmoid(Var, f64),
    ReversedCumsum(Var, usize),
    Exp(Var),
    Relu(Var),
    Gelu(Var),
    XLogX(Var),
    SumSquares(Var),
    MeanRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        rstd: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    GatherElems(Var, Vec<usize>),
    ConcatCols(Var, Var),
    MixRows {
        parts: Vec<(Var, Var, Vec<usize>)>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    needs: Vec<bool>,
    ops: Vec<Op>,
    params: HashMap<usize, Var>,
}

fn param_key(t: &Tensor) -> usize {
    t as *const Tensor as usize
}

fn add_into(dst: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    dst.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs: bool, what: &str) -> Result<Var> {
        if !value.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(what.to_string()));
        }
        self.values.push(value);
        self.grads.push(None);
        self.needs.push(needs);
        self.ops.push(op);
        Ok(Var(self.values.len() - 1))
    }

    /// Leaf node; tracked when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        let needs = t.requires_grad;
        let mut t = t;
        t.grad = None;
        self.push(t, Op::Leaf, needs, "leaf")
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        let mut t = t;
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Registers a parameter by identity. Binding the same tensor twice
    /// returns the same node, so a shared projection gathers gradient from
    /// all of its consumers. Gradients are written back with
    /// [`accumulate_into`](Self::accumulate_into) on the same tensor, which
    /// must not have moved in between.
    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        let key = param_key(t);
        if let Some(&v) = self.params.get(&key) {
            return Ok(v);
        }
        let v = self.leaf(t.clone())?;
        self.params.insert(key, v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    /// Adds the tape gradient of the parameter bound from `t` into `t.grad`.
    /// Returns whether `t` was bound and received a gradient.
    pub fn accumulate_into(&self, t: &mut Tensor) -> bool {
        let Some(&v) = self.params.get(&param_key(t)) else {
            return false;
        };
        let Some(g) = self.grads[v.0].as_ref() else {
            return false;
        };
        match t.grad.as_mut() {
            Some(acc) => kernels::axpy(1.0, g, acc),
            None => t.grad = Some(g.clone()),
        }
        true
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn matrix_dims(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        let t = &self.values[v.0];
        if !t.is_matrix() {
            return Err(dim_err!("{op} expects a matrix, got {:?}", t.shape()));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(dim_err!("matmul inner extents differ: {m}x{k} · {k2}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.values[a.0].data(),
            false,
            self.values[b.0].data(),
            false,
            &mut out,
            false,
        );
        let needs = self.needs[a.0] || self.needs[b.0];
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), needs, "matmul")
    }

    /// `a · bᵀ` with `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(dim_err!("matmul_nt inner extents differ: {m}x{k} · ({n}x{k2})ᵀ"));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.values[a.0].data(),
            false,
            self.values[b.0].data(),
            true,
            &mut out,
            false,
        );
        let needs = self.needs[a.0] || self.needs[b.0];
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), needs, "matmul_nt")
    }

    /// Elementwise sum. `b` may also be a single row broadcast over the
    /// leading axis of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let out: Vec<f64> = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect()
        } else if tb.numel() == ta.cols() {
            let c = ta.cols();
            ta.data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + tb.data()[i % c])
                .collect()
        } else {
            return Err(dim_err!("add: {:?} + {:?}", ta.shape(), tb.shape()));
        };
        let shape = ta.shape().to_vec();
        let needs = self.needs[a.0] || self.needs[b.0];
        self.push(Tensor::new(shape, out)?, Op::Add(a, b), needs, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return Err(dim_err!("sub: {:?} - {:?}", ta.shape(), tb.shape()));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs[a.0] || self.needs[b.0];
        self.push(Tensor::new(shape, out)?, Op::Sub(a, b), needs, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return Err(dim_err!("mul: {:?} ⊙ {:?}", ta.shape(), tb.shape()));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs[a.0] || self.needs[b.0];
        self.push(Tensor::new(shape, out)?, Op::Mul(a, b), needs, "mul")
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64, what: &str) -> Result<Var> {
        let t = &self.values[a.0];
        let out = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        let needs = self.needs[a.0];
        self.push(Tensor::new(shape, out)?, op, needs, what)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, c), |x| c * x, "scale")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), f64::exp, "exp")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| x.max(0.0), "relu")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(
            a,
            Op::Gelu(a),
            |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            "gelu",
        )
    }

    /// `x log x` elementwise, `0 log 0 = 0`.
    pub fn xlogx(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::XLogX(a), kernels::xlogx, "xlogx")
    }

    /// `log σ(z)`.
    pub fn log_sigmoid(&mut self, z: Var) -> Result<Var> {
        self.unary(z, Op::LogSigmoid(z, 1.0), kernels::log_sigmoid, "log_sigmoid")
    }

    /// `(log σ(z), log σ(-z))`.
    pub fn log_sigmoid_pair(&mut self, z: Var) -> Result<(Var, Var)> {
        let pos = self.log_sigmoid(z)?;
        let neg = self.unary(
            z,
            Op::LogSigmoid(z, -1.0),
            |x| kernels::log_sigmoid(-x),
            "log_sigmoid",
        )?;
        Ok((pos, neg))
    }

    fn scalar_out(&mut self, a: Var, op: Op, v: f64, what: &str) -> Result<Var> {
        let needs = self.needs[a.0];
        self.push(Tensor::scalar(v), op, needs, what)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.values[a.0].data().iter().sum();
        self.scalar_out(a, Op::Sum(a), s, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.values[a.0];
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.scalar_out(a, Op::Mean(a), s, "mean")
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let s = self.values[a.0].sum_squares();
        self.scalar_out(a, Op::SumSquares(a), s, "sum_squares")
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = &self.values[a.0];
        let mut out = vec![0.0; t.numel()];
        kernels::softmax_into(t.data(), t.shape(), axis, &mut out)?;
        let shape = t.shape().to_vec();
        let needs = self.needs[a.0];
        self.push(Tensor::new(shape, out)?, Op::Softmax(a, axis), needs, "softmax")
    }

    pub fn reversed_cumsum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = &self.values[a.0];
        let mut out = vec![0.0; t.numel()];
        kernels::reversed_cumsum_into(t.data(), t.shape(), axis, &mut out)?;
        let shape = t.shape().to_vec();
        let needs = self.needs[a.0];
        self.push(
            Tensor::new(shape, out)?,
            Op::ReversedCumsum(a, axis),
            needs,
            "reversed_cumsum",
        )
    }

    /// Column means of a matrix, as a `1×C` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "mean_rows")?;
        let t = &self.values[a.0];
        let mut out = vec![0.0; c];
        for row in t.data().chunks_exact(c) {
            kernels::axpy(1.0, row, &mut out);
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        let needs = self.needs[a.0];
        self.push(Tensor::new(vec![1, c], out)?, Op::MeanRows(a), needs, "mean_rows")
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "layer_norm")?;
        if self.values[gain.0].numel() != c || self.values[bias.0].numel() != c {
            return Err(dim_err!("layer_norm gain/bias must have {c} entries"));
        }
        let xt = &self.values[x.0];
        let g = self.values[gain.0].data();
        let b = self.values[bias.0].data();
        let mut out = vec![0.0; r * c];
        let mut normed = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = &xt.data()[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let n = (row[j] - mu) * rs;
                normed[i * c + j] = n;
                out[i * c + j] = n * g[j] + b[j];
            }
        }
        let needs = self.needs[x.0] || self.needs[gain.0] || self.needs[bias.0];
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normed,
            rstd,
        };
        self.push(Tensor::new(vec![r, c], out)?, op, needs, "layer_norm")
    }

    /// Rows `idx` of a matrix (also serves as embedding lookup).
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "gather_rows")?;
        if idx.is_empty() {
            return Err(dim_err!("gather_rows needs at least one index"));
        }
        let t = &self.values[a.0];
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            if i >= r {
                return Err(dim_err!("gather_rows index {i} out of range {r}"));
            }
            out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let n = idx.len();
        let needs = self.needs[a.0];
        self.push(Tensor::new(vec![n, c], out)?, Op::GatherRows(a, idx), needs, "gather_rows")
    }

    /// Flat-index gather into an `n×1` column.
    pub fn gather_elems(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        if idx.is_empty() {
            return Err(dim_err!("gather_elems needs at least one index"));
        }
        let t = &self.values[a.0];
        let mut out = Vec::with_capacity(idx.len());
        for &i in &idx {
            if i >= t.numel() {
                return Err(dim_err!("gather_elems index {i} out of range {}", t.numel()));
            }
            out.push(t.data()[i]);
        }
        let n = idx.len();
        let needs = self.needs[a.0];
        self.push(Tensor::new(vec![n, 1], out)?, Op::GatherElems(a, idx), needs, "gather_elems")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.matrix_dims(a, "concat_cols")?;
        let (rb, cb) = self.matrix_dims(b, "concat_cols")?;
        if ra != rb {
            return Err(dim_err!("concat_cols row counts differ: {ra} vs {rb}"));
        }
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(ta.row(i));
            out.extend_from_slice(tb.row(i));
        }
        let needs = self.needs[a.0] || self.needs[b.0];
        self.push(
            Tensor::new(vec![ra, ca + cb], out)?,
            Op::ConcatCols(a, b),
            needs,
            "concat_cols",
        )
    }

    /// Weighted scatter: `y[rows[r]] += w[r] · part[r]` for every part, into
    /// an `n_rows × cols` zero matrix.
    pub fn mix_rows(
        &mut self,
        n_rows: usize,
        cols: usize,
        parts: Vec<(Var, Var, Vec<usize>)>,
    ) -> Result<Var> {
        let mut out = vec![0.0; n_rows * cols];
        let mut needs = false;
        for (part, weight, rows) in &parts {
            let (pt, wt) = (&self.values[part.0], &self.values[weight.0]);
            if pt.rows() != rows.len() || pt.cols() != cols || wt.numel() != rows.len() {
                return Err(dim_err!(
                    "mix_rows part {:?} / weight {:?} / {} rows",
                    pt.shape(),
                    wt.shape(),
                    rows.len()
                ));
            }
            for (r, &dst) in rows.iter().enumerate() {
                if dst >= n_rows {
                    return Err(dim_err!("mix_rows target row {dst} out of range {n_rows}"));
                }
                kernels::axpy(wt.data()[r], pt.row(r), &mut out[dst * cols..(dst + 1) * cols]);
            }
            needs |= self.needs[part.0] || self.needs[weight.0];
        }
        self.push(
            Tensor::new(vec![n_rows, cols], out)?,
            Op::MixRows { parts },
            needs,
            "mix_rows",
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, v) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != r {
            return Err(dim_err!("cross_entropy: {r} rows but {} targets", targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(contract_err!("target {bad} outside vocabulary of {v}"));
        }
        let t = &self.values[logits.0];
        let mut probs = vec![0.0; r * v];
        kernels::softmax_into(t.data(), t.shape(), 1, &mut probs)?;
        let mut nll = 0.0;
        for (i, &tg) in targets.iter().enumerate() {
            let row = t.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            nll += lse - row[tg];
        }
        nll /= r as f64;
        let needs = self.needs[logits.0];
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push(Tensor::scalar(nll), op, needs, "cross_entropy")
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: Vec<Var>, value: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let needs = inputs.iter().any(|v| self.needs[v.0]);
        let name = op.name();
        self.push(value, Op::Custom { inputs, op }, needs, name)
    }

    /// Propagates `d loss / d node` to every tracked leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            ));
        }
        for (g, op) in self.grads.iter_mut().zip(&self.ops) {
            if !matches!(op, Op::Leaf) {
                *g = None;
            }
        }
        if !self.needs[loss.0] {
            return Ok(());
        }
        match self.grads[loss.0].as_mut() {
            Some(g) => g[0] += 1.0,
            None => self.grads[loss.0] = Some(vec![1.0]),
        }
        for i in (0..=loss.0).rev() {
            if !self.needs[i] || matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        let values = &self.values;
        let grads = &mut self.grads;
        let needs = &self.needs;
        let out = &values[i];
        let len = |v: Var| values[v.0].numel();
        match &self.ops[i] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (values[a.0].shape()[0], values[a.0].shape()[1]);
                let n = values[b.0].shape()[1];
                if needs[a.0] {
                    let da = add_into(&mut grads[a.0], m * k);
                    gemm(m, n, k, g, false, values[b.0].data(), true, da, true);
                }
                if needs[b.0] {
                    let db = add_into(&mut grads[b.0], k * n);
                    gemm(k, m, n, values[a.0].data(), true, g, false, db, true);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (values[a.0].shape()[0], values[a.0].shape()[1]);
                let n = values[b.0].shape()[0];
                if needs[a.0] {
                    let da = add_into(&mut grads[a.0], m * k);
                    gemm(m, n, k, g, false, values[b.0].data(), false, da, true);
                }
                if needs[b.0] {
                    let db = add_into(&mut grads[b.0], n * k);
                    gemm(n, m, k, g, true, values[a.0].data(), false, db, true);
                }
            }
            Op::Add(a, b) => {
                if needs[a.0] {
                    kernels::axpy(1.0, g, add_into(&mut grads[a.0], g.len()));
                }
                if needs[b.0] {
                    let nb = len(*b);
                    let db = add_into(&mut grads[b.0], nb);
                    if nb == g.len() {
                        kernels::axpy(1.0, g, db);
                    } else {
                        for row in g.chunks_exact(nb) {
                            kernels::axpy(1.0, row, db);
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs[a.0] {
                    kernels::axpy(1.0, g, add_into(&mut grads[a.0], g.len()));
                }
                if needs[b.0] {
                    kernels::axpy(-1.0, g, add_into(&mut grads[b.0], g.len()));
                }
            }
            Op::Mul(a, b) => {
                if needs[a.0] {
                    let da = add_into(&mut grads[a.0], g.len());
                    for ((d, gi), y) in da.iter_mut().zip(g).zip(values[b.0].data()) {
                        *d += gi * y;
                    }
                }
                if needs[b.0] {
                    let db = add_into(&mut grads[b.0], g.len());
                    for ((d, gi), x) in db.iter_mut().zip(g).zip(values[a.0].data()) {
                        *d += gi * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                kernels::axpy(*c, g, add_into(&mut grads[a.0], g.len()));
            }
            Op::Sum(a) => {
                let da = add_into(&mut grads[a.0], len(*a));
                da.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(a) => {
                let n = len(*a);
                let da = add_into(&mut grads[a.0], n);
                da.iter_mut().for_each(|d| *d += g[0] / n as f64);
            }
            Op::SumSquares(a) => {
                let da = add_into(&mut grads[a.0], len(*a));
                for (d, x) in da.iter_mut().zip(values[a.0].data()) {
                    *d += 2.0 * x * g[0];
                }
            }
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = axis_split(out.shape(), *axis).expect("checked forward");
                let y = out.data();
                let da = add_into(&mut grads[a.0], y.len());
                for o in 0..outer {
                    for j in 0..inner {
                        let base = o * n * inner + j;
                        let dot: f64 = (0..n).map(|t| g[base + t * inner] * y[base + t * inner]).sum();
                        for t in 0..n {
                            let idx = base + t * inner;
                            da[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                }
            }
            Op::LogSigmoid(a, sign) => {
                let da = add_into(&mut grads[a.0], g.len());
                for ((d, gi), z) in da.iter_mut().zip(g).zip(values[a.0].data()) {
                    *d += gi * sign * kernels::sigmoid(-sign * z);
                }
            }
            Op::ReversedCumsum(a, axis) => {
                let (outer, n, inner) = axis_split(out.shape(), *axis).expect("checked forward");
                let da = add_into(&mut grads[a.0], g.len());
                for o in 0..outer {
                    for j in 0..inner {
                        let base = o * n * inner + j;
                        let mut acc = 0.0;
                        for t in 0..n {
                            acc += g[base + t * inner];
                            da[base + t * inner] += acc;
                        }
                    }
                }
            }
            Op::Exp(a) => {
                let da = add_into(&mut grads[a.0], g.len());
                for ((d, gi), y) in da.iter_mut().zip(g).zip(out.data()) {
                    *d += gi * y;
                }
            }
            Op::Relu(a) => {
                let da = add_into(&mut grads[a.0], g.len());
                for ((d, gi), x) in da.iter_mut().zip(g).zip(values[a.0].data()) {
                    if *x > 0.0 {
                        *d += gi;
                    }
                }
            }
            Op::Gelu(a) => {
                let da = add_into(&mut grads[a.0], g.len());
                for ((d, gi), &x) in da.iter_mut().zip(g).zip(values[a.0].data()) {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let th = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    *d += gi * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du);
                }
            }
            Op::XLogX(a) => {
                let da = add_into(&mut grads[a.0], g.len());
                for ((d, gi), &x) in da.iter_mut().zip(g).zip(values[a.0].data()) {
                    if x > 0.0 {
                        *d += gi * (x.ln() + 1.0);
                    }
                }
            }
            Op::MeanRows(a) => {
                let r = values[a.0].rows();
                let da = add_into(&mut grads[a.0], len(*a));
                for row in da.chunks_exact_mut(g.len()) {
                    kernels::axpy(1.0 / r as f64, g, row);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let c = values[gain.0].numel();
                let gv = values[gain.0].data();
                if needs[gain.0] {
                    let dg = add_into(&mut grads[gain.0], c);
                    for (grow, nrow) in g.chunks_exact(c).zip(normed.chunks_exact(c)) {
                        for j in 0..c {
                            dg[j] += grow[j] * nrow[j];
                        }
                    }
                }
                if needs[bias.0] {
                    let db = add_into(&mut grads[bias.0], c);
                    for grow in g.chunks_exact(c) {
                        kernels::axpy(1.0, grow, db);
                    }
                }
                if needs[x.0] {
                    let dx = add_into(&mut grads[x.0], g.len());
                    let mut dn = vec![0.0; c];
                    for (i, (grow, nrow)) in g.chunks_exact(c).zip(normed.chunks_exact(c)).enumerate() {
                        let mut mean_dn = 0.0;
                        let mut mean_dn_n = 0.0;
                        for j in 0..c {
                            dn[j] = grow[j] * gv[j];
                            mean_dn += dn[j];
                            mean_dn_n += dn[j] * nrow[j];
                        }
                        mean_dn /= c as f64;
                        mean_dn_n /= c as f64;
                        let drow = &mut dx[i * c..(i + 1) * c];
                        for j in 0..c {
                            drow[j] += rstd[i] * (dn[j] - mean_dn - nrow[j] * mean_dn_n);
                        }
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let c = values[a.0].cols();
                let da = add_into(&mut grads[a.0], len(*a));
                for (r, &src) in idx.iter().enumerate() {
                    kernels::axpy(1.0, &g[r * c..(r + 1) * c], &mut da[src * c..(src + 1) * c]);
                }
            }
            Op::GatherElems(a, idx) => {
                let da = add_into(&mut grads[a.0], len(*a));
                for (gi, &src) in g.iter().zip(idx) {
                    da[src] += gi;
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = values[a.0].cols();
                let cb = values[b.0].cols();
                if needs[a.0] {
                    let da = add_into(&mut grads[a.0], len(*a));
                    for (drow, grow) in da.chunks_exact_mut(ca).zip(g.chunks_exact(ca + cb)) {
                        kernels::axpy(1.0, &grow[..ca], drow);
                    }
                }
                if needs[b.0] {
                    let db = add_into(&mut grads[b.0], len(*b));
                    for (drow, grow) in db.chunks_exact_mut(cb).zip(g.chunks_exact(ca + cb)) {
                        kernels::axpy(1.0, &grow[ca..], drow);
                    }
                }
            }
            Op::MixRows { parts } => {
                let cols = out.cols();
                for (part, weight, rows) in parts {
                    let (pt, wt) = (&values[part.0], &values[weight.0]);
                    if needs[part.0] {
                        let dp = add_into(&mut grads[part.0], pt.numel());
                        for (r, &dst) in rows.iter().enumerate() {
                            kernels::axpy(
                                wt.data()[r],
                                &g[dst * cols..(dst + 1) * cols],
                                &mut dp[r * cols..(r + 1) * cols],
                            );
                        }
                    }
                    if needs[weight.0] {
                        let dw = add_into(&mut grads[weight.0], wt.numel());
                        for (r, &dst) in rows.iter().enumerate() {
                            dw[r] += kernels::dot(&g[dst * cols..(dst + 1) * cols], pt.row(r));
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = values[logits.0].cols();
                let scale = g[0] / targets.len() as f64;
                let dl = add_into(&mut grads[logits.0], probs.len());
                kernels::axpy(scale, probs, dl);
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * v + t] -= scale;
                }
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| &values[v.0]).collect();
                let mut local: Vec<Option<Vec<f64>>> = inputs
                    .iter()
                    .map(|v| needs[v.0].then(|| vec![0.0; values[v.0].numel()]))
                    .collect();
                op.backward(&ins, out, g, &mut local);
                for (v, d) in inputs.iter().zip(local) {
                    if let Some(d) = d {
                        let dst = add_into(&mut grads[v.0], d.len());
                        kernels::axpy(1.0, &d, dst);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tracked(t: Tensor) -> Tensor {
        let mut t = t;
        t.requires_grad = true;
        t
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(tracked(Tensor::from_rows(&[&[1.0, -2.0], &[3.0, 0.5]]))).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn half_square_gives_identity() {
        let data = vec![0.3, -1.7, 2.5];
        let mut tape = Tape::new();
        let x = tape.leaf(tracked(Tensor::vector(data.clone()).unwrap())).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let half = tape.scale(s, 0.5).unwrap();
        tape.backward(half).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &data[..]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(tracked(Tensor::vector(vec![1.0, 2.0]).unwrap())).unwrap();
        let y = tape.scale(x, 3.0).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(tracked(Tensor::vector(vec![1.0, 2.0]).unwrap())).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_param_binds_once() {
        let w = tracked(Tensor::from_rows(&[&[2.0]]));
        let mut tape = Tape::new();
        let a = tape.param(&w).unwrap();
        let b = tape.param(&w).unwrap();
        assert_eq!(a, b);
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[4.0]);
    }

    #[test]
    fn accumulate_into_bound_tensor() {
        let mut w = tracked(Tensor::from_rows(&[&[2.0, 1.0]]));
        let mut tape = Tape::new();
        let v = tape.param(&w).unwrap();
        let s = tape.sum_squares(v).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.accumulate_into(&mut w));
        assert!(tape.accumulate_into(&mut w));
        assert_eq!(w.grad.as_deref().unwrap(), &[8.0, 4.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![800.0]).unwrap()).unwrap();
        assert!(matches!(tape.exp(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn untracked_branches_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        let x = tape.leaf(tracked(Tensor::vector(vec![3.0, 4.0]).unwrap())).unwrap();
        let p = tape.mul(c, x).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0]);
    }
}
