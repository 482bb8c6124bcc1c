//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every op appends a node holding its forward value and enough cached
//! state to run its adjoint. [`Tape::backward`] walks the nodes in reverse
//! and may run once per tape.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::exact_sum::ExactSum;
use super::tensor::{matmul_a_bt, matmul_at_b, matmul_raw};
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
    Max,
    Min,
    /// Population standard deviation.
    Std,
}

impl Reduction {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sum" => Some(Self::Sum),
            "mean" => Some(Self::Mean),
            "max" => Some(Self::Max),
            "min" => Some(Self::Min),
            "std" => Some(Self::Std),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows, one output row.
    Rows,
    /// Reduce over columns, one output column.
    Cols,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    ScaleRows(Var, Vec<f64>),
    Scale(Var, f64),
    Shift(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SegmentReduce {
        x: Var,
        segments: Vec<usize>,
        kind: Reduction,
        counts: Vec<usize>,
        // Max/Min: source row per output entry (usize::MAX for empty segments).
        argrow: Vec<usize>,
        // Std: per-output mean.
        means: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Log(Var),
    Exp(Var),
    Recip(Var),
    RowNorm(Var),
    Dropout(Var, Vec<f64>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    MaskedLogSumExp {
        x: Var,
        probs: Vec<f64>,
    },
    SumAll(Var),
    MeanAll(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for one backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: BTreeMap<String, Var>,
    buffer_updates: BTreeMap<String, Tensor>,
    consumed: bool,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row indices of each segment, ascending.
fn segment_members(segments: &[usize], num_segments: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); num_segments];
    for (r, &s) in segments.iter().enumerate() {
        members[s].push(r);
    }
    members
}

impl Tape {
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

    pub fn item(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    /// Fingerprint of every piecewise choice on the tape: ReLU input signs
    /// and the rows selected by max/min reductions. Two evaluations with the
    /// same fingerprint lie on the same smooth piece of the function.
    pub fn branch_fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (k, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(x) => {
                    k.hash(&mut h);
                    for v in self.value(*x).data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::SegmentReduce { argrow, .. } if !argrow.is_empty() => {
                    k.hash(&mut h);
                    argrow.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradients (read them from [`Gradients::get`]).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a named parameter. Repeated calls return the same
    /// node so gradients from every use accumulate into one slot.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.push(value, Op::Leaf, true);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Running-stat buffer as seen by this tape (pending updates first).
    pub fn buffer(&self, store: &ParamStore, name: &str) -> Result<Tensor> {
        match self.buffer_updates.get(name) {
            Some(t) => Ok(t.clone()),
            None => Ok(store.buffer(name)?.clone()),
        }
    }

    /// Buffer updates produced by train-mode batch norm, to be committed
    /// with [`ParamStore::set_buffer`] once the step is accepted.
    pub fn take_buffer_updates(&mut self) -> BTreeMap<String, Tensor> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (r, k, c) = (ta.rows(), ta.cols(), tb.cols());
        let out = Tensor::new(r, c, matmul_raw(ta.data(), tb.data(), r, k, c))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    /// Reinterprets the row-major data of `a` as `rows × cols`.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.len() != rows * cols {
            return Err(Error::Shape {
                op: "reshape",
                lhs: ta.shape(),
                rhs: vec![rows, cols],
            });
        }
        let out = Tensor::new(rows, cols, ta.data().to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `x (r×c) + row (1×c)` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tr.rows() != 1 || tr.cols() != tx.cols() {
            return Err(shape_err("add_row", tx, tr));
        }
        let c = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tr.data()[i % c])
            .collect();
        let out = Tensor::new(tx.rows(), c, data)?;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    /// `x (r×c) * g (r×1)` broadcast over columns.
    pub fn mul_col(&mut self, x: Var, g: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(g));
        if tg.cols() != 1 || tg.rows() != tx.rows() {
            return Err(shape_err("mul_col", tx, tg));
        }
        let c = tx.cols().max(1);
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * tg.data()[i / c])
            .collect();
        let out = Tensor::new(tx.rows(), tx.cols(), data)?;
        let rg = self.rg(x) || self.rg(g);
        Ok(self.push(out, Op::MulCol(x, g), rg))
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let tx = self.value(x);
        if factors.len() != tx.rows() {
            return Err(Error::Shape {
                op: "scale_rows",
                lhs: tx.shape(),
                rhs: vec![factors.len()],
            });
        }
        let c = tx.cols().max(1);
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * factors[i / c])
            .collect();
        let out = Tensor::new(tx.rows(), tx.cols(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::ScaleRows(x, factors), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * s).collect();
        let out = Tensor::new(tx.rows(), tx.cols(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v + s).collect();
        let out = Tensor::new(tx.rows(), tx.cols(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Shift(x), rg)
    }

    /// Concatenates along columns; all inputs need the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for p in parts {
            let t = self.value(*p);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), t));
            }
            cols += t.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let t = self.value(*p);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + t.cols()].copy_from_slice(t.row(r));
            }
            offset += t.cols();
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Concatenates along rows; all inputs need the same column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let out = Tensor::new(rows, cols, data)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Output row `i` is input row `index[i]`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in &index {
            if i >= tx.rows() {
                return Err(Error::Shape {
                    op: "gather_rows",
                    lhs: tx.shape(),
                    rhs: vec![i],
                });
            }
            data.extend_from_slice(tx.row(i));
        }
        let out = Tensor::new(index.len(), c, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows(x, index), rg))
    }

    /// Reduces rows of `x` grouped by `segments[row]` into `num_segments`
    /// output rows. Empty segments produce zeros. Max/min route the gradient
    /// to the first attaining row.
    pub fn segment_reduce(
        &mut self,
        x: Var,
        segments: Vec<usize>,
        num_segments: usize,
        kind: Reduction,
    ) -> Result<Var> {
        let tx = self.value(x);
        if segments.len() != tx.rows() {
            return Err(Error::Shape {
                op: "segment_reduce",
                lhs: tx.shape(),
                rhs: vec![segments.len()],
            });
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= num_segments) {
            return Err(Error::invalid(format!(
                "segment id {bad} out of range for {num_segments} segments"
            )));
        }
        let c = tx.cols();
        let mut counts = vec![0usize; num_segments];
        for &s in &segments {
            counts[s] += 1;
        }
        let mut out = vec![0.0; num_segments * c];
        let mut argrow = Vec::new();
        let mut means = Vec::new();
        match kind {
            Reduction::Sum | Reduction::Mean => {
                let members = segment_members(&segments, num_segments);
                let mut acc = ExactSum::new();
                for (s, rows) in members.iter().enumerate() {
                    for j in 0..c {
                        acc.clear();
                        rows.iter().for_each(|&r| acc.add(tx.data()[r * c + j]));
                        out[s * c + j] = acc.value();
                        if kind == Reduction::Mean && !rows.is_empty() {
                            out[s * c + j] /= rows.len() as f64;
                        }
                    }
                }
            }
            Reduction::Max | Reduction::Min => {
                argrow = vec![usize::MAX; num_segments * c];
                for (r, &s) in segments.iter().enumerate() {
                    for (j, &v) in tx.row(r).iter().enumerate() {
                        let k = s * c + j;
                        let better = argrow[k] == usize::MAX
                            || (kind == Reduction::Max && v > out[k])
                            || (kind == Reduction::Min && v < out[k]);
                        if better {
                            out[k] = v;
                            argrow[k] = r;
                        }
                    }
                }
            }
            Reduction::Std => {
                means = vec![0.0; num_segments * c];
                let members = segment_members(&segments, num_segments);
                let mut acc = ExactSum::new();
                for (s, rows) in members.iter().enumerate() {
                    if rows.is_empty() {
                        continue;
                    }
                    let n = rows.len() as f64;
                    for j in 0..c {
                        let first = tx.data()[rows[0] * c + j];
                        if rows.iter().all(|&r| tx.data()[r * c + j] == first) {
                            means[s * c + j] = first;
                            continue;
                        }
                        acc.clear();
                        rows.iter().for_each(|&r| acc.add(tx.data()[r * c + j]));
                        let mean = acc.value() / n;
                        acc.clear();
                        rows.iter().for_each(|&r| {
                            let d = tx.data()[r * c + j] - mean;
                            acc.add(d * d);
                        });
                        means[s * c + j] = mean;
                        out[s * c + j] = (acc.value() / n).sqrt();
                    }
                }
            }
        }
        let out = Tensor::new(num_segments, c, out)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::SegmentReduce {
                x,
                segments,
                kind,
                counts,
                argrow,
                means,
            },
            rg,
        ))
    }

    /// Reduction over all rows (`1 × c`) or all columns (`r × 1`).
    pub fn reduce(&mut self, x: Var, axis: Axis, kind: Reduction) -> Result<Var> {
        match axis {
            Axis::Rows => {
                let n = self.value(x).rows();
                self.segment_reduce(x, vec![0; n], 1, kind)
            }
            Axis::Cols => {
                let t = self.transpose(x);
                let n = self.value(t).rows();
                let r = self.segment_reduce(t, vec![0; n], 1, kind)?;
                Ok(self.transpose(r))
            }
        }
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| f(*v)).collect();
        let out = Tensor::new(tx.rows(), tx.cols(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Logistic sigmoid.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    /// `log(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, softplus, Op::Softplus(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, f64::ln, Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.map(x, f64::recip, Op::Recip(x))
    }

    /// Euclidean norm of each row, `r × 1`.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let norms = (0..tx.rows())
            .map(|r| tx.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::column_vector(norms);
        let rg = self.rg(x);
        self.push(out, Op::RowNorm(x), rg)
    }

    /// Inverted dropout. Identity when `train` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let tx = self.value(x);
        let mask: Vec<f64> = (0..tx.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(tx.rows(), tx.cols(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Dropout(x, mask), rg))
    }

    /// Batch normalization over rows. In training mode normalizes with the
    /// batch statistics and records updated running statistics
    /// (`running ← (1 − momentum)·running + momentum·batch`, unbiased batch
    /// variance); in eval mode uses the running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        store: &ParamStore,
        prefix: &str,
        momentum: f64,
        train: bool,
    ) -> Result<Var> {
        let gamma = self.param(store, &format!("{prefix}.gamma"))?;
        let beta = self.param(store, &format!("{prefix}.beta"))?;
        let mean_key = format!("{prefix}.running_mean");
        let var_key = format!("{prefix}.running_var");
        let tx = self.value(x);
        let (m, c) = (tx.rows(), tx.cols());
        if self.value(gamma).cols() != c {
            return Err(shape_err("batch_norm", tx, self.value(gamma)));
        }
        let (mean, var) = if train {
            if m == 0 {
                return Err(Error::invalid("batch_norm on an empty batch"));
            }
            let mut mean = vec![0.0; c];
            for r in 0..m {
                for (a, v) in mean.iter_mut().zip(tx.row(r)) {
                    *a += v;
                }
            }
            mean.iter_mut().for_each(|a| *a /= m as f64);
            let mut var = vec![0.0; c];
            for r in 0..m {
                for ((a, v), mu) in var.iter_mut().zip(tx.row(r)).zip(&mean) {
                    *a += (v - mu) * (v - mu);
                }
            }
            var.iter_mut().for_each(|a| *a /= m as f64);
            (mean, var)
        } else {
            (
                self.buffer(store, &mean_key)?.into_data(),
                self.buffer(store, &var_key)?.into_data(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; m * c];
        let mut out = vec![0.0; m * c];
        for r in 0..m {
            for j in 0..c {
                let k = r * c + j;
                xhat[k] = (tx.data()[k] - mean[j]) * inv_std[j];
                out[k] = g[j] * xhat[k] + b[j];
            }
        }
        if train {
            let unbias = if m > 1 { m as f64 / (m as f64 - 1.0) } else { 1.0 };
            let rm = self.buffer(store, &mean_key)?;
            let rv = self.buffer(store, &var_key)?;
            let new_mean: Vec<f64> = rm
                .data()
                .iter()
                .zip(&mean)
                .map(|(r, b)| (1.0 - momentum) * r + momentum * b)
                .collect();
            let new_var: Vec<f64> = rv
                .data()
                .iter()
                .zip(&var)
                .map(|(r, b)| (1.0 - momentum) * r + momentum * b * unbias)
                .collect();
            self.buffer_updates.insert(mean_key, Tensor::row_vector(new_mean));
            self.buffer_updates.insert(var_key, Tensor::row_vector(new_var));
        }
        let out = Tensor::new(m, c, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        ))
    }

    /// `log Σ_{j: mask[i][j]} exp(x[i][j])` per row, stabilized by the row
    /// maximum. Every row needs at least one selected entry.
    pub fn masked_logsumexp(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let tx = self.value(x);
        if mask.len() != tx.len() {
            return Err(Error::Shape {
                op: "masked_logsumexp",
                lhs: tx.shape(),
                rhs: vec![mask.len()],
            });
        }
        let c = tx.cols();
        let mut out = Vec::with_capacity(tx.rows());
        let mut probs = vec![0.0; tx.len()];
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let sel = &mask[r * c..(r + 1) * c];
            let max = row
                .iter()
                .zip(sel)
                .filter(|(_, s)| **s)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::invalid(format!("masked_logsumexp: row {r} selects nothing")));
            }
            let mut total = 0.0;
            for j in 0..c {
                if sel[j] {
                    let e = (row[j] - max).exp();
                    probs[r * c + j] = e;
                    total += e;
                }
            }
            for j in 0..c {
                probs[r * c + j] /= total;
            }
            out.push(max + total.ln());
        }
        let out = Tensor::column_vector(out);
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaskedLogSumExp { x, probs }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// `x · W + b` with `{prefix}.w`, `{prefix}.b` from the store.
    pub fn linear(&mut self, x: Var, store: &ParamStore, prefix: &str) -> Result<Var> {
        let w = self.param(store, &format!("{prefix}.w"))?;
        let b = self.param(store, &format!("{prefix}.b"))?;
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Runs the reverse sweep from a `1 × 1` output. A tape can be
    /// differentiated once.
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let out_shape = self.value(output).shape();
        if out_shape != [1, 1] {
            return Err(Error::NonScalar(out_shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| (n.value.rows(), n.value.cols())).collect(),
            params: self.param_vars.clone(),
        })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        };
        let out = &nodes[idx].value;
        let (rows, cols) = (out.rows(), out.cols());

        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (r, k, c) = (ta.rows(), ta.cols(), tb.cols());
                if nodes[a.0].requires_grad {
                    acc(*a, matmul_a_bt(g, tb.data(), r, c, k));
                }
                if nodes[b.0].requires_grad {
                    acc(*b, matmul_at_b(ta.data(), g, r, k, c));
                }
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Transpose(a) => {
                let gt = Tensor::new(rows, cols, g.to_vec()).expect("grad shape").transpose();
                acc(*a, gt.into_data());
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, g.iter().zip(tb.data()).map(|(x, y)| x * y).collect());
                acc(*b, g.iter().zip(ta.data()).map(|(x, y)| x * y).collect());
            }
            Op::AddRow(x, row) => {
                acc(*x, g.to_vec());
                let mut gr = vec![0.0; cols];
                for (i, v) in g.iter().enumerate() {
                    gr[i % cols] += v;
                }
                acc(*row, gr);
            }
            Op::MulCol(x, gate) => {
                let (tx, tg) = (val(*x), val(*gate));
                let c = cols.max(1);
                acc(*x, g.iter().enumerate().map(|(i, v)| v * tg.data()[i / c]).collect());
                let mut gg = vec![0.0; rows];
                for (i, v) in g.iter().enumerate() {
                    gg[i / c] += v * tx.data()[i];
                }
                acc(*gate, gg);
            }
            Op::ScaleRows(x, f) => {
                let c = cols.max(1);
                acc(*x, g.iter().enumerate().map(|(i, v)| v * f[i / c]).collect());
            }
            Op::Scale(x, s) => acc(*x, g.iter().map(|v| v * s).collect()),
            Op::Shift(x) => acc(*x, g.to_vec()),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pc = val(*p).cols();
                    let mut gp = Vec::with_capacity(rows * pc);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * cols + offset..r * cols + offset + pc]);
                    }
                    acc(*p, gp);
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).len();
                    acc(*p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::GatherRows(x, index) => {
                let tx = val(*x);
                let mut gx = vec![0.0; tx.len()];
                for (i, &src) in index.iter().enumerate() {
                    for j in 0..cols {
                        gx[src * cols + j] += g[i * cols + j];
                    }
                }
                acc(*x, gx);
            }
            Op::SegmentReduce {
                x,
                segments,
                kind,
                counts,
                argrow,
                means,
            } => {
                let tx = val(*x);
                let mut gx = vec![0.0; tx.len()];
                match kind {
                    Reduction::Sum | Reduction::Mean => {
                        for (r, &s) in segments.iter().enumerate() {
                            let scale = if *kind == Reduction::Mean {
                                1.0 / counts[s] as f64
                            } else {
                                1.0
                            };
                            for j in 0..cols {
                                gx[r * cols + j] = g[s * cols + j] * scale;
                            }
                        }
                    }
                    Reduction::Max | Reduction::Min => {
                        for (k, &r) in argrow.iter().enumerate() {
                            if r != usize::MAX {
                                gx[r * cols + k % cols] += g[k];
                            }
                        }
                    }
                    Reduction::Std => {
                        for (r, &s) in segments.iter().enumerate() {
                            for j in 0..cols {
                                let k = s * cols + j;
                                let sd = out.data()[k];
                                if sd > 0.0 {
                                    gx[r * cols + j] = g[k] * (tx.data()[r * cols + j] - means[k])
                                        / (counts[s] as f64 * sd);
                                }
                            }
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Relu(x) => {
                let tx = val(*x);
                acc(
                    *x,
                    g.iter()
                        .zip(tx.data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sigmoid(x) => acc(
                *x,
                g.iter().zip(out.data()).map(|(gv, s)| gv * s * (1.0 - s)).collect(),
            ),
            Op::Softplus(x) => {
                let tx = val(*x);
                acc(*x, g.iter().zip(tx.data()).map(|(gv, xv)| gv * sigmoid(*xv)).collect());
            }
            Op::Log(x) => {
                let tx = val(*x);
                acc(*x, g.iter().zip(tx.data()).map(|(gv, xv)| gv / xv).collect());
            }
            Op::Exp(x) => acc(*x, g.iter().zip(out.data()).map(|(gv, e)| gv * e).collect()),
            Op::Recip(x) => acc(*x, g.iter().zip(out.data()).map(|(gv, y)| -gv * y * y).collect()),
            Op::RowNorm(x) => {
                let tx = val(*x);
                let c = tx.cols();
                let mut gx = vec![0.0; tx.len()];
                for r in 0..tx.rows() {
                    let n = out.data()[r];
                    if n > 0.0 {
                        for j in 0..c {
                            gx[r * c + j] = g[r] * tx.data()[r * c + j] / n;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Dropout(x, mask) => acc(*x, g.iter().zip(mask).map(|(gv, m)| gv * m).collect()),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let gam = val(*gamma).data();
                let m = rows;
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for r in 0..m {
                    for j in 0..cols {
                        let k = r * cols + j;
                        dgamma[j] += g[k] * xhat[k];
                        dbeta[j] += g[k];
                    }
                }
                let mut dx = vec![0.0; m * cols];
                if *train {
                    let mf = m as f64;
                    for j in 0..cols {
                        // Σ dxhat and Σ dxhat·xhat for column j
                        let sum_d = dbeta[j] * gam[j];
                        let sum_dx = dgamma[j] * gam[j];
                        for r in 0..m {
                            let k = r * cols + j;
                            let dxhat = g[k] * gam[j];
                            dx[k] = inv_std[j] / mf * (mf * dxhat - sum_d - xhat[k] * sum_dx);
                        }
                    }
                } else {
                    for r in 0..m {
                        for j in 0..cols {
                            let k = r * cols + j;
                            dx[k] = g[k] * gam[j] * inv_std[j];
                        }
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::MaskedLogSumExp { x, probs, .. } => {
                let c = val(*x).cols();
                acc(
                    *x,
                    probs.iter().enumerate().map(|(i, p)| p * g[i / c]).collect(),
                );
            }
            Op::SumAll(x) => acc(*x, vec![g[0]; val(*x).len()]),
            Op::MeanAll(x) => {
                let n = val(*x).len().max(1);
                acc(*x, vec![g[0] / n as f64; n]);
            }
        }
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    /// Gradient of the output with respect to `v` (zeros when `v` does not
    /// influence the output).
    pub fn get(&self, v: Var) -> Tensor {
        let (r, c) = self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(r, c, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(r, c),
        }
    }

    /// Gradients of every parameter bound on the tape, by name.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, v)| (name.clone(), self.get(*v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn square_has_gradient_two_x() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).item().unwrap(), 6.0);
    }

    #[test]
    fn bilinear_sum_gradient_is_other_factor() {
        let mut tape = Tape::new();
        let a = tape.variable(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.variable(t(2, 2, &[5.0, 6.0, 7.0, 8.0]));
        let ab = tape.mul(a, b).unwrap();
        let s = tape.sum(ab);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).data(), &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(g.get(b).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = tape.softplus(x);
        assert!((tape.item(y).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let big = tape.constant(Tensor::scalar(800.0));
        let yb = tape.softplus(big);
        assert_eq!(tape.item(yb).unwrap(), 800.0);
    }

    #[test]
    fn std_of_identical_rows_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(3, 2, &[1.5, -2.0, 1.5, -2.0, 1.5, -2.0]));
        let s = tape.reduce(x, Axis::Rows, Reduction::Std).unwrap();
        assert_eq!(tape.value(s).data(), &[0.0, 0.0]);
    }

    #[test]
    fn max_routes_gradient_to_first_attaining_row() {
        let mut tape = Tape::new();
        let x = tape.variable(t(3, 1, &[2.0, 5.0, 5.0]));
        let m = tape.reduce(x, Axis::Rows, Reduction::Max).unwrap();
        let s = tape.sum(m);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn empty_segments_are_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(2, 1, &[4.0, 6.0]));
        for kind in [Reduction::Sum, Reduction::Mean, Reduction::Max, Reduction::Min, Reduction::Std] {
            let r = tape.segment_reduce(x, vec![0, 0], 2, kind).unwrap();
            assert_eq!(tape.value(r).get(1, 0), 0.0);
        }
    }

    #[test]
    fn backward_twice_fails() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(1.0));
        let y = tape.exp(x);
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.variable(t(1, 2, &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalar(_))));
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"));
    }

    #[test]
    fn dropout_identity_cases() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let x = tape.constant(t(1, 3, &[1.0, 2.0, 3.0]));
        assert_eq!(tape.dropout(x, 0.5, &mut rng, false).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.0, &mut rng, true).unwrap(), x);
        let d = tape.dropout(x, 0.5, &mut rng, true).unwrap();
        assert!(tape
            .value(d)
            .data()
            .iter()
            .zip([1.0, 2.0, 3.0])
            .all(|(v, x)| *v == 0.0 || *v == 2.0 * x));
    }

    #[test]
    fn eval_batch_norm_with_matching_running_stats_is_identity() {
        let mut store = ParamStore::new(0);
        store.add_batch_norm("bn", 2).unwrap();
        // gamma = sqrt(var + eps), beta = mean makes eval-mode BN the identity.
        let mean = [0.5, -1.0];
        let var = [4.0, 0.25];
        store
            .set_buffer("bn.running_mean", Tensor::row_vector(mean.to_vec()))
            .unwrap();
        store
            .set_buffer("bn.running_var", Tensor::row_vector(var.to_vec()))
            .unwrap();
        store.get_mut("bn.gamma").unwrap().value = Tensor::row_vector(
            var.iter().map(|v| (v + BATCH_NORM_EPS).sqrt()).collect(),
        );
        store.get_mut("bn.beta").unwrap().value = Tensor::row_vector(mean.to_vec());
        let mut tape = Tape::new();
        let data = t(3, 2, &[0.5, -1.0, 2.5, 0.0, -1.5, -2.0]);
        let x = tape.constant(data.clone());
        let y = tape.batch_norm(x, &store, "bn", 0.1, false).unwrap();
        assert!(tape.value(y).max_abs_diff(&data) < 1e-6);
        assert!(tape.take_buffer_updates().is_empty());
    }

    #[test]
    fn train_batch_norm_updates_running_stats_with_momentum() {
        let mut store = ParamStore::new(0);
        store.add_batch_norm("bn", 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(t(2, 1, &[1.0, 3.0]));
        tape.batch_norm(x, &store, "bn", 0.1, true).unwrap();
        let upd = tape.take_buffer_updates();
        // batch mean 2, unbiased variance 2
        assert!((upd["bn.running_mean"].data()[0] - 0.2).abs() < 1e-15);
        assert!((upd["bn.running_var"].data()[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn masked_logsumexp_is_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(t(1, 3, &[1000.0, 1000.0, -5.0]));
        let y = tape
            .masked_logsumexp(x, vec![true, true, false])
            .unwrap();
        assert!((tape.item(y).unwrap() - (1000.0 + 2f64.ln())).abs() < 1e-9);
        assert!(tape.masked_logsumexp(x, vec![false; 3]).is_err());
    }
}
