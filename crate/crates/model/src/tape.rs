//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] evaluates eagerly: every operation computes its value when it is
//! recorded, so the same code serves inference and training. Parameters are
//! referenced from the [`ParamStore`] rather than copied.

use std::sync::Arc;

use qroute_qsim::{adjoint_grads, measure, simulate, CircuitLayout, ObservableSet, QsimError};

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Mat;

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Row-major boolean mask; `true` marks an allowed entry.
pub type Mask = Arc<Vec<bool>>;

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Relu(Var),
    Exp(Var),
    Square(Var),
    SumAll(Var),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    PairSum(Var, Var),
    Reshape(Var),
    MaskedSoftmaxRows(Var, Mask),
    MaskedLogSoftmaxRows(Var, Mask),
    PickCols(Var, Vec<usize>),
    MaskedEntropyRows(Var, Mask),
    BatchNorm(Var, Vec<f64>),
    ShiftRows(Var, isize),
    Qnn { input: Var, theta: Var, layout: Arc<CircuitLayout> },
}

#[derive(Debug)]
enum Value {
    Owned(Mat),
    Stored(ParamId),
}

#[derive(Debug)]
struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Errors raised while recording.
#[derive(Debug, thiserror::Error)]
pub enum TapeError {
    #[error(transparent)]
    Circuit(#[from] QsimError),
    #[error("{0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, nodes: Vec::with_capacity(256) }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`; later handles become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Mat {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Stored(id) => self.store.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.nodes.push(Node { value: Value::Owned(m), op: Op::Constant, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A stored tensor; buffers are recorded as constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        let needs_grad = self.store.is_trainable(id);
        self.nodes.push(Node { value: Value::Stored(id), op: Op::Param(id), needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b), &[a, b])
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Mat {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise op on {:?} and {:?}", x.shape(), y.shape());
        Mat::from_vec(x.rows, x.cols, x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |p, q| p + q);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |p, q| p - q);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |p, q| p * q);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    fn row_op(&self, a: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Mat {
        let (x, r) = (self.value(a), self.value(row));
        assert!(r.rows == 1 && r.cols == x.cols, "row broadcast of {:?} onto {:?}", r.shape(), x.shape());
        let mut out = x.clone();
        for i in 0..x.rows {
            for (o, &rv) in out.row_mut(i).iter_mut().zip(&r.data) {
                *o = f(*o, rv);
            }
        }
        out
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.row_op(a, row, |p, q| p + q);
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    /// Multiplies every row of `a` elementwise by a `1×c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.row_op(a, row, |p, q| p * q);
        self.push(v, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a), &[a])
    }

    /// Column means, `1×c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros(1, x.cols);
        for r in 0..x.rows {
            for (o, v) in out.data.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let n = x.rows as f64;
        out.data.iter_mut().for_each(|o| *o /= n);
        self.push(out, Op::MeanRows(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let m = self.value(p);
                assert_eq!(m.rows, rows, "concat of {} and {} rows", m.rows, rows);
                out.data[r * cols + off..r * cols + off + m.cols].copy_from_slice(m.row(r));
                off += m.cols;
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols);
        let mut out = Mat::zeros(x.rows, len);
        for r in 0..x.rows {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.rows);
        let out = Mat::from_vec(len, x.cols, x.data[start * x.cols..(start + len) * x.cols].to_vec());
        self.push(out, Op::SliceRows(a, start), &[a])
    }

    /// Rows of `a` in the order given; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros(idx.len(), x.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(x.row(i));
        }
        self.push(out, Op::GatherRows(a, idx.to_vec()), &[a])
    }

    /// For `n×c` inputs, the `n²×c` matrix whose row `i·n + j` is `a_i + b_j`.
    pub fn pair_sum(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape());
        let (n, c) = x.shape();
        let mut out = Mat::zeros(n * n, c);
        for i in 0..n {
            for j in 0..n {
                let o = out.row_mut(i * n + j);
                for ((ov, &p), &q) in o.iter_mut().zip(x.row(i)).zip(y.row(j)) {
                    *ov = p + q;
                }
            }
        }
        self.push(out, Op::PairSum(a, b), &[a, b])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), rows * cols);
        let out = Mat::from_vec(rows, cols, x.data.clone());
        self.push(out, Op::Reshape(a), &[a])
    }

    /// Row softmax over allowed entries; masked entries become exactly 0.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: &Mask) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let m = &mask[r * x.cols..(r + 1) * x.cols];
            softmax_row(x.row(r), m, out.row_mut(r), false);
        }
        self.push(out, Op::MaskedSoftmaxRows(a, mask.clone()), &[a])
    }

    /// Row log-softmax over allowed entries; masked entries become `−∞`.
    pub fn masked_log_softmax_rows(&mut self, a: Var, mask: &Mask) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let m = &mask[r * x.cols..(r + 1) * x.cols];
            softmax_row(x.row(r), m, out.row_mut(r), true);
        }
        self.push(out, Op::MaskedLogSoftmaxRows(a, mask.clone()), &[a])
    }

    /// `r×1` column holding `a[r, idx[r]]`.
    pub fn pick_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        assert_eq!(idx.len(), x.rows);
        let out = Mat::column(idx.iter().enumerate().map(|(r, &c)| x.at(r, c)).collect());
        self.push(out, Op::PickCols(a, idx.to_vec()), &[a])
    }

    /// Shannon entropy of each row of a masked log-probability matrix, `r×1`.
    pub fn masked_entropy_rows(&mut self, logp: Var, mask: &Mask) -> Var {
        let x = self.value(logp);
        let out = Mat::column(
            (0..x.rows)
                .map(|r| {
                    let m = &mask[r * x.cols..(r + 1) * x.cols];
                    -x.row(r).iter().zip(m).filter(|(_, &ok)| ok).map(|(&l, _)| l.exp() * l).sum::<f64>()
                })
                .collect(),
        );
        self.push(out, Op::MaskedEntropyRows(logp, mask.clone()), &[logp])
    }

    /// Standardizes every column with the mean and biased variance of its rows.
    ///
    /// Returns the normalized matrix together with the column means and biased
    /// variances. Needs at least two rows.
    pub fn batch_norm(&mut self, a: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>), TapeError> {
        let x = self.value(a);
        let (n, c) = x.shape();
        if n < 2 {
            return Err(TapeError::Shape(format!("batch normalization over {n} row(s); need at least 2")));
        }
        let mut mean = vec![0.0; c];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let mut out = x.clone();
        for r in 0..n {
            for ((o, m), s) in out.row_mut(r).iter_mut().zip(&mean).zip(&inv_std) {
                *o = (*o - m) * s;
            }
        }
        Ok((self.push(out, Op::BatchNorm(a, inv_std), &[a]), mean, var))
    }

    /// `out[i] = a[i + offset]`, zero where that row does not exist.
    pub fn shift_rows(&mut self, a: Var, offset: isize) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros(x.rows, x.cols);
        for i in 0..x.rows {
            let src = i as isize + offset;
            if src >= 0 && (src as usize) < x.rows {
                out.row_mut(i).copy_from_slice(x.row(src as usize));
            }
        }
        self.push(out, Op::ShiftRows(a, offset), &[a])
    }

    /// Circuit blocks applied row by row.
    ///
    /// `input` is `r × (b·n)` embedding angles and `theta` is `b × p`, one row of
    /// trainable angles per block. Block `k` reads columns `k·n..(k+1)·n` and
    /// writes `⟨Z⟩` of its `n` qubits to the same columns of the output.
    pub fn qnn(&mut self, input: Var, theta: Var, layout: &Arc<CircuitLayout>) -> Result<Var, TapeError> {
        let (z, th) = (self.value(input), self.value(theta));
        let n = layout.n_qubits();
        let blocks = th.rows;
        if th.cols != layout.num_params() || z.cols != blocks * n {
            return Err(TapeError::Shape(format!(
                "{} blocks of {} angles with {}-column input for {n}-qubit circuits of {} angles",
                th.rows,
                th.cols,
                z.cols,
                layout.num_params()
            )));
        }
        let obs = ObservableSet::all_z(n);
        let mut out = Mat::zeros(z.rows, z.cols);
        for r in 0..z.rows {
            for b in 0..blocks {
                let zi = &z.row(r)[b * n..(b + 1) * n];
                let state = simulate(layout, zi, th.row(b))?;
                let e = measure(&state, &obs)?;
                out.row_mut(r)[b * n..(b + 1) * n].copy_from_slice(&e);
            }
        }
        Ok(self.push(out, Op::Qnn { input, theta, layout: layout.clone() }, &[input, theta]))
    }

    /// Gradients of the `1×1` value `root` with respect to every trainable
    /// parameter reached from it.
    pub fn backward(&self, root: Var) -> Result<Gradients, TapeError> {
        assert_eq!(self.shape(root), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Mat::scalar(1.0));
        let mut out = Gradients::zeros_like(self.store);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let y = match &self.nodes[i].value {
                Value::Owned(m) => m,
                Value::Stored(_) => &g, // unused for parameters
            };
            let mut send = |v: Var, d: Mat| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&d),
                    slot @ None => *slot = Some(d),
                }
            };
            let needs = |v: Var| self.nodes[v.0].needs_grad;
            match &self.nodes[i].op {
                Op::Constant => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    if needs(*a) {
                        send(*a, g.matmul_t(self.value(*b)));
                    }
                    if needs(*b) {
                        send(*b, self.value(*a).t_matmul(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if needs(*a) {
                        send(*a, g.matmul(self.value(*b)));
                    }
                    if needs(*b) {
                        send(*b, g.t_matmul(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (x, y2) = (self.value(*a), self.value(*b));
                    if needs(*a) {
                        send(*a, hadamard(&g, y2));
                    }
                    if needs(*b) {
                        send(*b, hadamard(&g, x));
                    }
                }
                Op::AddRow(a, row) => {
                    if needs(*row) {
                        send(*row, col_sums(&g));
                    }
                    send(*a, g);
                }
                Op::MulRow(a, row) => {
                    let (x, rv) = (self.value(*a), self.value(*row));
                    if needs(*row) {
                        send(*row, col_sums(&hadamard(&g, x)));
                    }
                    if needs(*a) {
                        let mut d = g.clone();
                        for r in 0..d.rows {
                            for (dv, &s) in d.row_mut(r).iter_mut().zip(&rv.data) {
                                *dv *= s;
                            }
                        }
                        send(*a, d);
                    }
                }
                Op::Scale(a, s) => send(*a, g.map(|v| v * s)),
                Op::AddScalar(a) => send(*a, g),
                Op::Tanh(a) => send(*a, zip_map(&g, y, |gv, yv| gv * (1.0 - yv * yv))),
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    send(*a, zip_map(&g, x, |gv, xv| if xv > 0.0 { gv } else { slope * gv }))
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    send(*a, zip_map(&g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }))
                }
                Op::Exp(a) => send(*a, zip_map(&g, y, |gv, yv| gv * yv)),
                Op::Square(a) => {
                    let x = self.value(*a);
                    send(*a, zip_map(&g, x, |gv, xv| 2.0 * gv * xv))
                }
                Op::SumAll(a) => {
                    let (r, c) = self.shape(*a);
                    send(*a, Mat::from_vec(r, c, vec![g.item(); r * c]));
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.shape(*a);
                    let mut d = Mat::zeros(r, c);
                    for k in 0..r {
                        for (dv, gv) in d.row_mut(k).iter_mut().zip(&g.data) {
                            *dv = gv / r as f64;
                        }
                    }
                    send(*a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        if needs(p) {
                            let mut d = Mat::zeros(g.rows, w);
                            for r in 0..g.rows {
                                d.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                            }
                            send(p, d);
                        }
                        off += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut d = Mat::zeros(r, c);
                    for k in 0..r {
                        d.row_mut(k)[*start..*start + g.cols].copy_from_slice(g.row(k));
                    }
                    send(*a, d);
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut d = Mat::zeros(r, c);
                    d.data[start * c..start * c + g.len()].copy_from_slice(&g.data);
                    send(*a, d);
                }
                Op::GatherRows(a, idx) => {
                    let (r, c) = self.shape(*a);
                    let mut d = Mat::zeros(r, c);
                    for (k, &src) in idx.iter().enumerate() {
                        for (dv, gv) in d.row_mut(src).iter_mut().zip(g.row(k)) {
                            *dv += gv;
                        }
                    }
                    send(*a, d);
                }
                Op::PairSum(a, b) => {
                    let (n, c) = self.shape(*a);
                    let mut da = Mat::zeros(n, c);
                    let mut db = Mat::zeros(n, c);
                    for i2 in 0..n {
                        for j in 0..n {
                            let gr = g.row(i2 * n + j);
                            for (k, gv) in gr.iter().enumerate() {
                                da.data[i2 * c + k] += gv;
                                db.data[j * c + k] += gv;
                            }
                        }
                    }
                    send(*a, da);
                    send(*b, db);
                }
                Op::Reshape(a) => {
                    let (r, c) = self.shape(*a);
                    send(*a, Mat::from_vec(r, c, g.data));
                }
                Op::MaskedSoftmaxRows(a, mask) => {
                    let mut d = Mat::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (k, dv) in d.row_mut(r).iter_mut().enumerate() {
                            if mask[r * g.cols + k] {
                                *dv = yr[k] * (gr[k] - dot);
                            }
                        }
                    }
                    send(*a, d);
                }
                Op::MaskedLogSoftmaxRows(a, mask) => {
                    let mut d = Mat::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let m = &mask[r * g.cols..(r + 1) * g.cols];
                        let (yr, gr) = (y.row(r), g.row(r));
                        let total: f64 = gr.iter().zip(m).filter(|(_, &ok)| ok).map(|(v, _)| v).sum();
                        for (k, dv) in d.row_mut(r).iter_mut().enumerate() {
                            if m[k] {
                                *dv = gr[k] - yr[k].exp() * total;
                            }
                        }
                    }
                    send(*a, d);
                }
                Op::PickCols(a, idx) => {
                    let (r, c) = self.shape(*a);
                    let mut d = Mat::zeros(r, c);
                    for (k, &col) in idx.iter().enumerate() {
                        d.data[k * c + col] += g.data[k];
                    }
                    send(*a, d);
                }
                Op::MaskedEntropyRows(a, mask) => {
                    let x = self.value(*a);
                    let mut d = Mat::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        for k in 0..x.cols {
                            if mask[r * x.cols + k] {
                                let l = x.at(r, k);
                                *d.at_mut(r, k) = -g.data[r] * l.exp() * (l + 1.0);
                            }
                        }
                    }
                    send(*a, d);
                }
                Op::BatchNorm(a, inv_std) => {
                    let (n, c) = g.shape();
                    let mut sum_g = vec![0.0; c];
                    let mut sum_gy = vec![0.0; c];
                    for r in 0..n {
                        for k in 0..c {
                            sum_g[k] += g.at(r, k);
                            sum_gy[k] += g.at(r, k) * y.at(r, k);
                        }
                    }
                    let nf = n as f64;
                    let mut d = Mat::zeros(n, c);
                    for r in 0..n {
                        for k in 0..c {
                            *d.at_mut(r, k) = inv_std[k] / nf * (nf * g.at(r, k) - sum_g[k] - y.at(r, k) * sum_gy[k]);
                        }
                    }
                    send(*a, d);
                }
                Op::ShiftRows(a, offset) => {
                    let mut d = Mat::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let src = r as isize + offset;
                        if src >= 0 && (src as usize) < g.rows {
                            let src = src as usize;
                            for (dv, gv) in d.row_mut(src).iter_mut().zip(g.row(r)) {
                                *dv += gv;
                            }
                        }
                    }
                    send(*a, d);
                }
                Op::Qnn { input, theta, layout } => {
                    let (z, th) = (self.value(*input), self.value(*theta));
                    let n = layout.n_qubits();
                    let mut dz = Mat::zeros(z.rows, z.cols);
                    let mut dth = Mat::zeros(th.rows, th.cols);
                    for r in 0..z.rows {
                        for b in 0..th.rows {
                            let w = &g.row(r)[b * n..(b + 1) * n];
                            if w.iter().all(|&v| v == 0.0) {
                                continue;
                            }
                            let zi = &z.row(r)[b * n..(b + 1) * n];
                            let adj = adjoint_grads(layout, zi, th.row(b), w)?;
                            dz.row_mut(r)[b * n..(b + 1) * n].copy_from_slice(&adj.grad_inputs);
                            for (dv, gv) in dth.row_mut(b).iter_mut().zip(&adj.grad_theta) {
                                *dv += gv;
                            }
                        }
                    }
                    if needs(*input) {
                        send(*input, dz);
                    }
                    if needs(*theta) {
                        send(*theta, dth);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn softmax_row(x: &[f64], mask: &[bool], out: &mut [f64], log: bool) {
    let max = x
        .iter()
        .zip(mask)
        .filter(|(_, &ok)| ok)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for ((o, &v), &ok) in out.iter_mut().zip(x).zip(mask) {
        *o = if ok { (v - max).exp() } else { 0.0 };
        total += *o;
    }
    if log {
        let lse = total.ln();
        for ((o, &v), &ok) in out.iter_mut().zip(x).zip(mask) {
            *o = if ok { v - max - lse } else { f64::NEG_INFINITY };
        }
    } else {
        out.iter_mut().for_each(|o| *o /= total);
    }
}

fn hadamard(a: &Mat, b: &Mat) -> Mat {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    Mat::from_vec(a.rows, a.cols, a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect())
}

fn col_sums(g: &Mat) -> Mat {
    let mut out = Mat::zeros(1, g.cols);
    for r in 0..g.rows {
        for (o, v) in out.data.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}
