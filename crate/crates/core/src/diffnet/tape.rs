//! Reverse-mode differentiation over row-major matrices.
//!
//! A [`Tape`] records every operation of a forward pass. Rows are
//! independent samples for every op except the explicit reductions
//! (`sum_all`, `mean_all`), so chunking a batch never changes per-row results.

use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::{axpy, dot, Tensor2};
use crate::error::{contract, Result};

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    BlockLinear { x: Var, w: Var, b: Var, m: usize },
    Mix { p: Var, x: Var, m: usize },
    SoftmaxGroups { x: Var, m: usize },
    LogSoftmax(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    ConcatCols(Var, Var),
    SliceCols { x: Var, start: usize },
    SumCols(Var),
    SumAll(Var),
    MeanAll(Var),
    TileCols { x: Var, k: usize },
    MeanBlocks { x: Var, m: usize },
    RepeatRows { x: Var, k: usize },
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor2>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(64),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn push(&mut self, value: Tensor2, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is tracked for it.
    pub fn leaf(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is wanted (e.g. for checking input gradients).
    pub fn leaf_with_grad(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// `y = x W^T + b` with `W: out x in`, `b: 1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        if xt.cols() != wt.cols() {
            return Err(contract(format!(
                "linear: input has {} columns, weight expects {}",
                xt.cols(),
                wt.cols()
            )));
        }
        let (rows, out) = (xt.rows(), wt.rows());
        let mut y = Tensor2::zeros(rows, out);
        if let Some(b) = b {
            let bt = self.value(b);
            if bt.shape() != (1, out) {
                return Err(contract(format!(
                    "linear: bias shape {:?}, expected (1, {out})",
                    bt.shape()
                )));
            }
            for r in 0..rows {
                y.row_mut(r).copy_from_slice(bt.data());
            }
        }
        for r in 0..rows {
            let xr = xt.row(r);
            let yr = y.row_mut(r);
            for (o, yo) in yr.iter_mut().enumerate() {
                *yo += dot(xr, wt.row(o));
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(y, Op::Linear { x, w, b }, rg))
    }

    /// `m` independent linear maps on column blocks.
    ///
    /// `x: B x (m*k)`, `w: (m*o) x k` (module `j` owns rows `j*o..(j+1)*o`),
    /// `b: 1 x (m*o)`.
    pub fn block_linear(&mut self, x: Var, w: Var, b: Var, m: usize) -> Result<Var> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        if m == 0 || xt.cols() % m != 0 || wt.rows() % m != 0 {
            return Err(contract("block_linear: blocks do not divide shapes"));
        }
        let k = xt.cols() / m;
        let o = wt.rows() / m;
        if wt.cols() != k || bt.shape() != (1, m * o) {
            return Err(contract(format!(
                "block_linear: weight {:?} / bias {:?} inconsistent with {m} blocks of width {k}",
                wt.shape(),
                bt.shape()
            )));
        }
        let rows = xt.rows();
        let mut y = Tensor2::zeros(rows, m * o);
        for r in 0..rows {
            let xr = xt.row(r);
            let yr = y.row_mut(r);
            for j in 0..m {
                let xj = &xr[j * k..(j + 1) * k];
                for q in 0..o {
                    let wi = j * o + q;
                    yr[wi] = bt.data()[wi] + dot(xj, wt.row(wi));
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(y, Op::BlockLinear { x, w, b, m }, rg))
    }

    /// Routed mixture: `y_i = sum_j p[i, j] * x_j` per row, with `p: B x (m*m)`
    /// row-major over `(i, j)` and `x: B x (m*d)`.
    pub fn mix(&mut self, p: Var, x: Var, m: usize) -> Result<Var> {
        let (pt, xt) = (self.value(p), self.value(x));
        if pt.cols() != m * m || xt.cols() % m != 0 || pt.rows() != xt.rows() {
            return Err(contract(format!(
                "mix: routing {:?} and features {:?} inconsistent with m={m}",
                pt.shape(),
                xt.shape()
            )));
        }
        let d = xt.cols() / m;
        let rows = xt.rows();
        let mut y = Tensor2::zeros(rows, m * d);
        for r in 0..rows {
            let pr = pt.row(r);
            let xr = xt.row(r);
            let yr = y.row_mut(r);
            for i in 0..m {
                let yi = &mut yr[i * d..(i + 1) * d];
                for j in 0..m {
                    axpy(pr[i * m + j], &xr[j * d..(j + 1) * d], yi);
                }
            }
        }
        let rg = self.rg(p) || self.rg(x);
        Ok(self.push(y, Op::Mix { p, x, m }, rg))
    }

    /// Softmax over consecutive groups of `m` columns.
    pub fn softmax_groups(&mut self, x: Var, m: usize) -> Result<Var> {
        let xt = self.value(x);
        if m == 0 || !xt.cols().is_multiple_of(m) {
            return Err(contract("softmax_groups: group size does not divide columns"));
        }
        let mut y = xt.clone();
        for r in 0..y.rows() {
            for g in y.row_mut(r).chunks_mut(m) {
                softmax_in_place(g);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(y, Op::SoftmaxGroups { x, m }, rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let mut y = self.value(x).clone();
        for r in 0..y.rows() {
            let row = y.row_mut(r);
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(x);
        self.push(y, Op::LogSoftmax(x), rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let y = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(y, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(contract(format!(
                "elementwise op on shapes {:?} and {:?}",
                at.shape(),
                bt.shape()
            )));
        }
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| f(x, y)).collect();
        let y = Tensor2::from_vec(at.rows(), at.cols(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.rows() != bt.rows() {
            return Err(contract("concat_cols: row mismatch"));
        }
        let cols = at.cols() + bt.cols();
        let mut y = Tensor2::zeros(at.rows(), cols);
        for r in 0..at.rows() {
            let yr = y.row_mut(r);
            yr[..at.cols()].copy_from_slice(at.row(r));
            yr[at.cols()..].copy_from_slice(bt.row(r));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::ConcatCols(a, b), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xt = self.value(x);
        if start > end || end > xt.cols() {
            return Err(contract(format!(
                "slice_cols {start}..{end} out of range for {} columns",
                xt.cols()
            )));
        }
        let mut y = Tensor2::zeros(xt.rows(), end - start);
        for r in 0..xt.rows() {
            y.row_mut(r).copy_from_slice(&xt.row(r)[start..end]);
        }
        let rg = self.rg(x);
        Ok(self.push(y, Op::SliceCols { x, start }, rg))
    }

    /// Per-row sum, `B x 1`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let data = (0..xt.rows()).map(|r| xt.row(r).iter().sum()).collect();
        let y = Tensor2::from_vec(xt.rows(), 1, data).expect("sized");
        let rg = self.rg(x);
        self.push(y, Op::SumCols(x), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let y = Tensor2::filled(1, 1, self.value(x).sum());
        let rg = self.rg(x);
        self.push(y, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let y = Tensor2::filled(1, 1, xt.sum() / xt.len().max(1) as f64);
        let rg = self.rg(x);
        self.push(y, Op::MeanAll(x), rg)
    }

    /// Repeat the columns `k` times: `B x d -> B x (k*d)`.
    pub fn tile_cols(&mut self, x: Var, k: usize) -> Var {
        let xt = self.value(x);
        let d = xt.cols();
        let mut y = Tensor2::zeros(xt.rows(), k * d);
        for r in 0..xt.rows() {
            for j in 0..k {
                y.row_mut(r)[j * d..(j + 1) * d].copy_from_slice(xt.row(r));
            }
        }
        let rg = self.rg(x);
        self.push(y, Op::TileCols { x, k }, rg)
    }

    /// Average of `m` column blocks: `B x (m*d) -> B x d`.
    pub fn mean_blocks(&mut self, x: Var, m: usize) -> Result<Var> {
        let xt = self.value(x);
        if m == 0 || !xt.cols().is_multiple_of(m) {
            return Err(contract("mean_blocks: block count does not divide columns"));
        }
        let d = xt.cols() / m;
        let mut y = Tensor2::zeros(xt.rows(), d);
        let inv = 1.0 / m as f64;
        for r in 0..xt.rows() {
            let xr = xt.row(r);
            let yr = y.row_mut(r);
            for j in 0..m {
                axpy(1.0, &xr[j * d..(j + 1) * d], yr);
            }
            if m > 1 {
                for v in yr.iter_mut() {
                    *v *= inv;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(y, Op::MeanBlocks { x, m }, rg))
    }

    /// Each row repeated `k` times consecutively: `B x d -> (B*k) x d`.
    pub fn repeat_rows(&mut self, x: Var, k: usize) -> Var {
        let xt = self.value(x);
        let mut y = Tensor2::zeros(xt.rows() * k, xt.cols());
        for r in 0..xt.rows() {
            for j in 0..k {
                y.row_mut(r * k + j).copy_from_slice(xt.row(r));
            }
        }
        let rg = self.rg(x);
        self.push(y, Op::RepeatRows { x, k }, rg)
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.shape() != (1, 1) {
            return Err(contract(format!(
                "backward requires a scalar loss, got {:?}",
                lt.shape()
            )));
        }
        self.backward_from(loss, Tensor2::filled(1, 1, 1.0))
    }

    /// Backpropagate an explicit upstream gradient `seed` (same shape as `out`).
    pub fn backward_from(&self, out: Var, seed: Tensor2) -> Result<Gradients> {
        if self.value(out).shape() != seed.shape() {
            return Err(contract("backward seed shape mismatch"));
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(gy);
                continue;
            }
            self.propagate(&node.op, idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor2>], v: Var, g: Tensor2) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(a) => a.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, idx: usize, gy: &Tensor2, grads: &mut [Option<Tensor2>]) {
        let yv = || self.nodes[idx].value.as_ref().expect("op value");
        match *op {
            Op::Leaf | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (xt, wt) = (self.value(x), self.value(w));
                if self.rg(x) {
                    let mut gx = Tensor2::zeros(xt.rows(), xt.cols());
                    for r in 0..xt.rows() {
                        let gr = gy.row(r);
                        let gxr = gx.row_mut(r);
                        for (o, &g) in gr.iter().enumerate() {
                            if g != 0.0 {
                                axpy(g, wt.row(o), gxr);
                            }
                        }
                    }
                    self.acc(grads, x, gx);
                }
                if self.rg(w) {
                    let mut gw = Tensor2::zeros(wt.rows(), wt.cols());
                    for r in 0..xt.rows() {
                        let xr = xt.row(r);
                        for (o, &g) in gy.row(r).iter().enumerate() {
                            if g != 0.0 {
                                axpy(g, xr, gw.row_mut(o));
                            }
                        }
                    }
                    self.acc(grads, w, gw);
                }
                if let Some(b) = b.filter(|&b| self.rg(b)) {
                    let mut gb = Tensor2::zeros(1, gy.cols());
                    for r in 0..gy.rows() {
                        axpy(1.0, gy.row(r), gb.data_mut());
                    }
                    self.acc(grads, b, gb);
                }
            }
            Op::BlockLinear { x, w, b, m } => {
                let (xt, wt) = (self.value(x), self.value(w));
                let k = xt.cols() / m;
                let o = wt.rows() / m;
                if self.rg(x) {
                    let mut gx = Tensor2::zeros(xt.rows(), xt.cols());
                    for r in 0..xt.rows() {
                        let gr = gy.row(r);
                        let gxr = gx.row_mut(r);
                        for j in 0..m {
                            let gxj = &mut gxr[j * k..(j + 1) * k];
                            for q in 0..o {
                                let g = gr[j * o + q];
                                if g != 0.0 {
                                    axpy(g, wt.row(j * o + q), gxj);
                                }
                            }
                        }
                    }
                    self.acc(grads, x, gx);
                }
                if self.rg(w) {
                    let mut gw = Tensor2::zeros(wt.rows(), wt.cols());
                    for r in 0..xt.rows() {
                        let xr = xt.row(r);
                        let gr = gy.row(r);
                        for j in 0..m {
                            let xj = &xr[j * k..(j + 1) * k];
                            for q in 0..o {
                                let g = gr[j * o + q];
                                if g != 0.0 {
                                    axpy(g, xj, gw.row_mut(j * o + q));
                                }
                            }
                        }
                    }
                    self.acc(grads, w, gw);
                }
                if self.rg(b) {
                    let mut gb = Tensor2::zeros(1, gy.cols());
                    for r in 0..gy.rows() {
                        axpy(1.0, gy.row(r), gb.data_mut());
                    }
                    self.acc(grads, b, gb);
                }
            }
            Op::Mix { p, x, m } => {
                let (pt, xt) = (self.value(p), self.value(x));
                let d = xt.cols() / m;
                if self.rg(p) {
                    let mut gp = Tensor2::zeros(pt.rows(), pt.cols());
                    for r in 0..xt.rows() {
                        let (gr, xr) = (gy.row(r), xt.row(r));
                        let gpr = gp.row_mut(r);
                        for i in 0..m {
                            let gi = &gr[i * d..(i + 1) * d];
                            for j in 0..m {
                                gpr[i * m + j] = dot(gi, &xr[j * d..(j + 1) * d]);
                            }
                        }
                    }
                    self.acc(grads, p, gp);
                }
                if self.rg(x) {
                    let mut gx = Tensor2::zeros(xt.rows(), xt.cols());
                    for r in 0..xt.rows() {
                        let (gr, pr) = (gy.row(r), pt.row(r));
                        let gxr = gx.row_mut(r);
                        for i in 0..m {
                            let gi = &gr[i * d..(i + 1) * d];
                            for j in 0..m {
                                axpy(pr[i * m + j], gi, &mut gxr[j * d..(j + 1) * d]);
                            }
                        }
                    }
                    self.acc(grads, x, gx);
                }
            }
            Op::SoftmaxGroups { x, m } => {
                let y = yv();
                let mut gx = Tensor2::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), gy.row(r));
                    let gxr = gx.row_mut(r);
                    for s in (0..yr.len()).step_by(m) {
                        let inner = dot(&gr[s..s + m], &yr[s..s + m]);
                        for c in s..s + m {
                            gxr[c] = yr[c] * (gr[c] - inner);
                        }
                    }
                }
                self.acc(grads, x, gx);
            }
            Op::LogSoftmax(x) => {
                let y = yv();
                let mut gx = gy.clone();
                for r in 0..y.rows() {
                    let total: f64 = gy.row(r).iter().sum();
                    for (g, &lp) in gx.row_mut(r).iter_mut().zip(y.row(r)) {
                        *g -= lp.exp() * total;
                    }
                }
                self.acc(grads, x, gx);
            }
            Op::Relu(x) => {
                let xt = self.value(x);
                let g = zip_map(gy, xt, |g, v| if v > 0.0 { g } else { 0.0 });
                self.acc(grads, x, g);
            }
            Op::Tanh(x) => {
                let g = zip_map(gy, yv(), |g, t| g * (1.0 - t * t));
                self.acc(grads, x, g);
            }
            Op::Exp(x) => {
                let g = zip_map(gy, yv(), |g, e| g * e);
                self.acc(grads, x, g);
            }
            Op::Square(x) => {
                let g = zip_map(gy, self.value(x), |g, v| 2.0 * g * v);
                self.acc(grads, x, g);
            }
            Op::Scale(x, c) => self.acc(grads, x, gy.map(|g| g * c)),
            Op::AddScalar(x) => self.acc(grads, x, gy.clone()),
            Op::Add(a, b) => {
                self.acc(grads, a, gy.clone());
                self.acc(grads, b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, a, gy.clone());
                self.acc(grads, b, gy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    self.acc(grads, a, zip_map(gy, self.value(b), |g, v| g * v));
                }
                if self.rg(b) {
                    self.acc(grads, b, zip_map(gy, self.value(a), |g, v| g * v));
                }
            }
            Op::Clamp { x, lo, hi } => {
                let g = zip_map(gy, self.value(x), |g, v| if (lo..=hi).contains(&v) { g } else { 0.0 });
                self.acc(grads, x, g);
            }
            Op::ConcatCols(a, b) => {
                let ac = self.value(a).cols();
                let bc = self.value(b).cols();
                let mut ga = Tensor2::zeros(gy.rows(), ac);
                let mut gb = Tensor2::zeros(gy.rows(), bc);
                for r in 0..gy.rows() {
                    ga.row_mut(r).copy_from_slice(&gy.row(r)[..ac]);
                    gb.row_mut(r).copy_from_slice(&gy.row(r)[ac..]);
                }
                self.acc(grads, a, ga);
                self.acc(grads, b, gb);
            }
            Op::SliceCols { x, start } => {
                let xt = self.value(x);
                let mut gx = Tensor2::zeros(xt.rows(), xt.cols());
                let w = gy.cols();
                for r in 0..gy.rows() {
                    gx.row_mut(r)[start..start + w].copy_from_slice(gy.row(r));
                }
                self.acc(grads, x, gx);
            }
            Op::SumCols(x) => {
                let xt = self.value(x);
                let mut gx = Tensor2::zeros(xt.rows(), xt.cols());
                for r in 0..xt.rows() {
                    gx.row_mut(r).fill(gy.get(r, 0));
                }
                self.acc(grads, x, gx);
            }
            Op::SumAll(x) => {
                let xt = self.value(x);
                self.acc(grads, x, Tensor2::filled(xt.rows(), xt.cols(), gy.get(0, 0)));
            }
            Op::MeanAll(x) => {
                let xt = self.value(x);
                let g = gy.get(0, 0) / xt.len().max(1) as f64;
                self.acc(grads, x, Tensor2::filled(xt.rows(), xt.cols(), g));
            }
            Op::TileCols { x, k } => {
                let xt = self.value(x);
                let d = xt.cols();
                let mut gx = Tensor2::zeros(xt.rows(), d);
                for r in 0..xt.rows() {
                    for j in 0..k {
                        axpy(1.0, &gy.row(r)[j * d..(j + 1) * d], gx.row_mut(r));
                    }
                }
                self.acc(grads, x, gx);
            }
            Op::MeanBlocks { x, m } => {
                let xt = self.value(x);
                let d = gy.cols();
                let inv = 1.0 / m as f64;
                let mut gx = Tensor2::zeros(xt.rows(), xt.cols());
                for r in 0..xt.rows() {
                    for j in 0..m {
                        axpy(inv, gy.row(r), &mut gx.row_mut(r)[j * d..(j + 1) * d]);
                    }
                }
                self.acc(grads, x, gx);
            }
            Op::RepeatRows { x, k } => {
                let xt = self.value(x);
                let mut gx = Tensor2::zeros(xt.rows(), xt.cols());
                for r in 0..xt.rows() {
                    for j in 0..k {
                        axpy(1.0, gy.row(r * k + j), gx.row_mut(r));
                    }
                }
                self.acc(grads, x, gx);
            }
        }
    }
}

fn zip_map(a: &Tensor2, b: &Tensor2, f: impl Fn(f64, f64) -> f64) -> Tensor2 {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor2::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in xs.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    for v in xs.iter_mut() {
        *v /= total;
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    /// Gradient with respect to any recorded node (if it received one).
    pub fn wrt(&self, v: Var) -> Option<&Tensor2> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Collect gradients for every parameter node, summing repeated uses.
    pub fn params(&self, tape: &Tape<'_>) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(tape.params);
        for (i, node) in tape.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(Some(g))) = (&node.op, self.grads.get(i)) {
                out.accumulate(*id, g);
            }
        }
        out
    }
}
