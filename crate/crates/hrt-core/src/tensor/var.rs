//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A `Var` is a shared handle to one node of a gradient graph. Forward ops
//! build the graph; [`Var::backward`] replays it in reverse topological
//! order and accumulates gradients into every reachable `requires_grad`
//! leaf. Dropping the final output frees the whole graph, so the backward
//! structure lives exactly one step.
//!
//! Graph construction is single-threaded per model instance; all bookkeeping
//! (node ids, the grad-enabled flag, the cost ledger) is thread-local.

use super::raw::{self, Tensor};
use crate::error::{HrtError, Result};
use crate::ledger;
use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Runs `f` with gradient recording disabled. Ops executed inside create
/// no parent links, so intermediates are freed as soon as they go out of
/// scope (this is what makes forward-only memory measurements meaningful).
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    let out = f();
    GRAD_ENABLED.with(|c| c.set(prev));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Gelu,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul,
    MatmulNT,
    SoftmaxRows,
    LogSoftmaxRows,
    LayerNorm { xhat: Tensor, inv_std: Vec<f64> },
    Pointwise(Pointwise),
    Add,
    Sub,
    Mul,
    AddRowVec,
    MulColVec,
    MulScalar,
    Scale(f64),
    Dropout { mask: Tensor },
    GatherRows { indices: Rc<Vec<usize>> },
    Reshape,
    ConcatCols,
    ConcatRows,
    Sum,
}

#[derive(Debug)]
struct Node {
    id: u64,
    data: Tensor,
    requires_grad: bool,
    grad: RefCell<Option<Tensor>>,
    op: Op,
    parents: Vec<Var>,
}

/// A differentiable dense array: a handle into the current gradient graph.
#[derive(Debug, Clone)]
pub struct Var(Rc<Node>);

impl Var {
    /// A leaf that participates in gradient computation (a parameter or a
    /// gradcheck probe point).
    pub fn leaf(data: Tensor) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            data,
            requires_grad: true,
            grad: RefCell::new(None),
            op: Op::Leaf,
            parents: vec![],
        }))
    }

    /// A leaf with no gradient (input embedding indices' one-hots, masks,
    /// positional tables, pooling weights).
    pub fn constant(data: Tensor) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            data,
            requires_grad: false,
            grad: RefCell::new(None),
            op: Op::Leaf,
            parents: vec![],
        }))
    }

    fn from_op(data: Tensor, op: Op, parents: Vec<Var>) -> Var {
        let rg = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !rg {
            // No grad flows here: keep the value, drop the graph structure.
            return Var::constant(data);
        }
        Var(Rc::new(Node {
            id: next_id(),
            data,
            requires_grad: true,
            grad: RefCell::new(None),
            op,
            parents,
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.data
    }

    pub fn rows(&self) -> usize {
        self.0.data.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.data.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.data.shape()
    }

    pub fn node_id(&self) -> u64 {
        self.0.id
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    fn accum_grad(&self, delta: Tensor) {
        let mut g = self.0.grad.borrow_mut();
        match g.as_mut() {
            Some(acc) => {
                let a = acc.as_mut_slice();
                let d = delta.as_slice();
                for i in 0..a.len() {
                    a[i] += d[i];
                }
            }
            None => *g = Some(delta),
        }
    }

    // ---- forward ops ------------------------------------------------

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        if self.cols() != other.rows() {
            return Err(HrtError::Dim(format!(
                "matmul: {}x{} . {}x{}",
                self.rows(),
                self.cols(),
                other.rows(),
                other.cols()
            )));
        }
        let out = raw::matmul(self.value(), other.value());
        ledger::record_labeled(2 * (self.rows() * self.cols() * other.cols()) as u64);
        Ok(Var::from_op(out, Op::Matmul, vec![self.clone(), other.clone()]))
    }

    /// `self . other^T`.
    pub fn matmul_nt(&self, other: &Var) -> Result<Var> {
        if self.cols() != other.cols() {
            return Err(HrtError::Dim(format!(
                "matmul_nt: {}x{} . ({}x{})^T",
                self.rows(),
                self.cols(),
                other.rows(),
                other.cols()
            )));
        }
        let out = raw::matmul_nt(self.value(), other.value());
        ledger::record_labeled(2 * (self.rows() * self.cols() * other.rows()) as u64);
        Ok(Var::from_op(out, Op::MatmulNT, vec![self.clone(), other.clone()]))
    }

    /// Row-wise numerically stabilized softmax.
    pub fn softmax_rows(&self) -> Result<Var> {
        let x = self.value();
        let (m, n) = x.shape();
        let mut out = Tensor::zeros(m, n);
        for r in 0..m {
            let row = x.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(HrtError::NonFinite(format!(
                    "softmax_rows: row {r} has no finite maximum"
                )));
            }
            let orow = &mut out.as_mut_slice()[r * n..(r + 1) * n];
            let mut sum = 0.0;
            for c in 0..n {
                let e = (row[c] - max).exp();
                orow[c] = e;
                sum += e;
            }
            for v in orow.iter_mut() {
                *v /= sum;
            }
        }
        ledger::record_other(5 * (m * n) as u64);
        Ok(Var::from_op(out, Op::SoftmaxRows, vec![self.clone()]))
    }

    /// Row-wise stabilized log-softmax (for cross-entropy losses).
    pub fn log_softmax_rows(&self) -> Result<Var> {
        let x = self.value();
        let (m, n) = x.shape();
        let mut out = Tensor::zeros(m, n);
        for r in 0..m {
            let row = x.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let orow = &mut out.as_mut_slice()[r * n..(r + 1) * n];
            for c in 0..n {
                orow[c] = row[c] - lse;
            }
        }
        ledger::record_other(5 * (m * n) as u64);
        Ok(Var::from_op(out, Op::LogSoftmaxRows, vec![self.clone()]))
    }

    /// Per-row zero-mean unit-variance normalization followed by the
    /// affine map `gain . xhat + bias`. `gain` and `bias` are 1 x d.
    pub fn layer_norm(&self, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        let d = self.cols();
        if gain.shape() != (1, d) || bias.shape() != (1, d) {
            return Err(HrtError::Dim(format!(
                "layer_norm: input 1x{} affine, got gain {:?} bias {:?}",
                d,
                gain.shape(),
                bias.shape()
            )));
        }
        if eps <= 0.0 {
            return Err(HrtError::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let x = self.value();
        let m = x.rows();
        let mut xhat = Tensor::zeros(m, d);
        let mut inv_std = vec![0.0; m];
        let mut out = Tensor::zeros(m, d);
        let gv = gain.value().as_slice();
        let bv = bias.value().as_slice();
        for r in 0..m {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let xh = (row[c] - mean) * is;
                xhat.set(r, c, xh);
                out.set(r, c, gv[c] * xh + bv[c]);
            }
        }
        ledger::record_other(5 * (m * d) as u64);
        Ok(Var::from_op(
            out,
            Op::LayerNorm { xhat, inv_std },
            vec![self.clone(), gain.clone(), bias.clone()],
        ))
    }

    pub fn pointwise(&self, kind: Pointwise) -> Result<Var> {
        let x = self.value();
        let mut out = Tensor::zeros(x.rows(), x.cols());
        {
            let o = out.as_mut_slice();
            for (i, &v) in x.as_slice().iter().enumerate() {
                o[i] = match kind {
                    Pointwise::Relu => v.max(0.0),
                    Pointwise::Gelu => 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)),
                    Pointwise::Sigmoid => 1.0 / (1.0 + (-v).exp()),
                };
            }
        }
        ledger::record_other(x.len() as u64);
        Ok(Var::from_op(out, Op::Pointwise(kind), vec![self.clone()]))
    }

    pub fn relu(&self) -> Result<Var> {
        self.pointwise(Pointwise::Relu)
    }

    pub fn gelu(&self) -> Result<Var> {
        self.pointwise(Pointwise::Gelu)
    }

    pub fn sigmoid(&self) -> Result<Var> {
        self.pointwise(Pointwise::Sigmoid)
    }

    fn binary_same_shape(&self, other: &Var, name: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(HrtError::Dim(format!(
                "{name}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary_same_shape(other, "add")?;
        let mut out = self.value().clone();
        {
            let o = out.as_mut_slice();
            for (i, &v) in other.value().as_slice().iter().enumerate() {
                o[i] += v;
            }
        }
        ledger::record_other(out.len() as u64);
        Ok(Var::from_op(out, Op::Add, vec![self.clone(), other.clone()]))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary_same_shape(other, "sub")?;
        let mut out = self.value().clone();
        {
            let o = out.as_mut_slice();
            for (i, &v) in other.value().as_slice().iter().enumerate() {
                o[i] -= v;
            }
        }
        ledger::record_other(out.len() as u64);
        Ok(Var::from_op(out, Op::Sub, vec![self.clone(), other.clone()]))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary_same_shape(other, "mul")?;
        let mut out = self.value().clone();
        {
            let o = out.as_mut_slice();
            for (i, &v) in other.value().as_slice().iter().enumerate() {
                o[i] *= v;
            }
        }
        ledger::record_other(out.len() as u64);
        Ok(Var::from_op(out, Op::Mul, vec![self.clone(), other.clone()]))
    }

    /// Adds a 1 x d row vector to every row.
    pub fn add_row_vec(&self, row: &Var) -> Result<Var> {
        if row.shape() != (1, self.cols()) {
            return Err(HrtError::Dim(format!(
                "add_row_vec: {:?} + {:?}",
                self.shape(),
                row.shape()
            )));
        }
        let mut out = self.value().clone();
        let d = self.cols();
        {
            let o = out.as_mut_slice();
            let rv = row.value().as_slice();
            for r in 0..self.rows() {
                for c in 0..d {
                    o[r * d + c] += rv[c];
                }
            }
        }
        ledger::record_other(out.len() as u64);
        Ok(Var::from_op(out, Op::AddRowVec, vec![self.clone(), row.clone()]))
    }

    /// Multiplies row r by the scalar in column vector entry (r, 0).
    pub fn mul_col_vec(&self, col: &Var) -> Result<Var> {
        if col.shape() != (self.rows(), 1) {
            return Err(HrtError::Dim(format!(
                "mul_col_vec: {:?} * {:?}",
                self.shape(),
                col.shape()
            )));
        }
        let mut out = self.value().clone();
        let d = self.cols();
        {
            let o = out.as_mut_slice();
            let cv = col.value().as_slice();
            for r in 0..self.rows() {
                for c in 0..d {
                    o[r * d + c] *= cv[r];
                }
            }
        }
        ledger::record_other(out.len() as u64);
        Ok(Var::from_op(out, Op::MulColVec, vec![self.clone(), col.clone()]))
    }

    /// Multiplies every element by a differentiable 1x1 scalar.
    pub fn mul_scalar_var(&self, s: &Var) -> Result<Var> {
        if s.shape() != (1, 1) {
            return Err(HrtError::Dim(format!("mul_scalar_var: scalar is {:?}", s.shape())));
        }
        let k = s.value().item();
        let mut out = self.value().clone();
        for v in out.as_mut_slice() {
            *v *= k;
        }
        ledger::record_other(out.len() as u64);
        Ok(Var::from_op(out, Op::MulScalar, vec![self.clone(), s.clone()]))
    }

    /// Multiplies by a compile-time constant.
    pub fn scale(&self, k: f64) -> Result<Var> {
        let mut out = self.value().clone();
        for v in out.as_mut_slice() {
            *v *= k;
        }
        ledger::record_other(out.len() as u64);
        Ok(Var::from_op(out, Op::Scale(k), vec![self.clone()]))
    }

    /// Inverted dropout: zeroes each element with probability `p` and
    /// scales survivors by 1/(1-p). Identity when `training` is false or
    /// `p == 0`. The sampled mask is reused in the backward pass.
    pub fn dropout<R: rand::Rng>(&self, p: f64, rng: &mut R, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(HrtError::Config(format!("dropout p must be in [0, 1), got {p}")));
        }
        if !training || p == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 / (1.0 - p);
        let x = self.value();
        let mut mask = Tensor::zeros(x.rows(), x.cols());
        let mut out = Tensor::zeros(x.rows(), x.cols());
        {
            let mv = mask.as_mut_slice();
            let ov = out.as_mut_slice();
            for (i, &v) in x.as_slice().iter().enumerate() {
                if rng.random::<f64>() >= p {
                    mv[i] = keep;
                    ov[i] = v * keep;
                }
            }
        }
        ledger::record_other(x.len() as u64);
        Ok(Var::from_op(out, Op::Dropout { mask }, vec![self.clone()]))
    }

    /// Selects rows by index (embedding lookup, even/odd de-interleave,
    /// nearest-neighbor upsampling). Backward scatter-adds.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var> {
        let (m, d) = self.shape();
        for &i in indices {
            if i >= m {
                return Err(HrtError::Input(format!(
                    "gather_rows: index {i} out of range for {m} rows"
                )));
            }
        }
        let mut out = Tensor::zeros(indices.len(), d);
        for (r, &i) in indices.iter().enumerate() {
            out.as_mut_slice()[r * d..(r + 1) * d].copy_from_slice(self.value().row(i));
        }
        Ok(Var::from_op(
            out,
            Op::GatherRows {
                indices: Rc::new(indices.to_vec()),
            },
            vec![self.clone()],
        ))
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Var> {
        if rows * cols != self.value().len() {
            return Err(HrtError::Dim(format!(
                "reshape: {:?} -> {}x{}",
                self.shape(),
                rows,
                cols
            )));
        }
        let out = self.value().reshaped(rows, cols);
        Ok(Var::from_op(out, Op::Reshape, vec![self.clone()]))
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn concat_cols(&self, other: &Var) -> Result<Var> {
        if self.rows() != other.rows() {
            return Err(HrtError::Dim(format!(
                "concat_cols: {:?} | {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let (m, d1) = self.shape();
        let d2 = other.cols();
        let mut out = Tensor::zeros(m, d1 + d2);
        for r in 0..m {
            let orow = &mut out.as_mut_slice()[r * (d1 + d2)..(r + 1) * (d1 + d2)];
            orow[..d1].copy_from_slice(self.value().row(r));
            orow[d1..].copy_from_slice(other.value().row(r));
        }
        Ok(Var::from_op(out, Op::ConcatCols, vec![self.clone(), other.clone()]))
    }

    /// Vertical concatenation of any number of same-width blocks.
    pub fn concat_rows(parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| HrtError::Dim("concat_rows: empty input".into()))?;
        let d = first.cols();
        let mut total = 0;
        for p in parts {
            if p.cols() != d {
                return Err(HrtError::Dim(format!(
                    "concat_rows: width {} vs {}",
                    p.cols(),
                    d
                )));
            }
            total += p.rows();
        }
        let mut out = Tensor::zeros(total, d);
        let mut r0 = 0;
        for p in parts {
            let n = p.rows() * d;
            out.as_mut_slice()[r0..r0 + n].copy_from_slice(p.value().as_slice());
            r0 += n;
        }
        Ok(Var::from_op(out, Op::ConcatRows, parts.to_vec()))
    }

    /// Sum of all elements, as a 1x1 tensor.
    pub fn sum(&self) -> Result<Var> {
        let s: f64 = self.value().as_slice().iter().sum();
        ledger::record_other(self.value().len() as u64);
        Ok(Var::from_op(Tensor::scalar(s), Op::Sum, vec![self.clone()]))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse-mode sweep from a scalar output. Gradients of intermediate
    /// nodes are dropped as soon as they have been propagated; leaf
    /// gradients accumulate until `zero_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.value().len() != 1 {
            return Err(HrtError::Dim(format!(
                "backward requires a scalar output, got {:?}",
                self.shape()
            )));
        }
        if !self.0.requires_grad {
            return Ok(());
        }
        // Iterative post-order DFS for a reverse topological order.
        let mut topo: Vec<Var> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Var, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.0.id);
        while let Some((node, child)) = stack.pop() {
            let parents = &node.0.parents;
            let mut advanced = false;
            let mut i = child;
            while i < parents.len() {
                let p = &parents[i];
                if p.0.requires_grad && !visited.contains(&p.0.id) {
                    visited.insert(p.0.id);
                    stack.push((node.clone(), i + 1));
                    stack.push((p.clone(), 0));
                    advanced = true;
                    break;
                }
                i += 1;
            }
            if !advanced {
                topo.push(node);
            }
        }

        self.accum_grad(Tensor::scalar(1.0));
        for node in topo.iter().rev() {
            let grad = if matches!(node.0.op, Op::Leaf) {
                match node.0.grad.borrow().as_ref() {
                    Some(g) => g.clone(),
                    None => continue,
                }
            } else {
                match node.0.grad.borrow_mut().take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            node.propagate(&grad)?;
        }
        Ok(())
    }

    fn propagate(&self, dy: &Tensor) -> Result<()> {
        let n = &*self.0;
        let ps = &n.parents;
        match &n.op {
            Op::Leaf => {}
            Op::Matmul => {
                let (a, b) = (&ps[0], &ps[1]);
                if a.requires_grad() {
                    a.accum_grad(raw::matmul_nt(dy, b.value()));
                }
                if b.requires_grad() {
                    b.accum_grad(raw::matmul_tn(a.value(), dy));
                }
            }
            Op::MatmulNT => {
                let (a, b) = (&ps[0], &ps[1]);
                if a.requires_grad() {
                    a.accum_grad(raw::matmul(dy, b.value()));
                }
                if b.requires_grad() {
                    b.accum_grad(raw::matmul_tn(dy, a.value()));
                }
            }
            Op::SoftmaxRows => {
                let y = &n.data;
                let (m, c) = y.shape();
                let mut dx = Tensor::zeros(m, c);
                for r in 0..m {
                    let yr = y.row(r);
                    let gr = dy.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let dxr = &mut dx.as_mut_slice()[r * c..(r + 1) * c];
                    for j in 0..c {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                ps[0].accum_grad(dx);
            }
            Op::LogSoftmaxRows => {
                let y = &n.data;
                let (m, c) = y.shape();
                let mut dx = Tensor::zeros(m, c);
                for r in 0..m {
                    let yr = y.row(r);
                    let gr = dy.row(r);
                    let gsum: f64 = gr.iter().sum();
                    let dxr = &mut dx.as_mut_slice()[r * c..(r + 1) * c];
                    for j in 0..c {
                        dxr[j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                ps[0].accum_grad(dx);
            }
            Op::LayerNorm { xhat, inv_std } => {
                let (x, gain, bias) = (&ps[0], &ps[1], &ps[2]);
                let (m, d) = xhat.shape();
                let gv = gain.value().as_slice();
                if bias.requires_grad() {
                    let mut db = Tensor::zeros(1, d);
                    for r in 0..m {
                        for c in 0..d {
                            db.as_mut_slice()[c] += dy.get(r, c);
                        }
                    }
                    bias.accum_grad(db);
                }
                if gain.requires_grad() {
                    let mut dg = Tensor::zeros(1, d);
                    for r in 0..m {
                        for c in 0..d {
                            dg.as_mut_slice()[c] += dy.get(r, c) * xhat.get(r, c);
                        }
                    }
                    gain.accum_grad(dg);
                }
                if x.requires_grad() {
                    let mut dx = Tensor::zeros(m, d);
                    for r in 0..m {
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for c in 0..d {
                            let dxh = dy.get(r, c) * gv[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhat.get(r, c);
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for c in 0..d {
                            let dxh = dy.get(r, c) * gv[c];
                            dx.set(
                                r,
                                c,
                                inv_std[r] * (dxh - mean_dxh - xhat.get(r, c) * mean_dxh_xh),
                            );
                        }
                    }
                    x.accum_grad(dx);
                }
            }
            Op::Pointwise(kind) => {
                let x = ps[0].value();
                let y = &n.data;
                let mut dx = Tensor::zeros(x.rows(), x.cols());
                {
                    let d = dx.as_mut_slice();
                    for i in 0..d.len() {
                        let xi = x.as_slice()[i];
                        let gi = dy.as_slice()[i];
                        d[i] = gi
                            * match kind {
                                Pointwise::Relu => {
                                    if xi > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Pointwise::Gelu => {
                                    let phi = 0.5
                                        * (1.0 + libm::erf(xi / std::f64::consts::SQRT_2));
                                    let pdf = (-0.5 * xi * xi).exp()
                                        / (2.0 * std::f64::consts::PI).sqrt();
                                    phi + xi * pdf
                                }
                                Pointwise::Sigmoid => {
                                    let yi = y.as_slice()[i];
                                    yi * (1.0 - yi)
                                }
                            };
                    }
                }
                ps[0].accum_grad(dx);
            }
            Op::Add => {
                if ps[0].requires_grad() {
                    ps[0].accum_grad(dy.clone());
                }
                if ps[1].requires_grad() {
                    ps[1].accum_grad(dy.clone());
                }
            }
            Op::Sub => {
                if ps[0].requires_grad() {
                    ps[0].accum_grad(dy.clone());
                }
                if ps[1].requires_grad() {
                    let mut neg = dy.clone();
                    for v in neg.as_mut_slice() {
                        *v = -*v;
                    }
                    ps[1].accum_grad(neg);
                }
            }
            Op::Mul => {
                if ps[0].requires_grad() {
                    let mut d = dy.clone();
                    for (v, &b) in d.as_mut_slice().iter_mut().zip(ps[1].value().as_slice()) {
                        *v *= b;
                    }
                    ps[0].accum_grad(d);
                }
                if ps[1].requires_grad() {
                    let mut d = dy.clone();
                    for (v, &a) in d.as_mut_slice().iter_mut().zip(ps[0].value().as_slice()) {
                        *v *= a;
                    }
                    ps[1].accum_grad(d);
                }
            }
            Op::AddRowVec => {
                let (m, d) = n.data.shape();
                if ps[0].requires_grad() {
                    ps[0].accum_grad(dy.clone());
                }
                if ps[1].requires_grad() {
                    let mut db = Tensor::zeros(1, d);
                    for r in 0..m {
                        for c in 0..d {
                            db.as_mut_slice()[c] += dy.get(r, c);
                        }
                    }
                    ps[1].accum_grad(db);
                }
            }
            Op::MulColVec => {
                let (m, d) = n.data.shape();
                let a = ps[0].value();
                let cvec = ps[1].value();
                if ps[0].requires_grad() {
                    let mut da = Tensor::zeros(m, d);
                    for r in 0..m {
                        for c in 0..d {
                            da.set(r, c, dy.get(r, c) * cvec.get(r, 0));
                        }
                    }
                    ps[0].accum_grad(da);
                }
                if ps[1].requires_grad() {
                    let mut dc = Tensor::zeros(m, 1);
                    for r in 0..m {
                        let mut acc = 0.0;
                        for c in 0..d {
                            acc += dy.get(r, c) * a.get(r, c);
                        }
                        dc.set(r, 0, acc);
                    }
                    ps[1].accum_grad(dc);
                }
            }
            Op::MulScalar => {
                let a = ps[0].value();
                let k = ps[1].value().item();
                if ps[0].requires_grad() {
                    let mut da = dy.clone();
                    for v in da.as_mut_slice() {
                        *v *= k;
                    }
                    ps[0].accum_grad(da);
                }
                if ps[1].requires_grad() {
                    let ds: f64 = dy
                        .as_slice()
                        .iter()
                        .zip(a.as_slice())
                        .map(|(g, v)| g * v)
                        .sum();
                    ps[1].accum_grad(Tensor::scalar(ds));
                }
            }
            Op::Scale(k) => {
                let mut da = dy.clone();
                for v in da.as_mut_slice() {
                    *v *= k;
                }
                ps[0].accum_grad(da);
            }
            Op::Dropout { mask } => {
                let mut da = dy.clone();
                for (v, &m) in da.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                    *v *= m;
                }
                ps[0].accum_grad(da);
            }
            Op::GatherRows { indices } => {
                let (m, d) = ps[0].shape();
                let mut da = Tensor::zeros(m, d);
                for (r, &i) in indices.iter().enumerate() {
                    let src = dy.row(r);
                    let dst = &mut da.as_mut_slice()[i * d..(i + 1) * d];
                    for c in 0..d {
                        dst[c] += src[c];
                    }
                }
                ps[0].accum_grad(da);
            }
            Op::Reshape => {
                let (m, d) = ps[0].shape();
                ps[0].accum_grad(dy.reshaped(m, d));
            }
            Op::ConcatCols => {
                let (m, d1) = ps[0].shape();
                let d2 = ps[1].cols();
                if ps[0].requires_grad() {
                    let mut da = Tensor::zeros(m, d1);
                    for r in 0..m {
                        da.as_mut_slice()[r * d1..(r + 1) * d1]
                            .copy_from_slice(&dy.row(r)[..d1]);
                    }
                    ps[0].accum_grad(da);
                }
                if ps[1].requires_grad() {
                    let mut db = Tensor::zeros(m, d2);
                    for r in 0..m {
                        db.as_mut_slice()[r * d2..(r + 1) * d2]
                            .copy_from_slice(&dy.row(r)[d1..]);
                    }
                    ps[1].accum_grad(db);
                }
            }
            Op::ConcatRows => {
                let d = n.data.cols();
                let mut r0 = 0;
                for p in ps {
                    let rows = p.rows();
                    if p.requires_grad() {
                        let mut dp = Tensor::zeros(rows, d);
                        dp.as_mut_slice()
                            .copy_from_slice(&dy.as_slice()[r0 * d..(r0 + rows) * d]);
                        p.accum_grad(dp);
                    }
                    r0 += rows;
                }
            }
            Op::Sum => {
                let g = dy.item();
                let (m, d) = ps[0].shape();
                ps[0].accum_grad(Tensor::full(m, d, g));
            }
        }
        Ok(())
    }
}
