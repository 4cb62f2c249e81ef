//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of a forward pass in issue order, which
//! is already a topological order of the computation graph. [`Var::backward`]
//! walks the records once in reverse and accumulates vector-Jacobian products
//! into per-node gradient buffers. Gradients are only materialized for nodes
//! that can reach a differentiable leaf; constants never get a buffer.
//!
//! Calling `backward` twice on the same output rebuilds the buffers from
//! scratch, so repeated calls yield identical gradients.
//!
//! A tape is single-threaded; distinct tapes are independent and may run on
//! distinct threads.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Exp(usize),
    Ln(usize),
    Tanh(usize),
    SoftmaxRows(usize),
    SoftmaxCols(usize),
    LogSoftmaxRows(usize),
    Outer(usize, usize),
    Sum(usize),
    Mean(usize),
    RowSums(usize),
    ColSums(usize),
    RowMeans(usize),
    ColMeans(usize),
    MaxWith(usize, f64),
    GatherRows(usize, Vec<usize>),
    ConcatRows(usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var { tape: self, id }
    }

    /// A differentiable leaf (a trainable parameter).
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable leaf. No gradient is ever materialized for it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        let nodes = self.tape.nodes.borrow();
        nodes[self.id].value.shape()
    }

    pub fn scalar_value(&self) -> Result<f64> {
        self.value().as_scalar()
    }

    fn same_tape(&self, rhs: &Var<'t>) -> Result<()> {
        if !std::ptr::eq(self.tape, rhs.tape) {
            return Err(Error::contract("vars belong to different tapes"));
        }
        Ok(())
    }

    fn unary(
        &self,
        f: impl FnOnce(&Tensor) -> Result<Tensor>,
        op: impl FnOnce(usize) -> Op,
    ) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value)?
        };
        let needs = self.tape.needs(self.id);
        Ok(self.tape.push(value, op(self.id), needs))
    }

    fn binary(
        &self,
        rhs: &Var<'t>,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        self.same_tape(rhs)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[rhs.id].value)?
        };
        let needs = self.tape.needs(self.id) || self.tape.needs(rhs.id);
        Ok(self.tape.push(value, op(self.id, rhs.id), needs))
    }

    pub fn matmul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, |a, b| a.matmul(b), Op::Matmul)
    }

    pub fn t(&self) -> Result<Var<'t>> {
        self.unary(|a| Ok(a.transpose()), Op::Transpose)
    }

    pub fn add(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, |a, b| a.add(b), Op::Add)
    }

    pub fn sub(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, |a, b| a.sub(b), Op::Sub)
    }

    pub fn mul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, |a, b| a.hadamard(b), Op::Mul)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.unary(|a| Ok(a.add_scalar(c)), Op::AddScalar)
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.unary(|a| Ok(a.scale(c)), |id| Op::MulScalar(id, c))
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary(|a| Ok(a.exp()), Op::Exp)
    }

    pub fn ln(&self) -> Result<Var<'t>> {
        self.unary(|a| a.ln(), Op::Ln)
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.unary(|a| Ok(a.tanh()), Op::Tanh)
    }

    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        self.unary(|a| Ok(a.softmax_rows()), Op::SoftmaxRows)
    }

    pub fn softmax_cols(&self) -> Result<Var<'t>> {
        self.unary(|a| Ok(a.softmax_cols()), Op::SoftmaxCols)
    }

    pub fn log_softmax_rows(&self) -> Result<Var<'t>> {
        self.unary(|a| Ok(a.log_softmax_rows()), Op::LogSoftmaxRows)
    }

    pub fn outer(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, |a, b| a.outer(b), Op::Outer)
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        self.unary(|a| Ok(Tensor::scalar(a.sum())), Op::Sum)
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        self.unary(|a| Ok(Tensor::scalar(a.mean())), Op::Mean)
    }

    pub fn row_sums(&self) -> Result<Var<'t>> {
        self.unary(|a| Ok(a.row_sums()), Op::RowSums)
    }

    pub fn col_sums(&self) -> Result<Var<'t>> {
        self.unary(|a| Ok(a.col_sums()), Op::ColSums)
    }

    pub fn row_means(&self) -> Result<Var<'t>> {
        self.unary(|a| Ok(a.row_means()), Op::RowMeans)
    }

    pub fn col_means(&self) -> Result<Var<'t>> {
        self.unary(|a| Ok(a.col_means()), Op::ColMeans)
    }

    pub fn max_with(&self, c: f64) -> Result<Var<'t>> {
        self.unary(|a| Ok(a.max_with(c)), |id| Op::MaxWith(id, c))
    }

    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var<'t>> {
        let idx = indices.to_vec();
        self.unary(|a| a.gather_rows(indices), |id| Op::GatherRows(id, idx))
    }

    pub fn concat_rows(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, |a, b| a.concat_rows(b), Op::ConcatRows)
    }

    /// Reverse pass from this (scalar) variable.
    pub fn backward(&self) -> Result<Gradients> {
        let nodes = self.tape.nodes.borrow();
        if nodes[self.id].value.numel() != 1 {
            let (r, c) = nodes[self.id].value.shape();
            return Err(Error::contract(format!(
                "backward requires a scalar output, got {r}x{c}"
            )));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if nodes[self.id].needs_grad {
            grads[self.id] = Some(Tensor::scalar(1.0));
        }

        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop(node, &g, &nodes, &mut grads)?;
            // Leaf gradients are the result; re-store them.
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        Ok(Gradients { grads })
    }
}

/// Accumulate `delta` into the gradient slot of node `id` if it participates
/// in differentiation.
fn accum(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, delta: Tensor) -> Result<()> {
    if !nodes[id].needs_grad {
        return Ok(());
    }
    match &mut grads[id] {
        Some(g) => *g = g.add(&delta)?,
        slot @ None => *slot = Some(delta),
    }
    Ok(())
}

fn backprop(node: &Node, g: &Tensor, nodes: &[Node], grads: &mut [Option<Tensor>]) -> Result<()> {
    match &node.op {
        Op::Leaf => {}
        Op::Matmul(a, b) => {
            let ga = g.matmul(&nodes[*b].value.transpose())?;
            let gb = nodes[*a].value.transpose().matmul(g)?;
            accum(grads, nodes, *a, ga)?;
            accum(grads, nodes, *b, gb)?;
        }
        Op::Transpose(a) => {
            accum(grads, nodes, *a, g.transpose())?;
        }
        Op::Add(a, b) => {
            accum(grads, nodes, *a, g.clone())?;
            accum(grads, nodes, *b, g.clone())?;
        }
        Op::Sub(a, b) => {
            accum(grads, nodes, *a, g.clone())?;
            accum(grads, nodes, *b, g.scale(-1.0))?;
        }
        Op::Mul(a, b) => {
            accum(grads, nodes, *a, g.hadamard(&nodes[*b].value)?)?;
            accum(grads, nodes, *b, g.hadamard(&nodes[*a].value)?)?;
        }
        Op::AddScalar(a) => {
            accum(grads, nodes, *a, g.clone())?;
        }
        Op::MulScalar(a, c) => {
            accum(grads, nodes, *a, g.scale(*c))?;
        }
        Op::Exp(a) => {
            accum(grads, nodes, *a, g.hadamard(&node.value)?)?;
        }
        Op::Ln(a) => {
            let inv = nodes[*a].value.map(|v| 1.0 / v);
            accum(grads, nodes, *a, g.hadamard(&inv)?)?;
        }
        Op::Tanh(a) => {
            let d = node.value.map(|t| 1.0 - t * t);
            accum(grads, nodes, *a, g.hadamard(&d)?)?;
        }
        Op::SoftmaxRows(a) => {
            accum(grads, nodes, *a, softmax_rows_backward(&node.value, g))?;
        }
        Op::SoftmaxCols(a) => {
            let s_t = node.value.transpose();
            let g_t = g.transpose();
            accum(
                grads,
                nodes,
                *a,
                softmax_rows_backward(&s_t, &g_t).transpose(),
            )?;
        }
        Op::LogSoftmaxRows(a) => {
            // dx_j = g_j - softmax_j * sum_k g_k  (per row)
            let s = node.value.exp();
            let mut out = g.clone();
            for r in 0..out.rows() {
                let total: f64 = g.row_slice(r).iter().sum();
                for c in 0..out.cols() {
                    let v = out.get(r, c) - s.get(r, c) * total;
                    out.set(r, c, v);
                }
            }
            accum(grads, nodes, *a, out)?;
        }
        Op::Outer(a, b) => {
            let u = &nodes[*a].value;
            let v = &nodes[*b].value;
            let (m, n) = g.shape();
            let mut gu = vec![0.0; m];
            let mut gv = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    gu[i] += g.get(i, j) * v.data()[j];
                    gv[j] += g.get(i, j) * u.data()[i];
                }
            }
            accum(grads, nodes, *a, reshape_like(u, gu))?;
            accum(grads, nodes, *b, reshape_like(v, gv))?;
        }
        Op::Sum(a) => {
            let (r, c) = nodes[*a].value.shape();
            accum(grads, nodes, *a, Tensor::filled(r, c, g.data()[0]))?;
        }
        Op::Mean(a) => {
            let (r, c) = nodes[*a].value.shape();
            let scale = g.data()[0] / (r * c) as f64;
            accum(grads, nodes, *a, Tensor::filled(r, c, scale))?;
        }
        Op::RowSums(a) | Op::RowMeans(a) => {
            let (r, c) = nodes[*a].value.shape();
            let denom = if matches!(node.op, Op::RowMeans(_)) {
                c as f64
            } else {
                1.0
            };
            let mut out = Tensor::zeros(r, c);
            for i in 0..r {
                let gi = g.data()[i] / denom;
                for j in 0..c {
                    out.set(i, j, gi);
                }
            }
            accum(grads, nodes, *a, out)?;
        }
        Op::ColSums(a) | Op::ColMeans(a) => {
            let (r, c) = nodes[*a].value.shape();
            let denom = if matches!(node.op, Op::ColMeans(_)) {
                r as f64
            } else {
                1.0
            };
            let mut out = Tensor::zeros(r, c);
            for i in 0..r {
                for j in 0..c {
                    out.set(i, j, g.data()[j] / denom);
                }
            }
            accum(grads, nodes, *a, out)?;
        }
        Op::MaxWith(a, c) => {
            let x = &nodes[*a].value;
            let masked = g.zip_with(x, |gi, xi| if xi > *c { gi } else { 0.0 });
            accum(grads, nodes, *a, masked)?;
        }
        Op::GatherRows(a, indices) => {
            let (r, c) = nodes[*a].value.shape();
            let mut out = Tensor::zeros(r, c);
            for (gr, &src) in indices.iter().enumerate() {
                for j in 0..c {
                    out.set(src, j, out.get(src, j) + g.get(gr, j));
                }
            }
            accum(grads, nodes, *a, out)?;
        }
        Op::ConcatRows(a, b) => {
            let ra = nodes[*a].value.rows();
            let idx_a: Vec<usize> = (0..ra).collect();
            let idx_b: Vec<usize> = (ra..g.rows()).collect();
            accum(grads, nodes, *a, g.gather_rows(&idx_a)?)?;
            accum(grads, nodes, *b, g.gather_rows(&idx_b)?)?;
        }
    }
    Ok(())
}

fn reshape_like(template: &Tensor, data: Vec<f64>) -> Tensor {
    let (r, c) = template.shape();
    Tensor::new(r, c, data).expect("gradient matches vector length")
}

/// dx = s * (g - <g, s>)  per row, where s is the softmax output.
fn softmax_rows_backward(s: &Tensor, g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(s.rows(), s.cols());
    for r in 0..s.rows() {
        let srow = s.row_slice(r);
        let grow = g.row_slice(r);
        let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
        for c in 0..s.cols() {
            out.set(r, c, srow[c] * (grow[c] - dot));
        }
    }
    out
}

/// Gradients produced by one reverse pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `var`, if one was materialized.
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }
}

/// Evaluates `f` at `params`, returning the scalar loss and one gradient per
/// parameter (zeros for parameters the loss does not depend on).
pub fn value_and_grad<F>(f: F, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: for<'t> FnOnce(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.input(p.clone())).collect();
    let out = f(&tape, &vars)?;
    let value = out.scalar_value().map_err(|_| {
        let (r, c) = out.shape();
        Error::contract(format!("loss must be scalar, got {r}x{c}"))
    })?;
    let grads = out.backward()?;
    let result = vars
        .iter()
        .zip(params)
        .map(|(v, p)| match grads.wrt(*v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(p.rows(), p.cols()),
        })
        .collect();
    Ok((value, result))
}

fn eval_value<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.constant(p.clone())).collect();
    f(&tape, &vars)?.scalar_value()
}

/// Identity helper that pins a closure to the loss-function signature used by
/// [`value_and_grad`] and [`finite_difference_check`].
pub fn loss_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    f
}

/// Per-parameter comparison of reverse-mode gradients against central finite
/// differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error per parameter: `|g_ad - g_fd| / max(1, |g_fd|)`.
    pub per_param: Vec<f64>,
    pub max_rel_err: f64,
}

/// Central-difference gradient check with step `epsilon in (0, 1e-2]`.
pub fn finite_difference_check<F>(f: &F, params: &[Tensor], epsilon: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::contract(format!(
            "epsilon must lie in (0, 1e-2], got {epsilon}"
        )));
    }
    let (_, ad_grads) = value_and_grad(|t, vs| f(t, vs), params)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    for (pi, grad) in ad_grads.iter().enumerate() {
        let mut worst = 0.0_f64;
        for i in 0..work[pi].numel() {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + epsilon;
            let plus = eval_value(f, &work)?;
            work[pi].data_mut()[i] = orig - epsilon;
            let minus = eval_value(f, &work)?;
            work[pi].data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * epsilon);
            let ad = grad.data()[i];
            let rel = (ad - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(rel);
        }
        per_param.push(worst);
    }
    let max_rel_err = per_param.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_err,
    })
}

impl Tensor {
    fn zip_with(&self, rhs: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::new(self.rows(), self.cols(), data).expect("same shape")
    }
}
