//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! A [`Tape`] owns every intermediate value produced while it is alive.
//! [`Var`] is a cheap handle into it. Leaves created with [`Tape::leaf`]
//! receive gradients; constants never do, and neither does anything computed
//! purely from constants.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{DiffError, Result};
use crate::linalg::{self, SymmetricEigen};
use crate::tensor::{broadcast, matmul_dims, zip_broadcast, Broadcast, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(usize, usize),
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Relu(usize),
    Softplus(usize),
    Sqrt(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    Transpose(usize),
    Reshape(usize),
    SliceLast { src: usize, start: usize },
    ConcatLast(Vec<usize>),
    GatherLast { src: usize, index: Rc<[usize]> },
    LogDetSym { src: usize, eig: Rc<Vec<SymmetricEigen>>, floor: f64 },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Single-writer record of operations.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
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
        f.debug_struct("Var")
            .field("tape", &self.tape.id)
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of a scalar root with respect to every leaf that influenced it.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape_id: u64,
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `leaf`, or `None` for constants and leaves the root does
    /// not depend on.
    pub fn get(&self, leaf: Var<'_>) -> Option<&Tensor> {
        if leaf.tape.id != self.tape_id {
            return None;
        }
        self.leaves.get(leaf.id).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but yields zeros shaped like `leaf` when the
    /// root does not depend on it.
    pub fn wrt(&self, leaf: Var<'_>) -> Tensor {
        self.get(leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&leaf.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Records a value that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Const, false)
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Concatenates along the last axis; all leading shapes must agree.
    pub fn concat_last<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| DiffError::Contract("concat_last of zero tensors".into()))?;
        let lead = first.shape()[..first.shape().len().saturating_sub(1)].to_vec();
        let mut values = Vec::with_capacity(parts.len());
        for p in parts {
            self.check_same(*p)?;
            let v = p.value();
            let s = v.shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(DiffError::dims("concat_last", &first.shape(), s));
            }
            values.push(v);
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = values.iter().map(|v| v.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let needs = parts.iter().any(|p| self.needs_grad(p.id));
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::ConcatLast(parts.iter().map(|p| p.id).collect()),
            needs,
        ))
    }

    fn check_same(&self, v: Var<'_>) -> Result<()> {
        if v.tape.id != self.id {
            return Err(DiffError::Contract(format!(
                "operand belongs to tape {} but was used on tape {}",
                v.tape.id, self.id
            )));
        }
        Ok(())
    }

    /// Replays the record backwards from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        self.check_same(root)?;
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.len() != 1 {
            return Err(DiffError::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Const => {}
                Op::MatMul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let (m, k, n) = matmul_dims(av.shape(), bv.shape())?;
                    if nodes[*a].needs_grad {
                        let buf = slot(&mut grads, *a, m * k);
                        linalg::gemm(m, n, k, &g, false, bv.data(), true, buf, 1.0);
                    }
                    if nodes[*b].needs_grad {
                        let buf = slot(&mut grads, *b, k * n);
                        linalg::gemm(k, m, n, av.data(), true, &g, false, buf, 1.0);
                    }
                }
                Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    accumulate_broadcast(&nodes, &mut grads, *a, *kind, true, &g, |_, gi| gi);
                    accumulate_broadcast(&nodes, &mut grads, *b, *kind, false, &g, |_, gi| {
                        sign * gi
                    });
                }
                Op::Mul(a, b, kind) => {
                    let av = Rc::clone(&nodes[*a].value);
                    let bv = Rc::clone(&nodes[*b].value);
                    let (ad, bd) = (av.data(), bv.data());
                    // output index i pairs a[ia(i)] with b[ib(i)]
                    let (na, nb) = (ad.len(), bd.len());
                    accumulate_broadcast(&nodes, &mut grads, *a, *kind, true, &g, |i, gi| {
                        gi * bd[i % nb]
                    });
                    accumulate_broadcast(&nodes, &mut grads, *b, *kind, false, &g, |i, gi| {
                        gi * ad[i % na]
                    });
                }
                Op::Neg(a) => unary(&nodes, &mut grads, *a, |i, _| -g[i]),
                Op::Scale(a, k) => unary(&nodes, &mut grads, *a, |i, _| g[i] * k),
                Op::AddScalar(a) => unary(&nodes, &mut grads, *a, |i, _| g[i]),
                Op::Exp(a) => {
                    let o = out.data();
                    unary(&nodes, &mut grads, *a, |i, _| g[i] * o[i])
                }
                Op::Log(a) => unary(&nodes, &mut grads, *a, |i, x| g[i] / x),
                Op::Tanh(a) => {
                    let o = out.data();
                    unary(&nodes, &mut grads, *a, |i, _| g[i] * (1.0 - o[i] * o[i]))
                }
                Op::Relu(a) => unary(&nodes, &mut grads, *a, |i, x| {
                    if x > 0.0 {
                        g[i]
                    } else {
                        0.0
                    }
                }),
                Op::Softplus(a) => {
                    unary(&nodes, &mut grads, *a, |i, x| g[i] * sigmoid(x))
                }
                Op::Sqrt(a) => {
                    let o = out.data();
                    unary(&nodes, &mut grads, *a, |i, _| g[i] * 0.5 / o[i])
                }
                Op::Square(a) => unary(&nodes, &mut grads, *a, |i, x| g[i] * 2.0 * x),
                Op::Sum(a) => {
                    let g0 = g[0];
                    unary(&nodes, &mut grads, *a, |_, _| g0)
                }
                Op::Mean(a) => {
                    let n = nodes[*a].value.len() as f64;
                    let g0 = g[0] / n;
                    unary(&nodes, &mut grads, *a, |_, _| g0)
                }
                Op::SumLast(a) => {
                    let c = nodes[*a].value.cols();
                    unary(&nodes, &mut grads, *a, |i, _| g[i / c])
                }
                Op::Transpose(a) => {
                    if nodes[*a].needs_grad {
                        let s = nodes[*a].value.shape().to_vec();
                        let (r, c) = (s[0], s[1]);
                        let buf = slot(&mut grads, *a, r * c);
                        for i in 0..r {
                            for j in 0..c {
                                buf[i * c + j] += g[j * r + i];
                            }
                        }
                    }
                }
                Op::Reshape(a) => unary(&nodes, &mut grads, *a, |i, _| g[i]),
                Op::SliceLast { src, start } => {
                    if nodes[*src].needs_grad {
                        let src_cols = nodes[*src].value.cols();
                        let src_len = nodes[*src].value.len();
                        let w = out.cols();
                        let buf = slot(&mut grads, *src, src_len);
                        for (i, gi) in g.iter().enumerate() {
                            let (r, c) = (i / w, i % w);
                            buf[r * src_cols + start + c] += gi;
                        }
                    }
                }
                Op::ConcatLast(parts) => {
                    let total = out.cols();
                    let rows = out.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p].value.cols();
                        if nodes[p].needs_grad {
                            let buf = slot(&mut grads, p, rows * w);
                            for r in 0..rows {
                                for c in 0..w {
                                    buf[r * w + c] += g[r * total + offset + c];
                                }
                            }
                        }
                        offset += w;
                    }
                }
                Op::GatherLast { src, index } => {
                    if nodes[*src].needs_grad {
                        let src_cols = nodes[*src].value.cols();
                        let src_len = nodes[*src].value.len();
                        let w = index.len();
                        let buf = slot(&mut grads, *src, src_len);
                        for (i, gi) in g.iter().enumerate() {
                            let (r, c) = (i / w, i % w);
                            buf[r * src_cols + index[c]] += gi;
                        }
                    }
                }
                Op::LogDetSym { src, eig, floor } => {
                    if nodes[*src].needs_grad {
                        let s = nodes[*src].value.shape();
                        let d = s[s.len() - 1];
                        let buf = slot(&mut grads, *src, nodes[*src].value.len());
                        for (b, e) in eig.iter().enumerate() {
                            let block = &mut buf[b * d * d..(b + 1) * d * d];
                            for i in 0..d {
                                for j in 0..d {
                                    let mut acc = 0.0;
                                    for k in 0..d {
                                        if e.values[k] > *floor {
                                            acc += e.vectors[i * d + k] * e.vectors[j * d + k]
                                                / e.values[k];
                                        }
                                    }
                                    block[i * d + j] += g[b] * acc;
                                }
                            }
                        }
                    }
                }
            }
        }

        let leaves = nodes
            .iter()
            .enumerate()
            .map(|(id, n)| match (&n.op, grads.get_mut(id)) {
                (Op::Leaf, Some(g)) => g.take().map(|data| {
                    Tensor::new(n.value.shape().to_vec(), data).expect("gradient shape")
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape_id: self.id,
            leaves,
        })
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn unary(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    a: usize,
    f: impl Fn(usize, f64) -> f64,
) {
    if !nodes[a].needs_grad {
        return;
    }
    let x = nodes[a].value.data();
    let buf = slot(grads, a, x.len());
    for (i, b) in buf.iter_mut().enumerate() {
        *b += f(i, x[i]);
    }
}

/// Routes an output gradient back to one operand of a broadcasting binary op,
/// summing over the axes along which that operand was repeated.
fn accumulate_broadcast(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    operand: usize,
    kind: Broadcast,
    is_lhs: bool,
    g: &[f64],
    f: impl Fn(usize, f64) -> f64,
) {
    if !nodes[operand].needs_grad {
        return;
    }
    let len = nodes[operand].value.len();
    let buf = slot(grads, operand, len);
    let repeated = matches!(
        (kind, is_lhs),
        (Broadcast::Rhs(_), false) | (Broadcast::Lhs(_), true)
    );
    if repeated {
        for (i, &gi) in g.iter().enumerate() {
            buf[i % len] += f(i, gi);
        }
    } else {
        for (i, &gi) in g.iter().enumerate() {
            buf[i] += f(i, gi);
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value; panics only when called on an empty tensor.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs_grad(self.id)
    }

    fn unary_op(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value();
        let needs = self.requires_grad();
        self.tape.push(v.map(f), op, needs)
    }

    fn binary_op(
        self,
        other: Var<'t>,
        name: &'static str,
        make: impl Fn(usize, usize, Broadcast) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.tape.check_same(other)?;
        let (a, b) = (self.value(), other.value());
        let kind = broadcast(name, a.shape(), b.shape())?;
        let shape = match kind {
            Broadcast::Lhs(_) => b.shape().to_vec(),
            _ => a.shape().to_vec(),
        };
        let data = zip_broadcast(kind, a.data(), b.data(), f);
        let needs = self.requires_grad() || other.requires_grad();
        Ok(self
            .tape
            .push(Tensor::new(shape, data)?, make(self.id, other.id, kind), needs))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.check_same(other)?;
        let out = self.value().matmul(&other.value())?;
        let needs = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id), needs))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary_op(Op::Neg(self.id), |x| -x)
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.unary_op(Op::Scale(self.id, k), |x| x * k)
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        self.unary_op(Op::AddScalar(self.id), |x| x + k)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary_op(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary_op(Op::Log(self.id), f64::ln)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary_op(Op::Tanh(self.id), f64::tanh)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary_op(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary_op(Op::Softplus(self.id), softplus)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary_op(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn square(self) -> Var<'t> {
        self.unary_op(Op::Square(self.id), |x| x * x)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum();
        self.tape
            .push(Tensor::scalar(s), Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(self) -> Var<'t> {
        let s = self.value().mean();
        self.tape
            .push(Tensor::scalar(s), Op::Mean(self.id), self.requires_grad())
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(self) -> Var<'t> {
        let v = self.value();
        let c = v.cols();
        let data: Vec<f64> = v.data().chunks(c.max(1)).map(|r| r.iter().sum()).collect();
        let shape = v.shape()[..v.shape().len().saturating_sub(1)].to_vec();
        let t = Tensor::new(shape, data).expect("sum_last shape");
        self.tape.push(t, Op::SumLast(self.id), self.requires_grad())
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let t = self.value().transpose()?;
        Ok(self
            .tape
            .push(t, Op::Transpose(self.id), self.requires_grad()))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let t = self.value().reshape(shape)?;
        Ok(self.tape.push(t, Op::Reshape(self.id), self.requires_grad()))
    }

    /// Columns `[start, end)` of the last axis.
    pub fn slice_last(self, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.value();
        let c = v.cols();
        if start > end || end > c || v.shape().is_empty() {
            return Err(DiffError::Contract(format!(
                "slice [{start}, {end}) out of range for shape {:?}",
                v.shape()
            )));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(v.rows() * w);
        for r in 0..v.rows() {
            data.extend_from_slice(&v.data()[r * c + start..r * c + end]);
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = w;
        Ok(self.tape.push(
            Tensor::new(shape, data)?,
            Op::SliceLast {
                src: self.id,
                start,
            },
            self.requires_grad(),
        ))
    }

    /// Selects entries of the last axis by index (repeats allowed).
    pub fn gather_last(self, index: Rc<[usize]>) -> Result<Var<'t>> {
        let v = self.value();
        let c = v.cols();
        if let Some(&bad) = index.iter().find(|&&i| i >= c) {
            return Err(DiffError::Contract(format!(
                "gather index {bad} out of range for last axis of {:?}",
                v.shape()
            )));
        }
        let mut data = Vec::with_capacity(v.rows() * index.len());
        for r in 0..v.rows() {
            let row = &v.data()[r * c..(r + 1) * c];
            data.extend(index.iter().map(|&i| row[i]));
        }
        let mut shape = v.shape().to_vec();
        if shape.is_empty() {
            shape.push(index.len());
        } else {
            *shape.last_mut().unwrap() = index.len();
        }
        Ok(self.tape.push(
            Tensor::new(shape, data)?,
            Op::GatherLast {
                src: self.id,
                index,
            },
            self.requires_grad(),
        ))
    }

    /// `log|det|` of each trailing `d×d` block, computed as the sum of log
    /// eigenvalues clamped below at `floor`.
    pub fn logdet_sym(self, floor: f64) -> Result<Var<'t>> {
        let v = self.value();
        let s = v.shape();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(DiffError::Contract(format!(
                "logdet_sym needs trailing square blocks, got {s:?}"
            )));
        }
        let d = s[s.len() - 1];
        let lead = s[..s.len() - 2].to_vec();
        let mut eig = Vec::new();
        let mut out = Vec::new();
        for block in v.data().chunks(d * d) {
            let e = linalg::symmetric_eigen(block, d);
            out.push(e.values.iter().map(|l| l.max(floor).ln()).sum());
            eig.push(e);
        }
        Ok(self.tape.push(
            Tensor::new(lead, out)?,
            Op::LogDetSym {
                src: self.id,
                eig: Rc::new(eig),
                floor,
            },
            self.requires_grad(),
        ))
    }
}
