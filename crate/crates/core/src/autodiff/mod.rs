//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during the
//! forward pass. [`Tape::backward`] then walks the records in reverse order,
//! visiting each node once, and returns [`Gradients`] for every node that
//! depends on a trainable leaf.
//!
//! ```
//! use dfkit::autodiff::Tape;
//! use dfkit::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.leaf(Tensor::scalar(5.0));
//! let loss = x.mul(&y).unwrap();
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.wrt(&x).item(), 5.0);
//! assert_eq!(grads.wrt(&y).item(), 3.0);
//! ```
//!
//! A tape and its vars are confined to one thread; independent tapes may be
//! used from different threads concurrently.

mod broadcast;
mod check;
mod ops;

use std::cell::RefCell;
use std::rc::Rc;

pub use check::{gradient_check, jacobian, GradCheckReport};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

pub(crate) type NodeId = usize;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { input: NodeId, axis: usize, start: usize },
    GatherRows { input: NodeId, rows: Vec<usize> },
    Scatter { input: NodeId, positions: Vec<usize> },
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Sum(NodeId),
    SumAxis { input: NodeId, axis: usize },
    Mean(NodeId),
    Softmax(NodeId),
    LogSumExp(NodeId),
    Cholesky(NodeId),
    TriSolve { tri: NodeId, rhs: NodeId, lower: bool },
    LogDet(NodeId),
    Diag(NodeId),
    Conv2d { input: NodeId, kernel: NodeId, stride: usize },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A tensor value registered on a [`Tape`].
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
    value: Rc<Tensor>,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("value", &self.value)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a value that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub(crate) fn leaf_rc(&self, value: Rc<Tensor>, requires_grad: bool) -> Var<'_> {
        self.push_rc(value, Op::Leaf, requires_grad)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        self.push_rc(Rc::new(value), op, requires_grad)
    }

    fn push_rc(&self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: value.clone(),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id,
            value,
        }
    }

    fn requires_grad(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Gradients of a scalar `loss` with respect to every upstream node.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        if loss.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        self.backward_seeded(loss, Tensor::ones(loss.value.shape()))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`).
    pub fn backward_seeded(&self, output: &Var<'_>, seed: Tensor) -> Result<Gradients> {
        if !std::ptr::eq(output.tape, self) {
            return Err(Error::Contract("output belongs to a different tape".into()));
        }
        if seed.shape() != output.value.shape() {
            return Err(Error::Shape(format!(
                "seed shape {:?} does not match output {:?}",
                seed.shape(),
                output.value.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; output.id + 1];
        grads[output.id] = Some(seed);
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, contribution) in local_backward(&nodes, node, &g)? {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by one backward pass, keyed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to a leaf; zeros when the leaf was not reached.
    pub fn wrt(&self, var: &Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value.shape()))
    }

    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(&[self.id])
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.leaf_rc(self.value.clone(), false)
    }

    fn check_same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("vars belong to different tapes".into()))
        }
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.requires_grad(&[self.id]);
        self.tape.push(value, op, rg)
    }

    fn nary(&self, value: Tensor, op: Op, ids: &[NodeId]) -> Var<'t> {
        let rg = self.tape.requires_grad(ids);
        self.tape.push(value, op, rg)
    }
}

fn as_matrix(t: &Tensor, row_vector: bool) -> std::borrow::Cow<'_, Tensor> {
    use std::borrow::Cow;
    match t.rank() {
        1 if row_vector => Cow::Owned(t.clone().reshaped(&[1, t.len()]).expect("reshape")),
        1 => Cow::Owned(t.clone().reshaped(&[t.len(), 1]).expect("reshape")),
        _ => Cow::Borrowed(t),
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn local_backward(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
    let val = |id: NodeId| -> &Tensor { &nodes[id].value };
    let out = &node.value;
    let res = match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![
            (*a, broadcast::reduce_to(g, val(*a).shape())),
            (*b, broadcast::reduce_to(g, val(*b).shape())),
        ],
        Op::Sub(a, b) => vec![
            (*a, broadcast::reduce_to(g, val(*a).shape())),
            (*b, broadcast::reduce_to(&g.scale(-1.0), val(*b).shape())),
        ],
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let ga = broadcast::binary(g, vb, |x, y| x * y)?;
            let gb = broadcast::binary(g, va, |x, y| x * y)?;
            vec![
                (*a, broadcast::reduce_to(&ga, va.shape())),
                (*b, broadcast::reduce_to(&gb, vb.shape())),
            ]
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let ga = broadcast::binary(g, vb, |x, y| x / y)?;
            // d(a/b)/db = -out / b
            let gb = broadcast::binary(&g.zip_map(out, |x, o| -x * o), &broadcast::expand(vb, out.shape()), |x, y| x / y)?;
            vec![
                (*a, broadcast::reduce_to(&ga, va.shape())),
                (*b, broadcast::reduce_to(&gb, vb.shape())),
            ]
        }
        Op::Neg(a) => vec![(*a, g.scale(-1.0))],
        Op::Scale(a, c) => vec![(*a, g.scale(*c))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let a_vec = va.rank() == 1;
            let b_vec = vb.rank() == 1;
            let am = as_matrix(va, true);
            let bm = as_matrix(vb, false);
            let gm = g.clone().reshaped(&[am.rows(), bm.cols()])?;
            let ga = gm.matmul(&bm.transpose());
            let gb = am.transpose().matmul(&gm);
            let ga = if a_vec { ga.reshaped(va.shape())? } else { ga };
            let gb = if b_vec { gb.reshaped(vb.shape())? } else { gb };
            vec![(*a, ga), (*b, gb)]
        }
        Op::Transpose(a) => vec![(*a, g.transpose())],
        Op::Reshape(a) => vec![(*a, g.clone().reshaped(val(*a).shape())?)],
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = outer_inner(out.shape(), *axis);
            let mut offset = 0;
            let mut res = Vec::with_capacity(inputs.len());
            for &i in inputs {
                let shape = val(i).shape();
                let len = shape[*axis];
                let mut gi = Tensor::zeros(shape);
                let gd = gi.data_mut();
                for o in 0..outer {
                    let src = &g.data()[(o * total + offset) * inner..(o * total + offset + len) * inner];
                    gd[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
                }
                offset += len;
                res.push((i, gi));
            }
            res
        }
        Op::Slice { input, axis, start } => {
            let shape = val(*input).shape();
            let (outer, total, inner) = outer_inner(shape, *axis);
            let len = out.shape()[*axis];
            let mut gi = Tensor::zeros(shape);
            let gd = gi.data_mut();
            for o in 0..outer {
                let dst = (o * total + start) * inner;
                gd[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(*input, gi)]
        }
        Op::GatherRows { input, rows } => {
            let shape = val(*input).shape();
            let width: usize = shape[1..].iter().product();
            let mut gi = Tensor::zeros(shape);
            let gd = gi.data_mut();
            for (k, &r) in rows.iter().enumerate() {
                for j in 0..width {
                    gd[r * width + j] += g.data()[k * width + j];
                }
            }
            vec![(*input, gi)]
        }
        Op::Scatter { input, positions } => {
            let shape = val(*input).shape();
            let m = *shape.last().unwrap_or(&1);
            let out_last = *out.shape().last().unwrap_or(&1);
            let outer = val(*input).len() / m.max(1);
            let mut gi = Tensor::zeros(shape);
            let gd = gi.data_mut();
            for o in 0..outer {
                for (j, &p) in positions.iter().enumerate() {
                    gd[o * m + j] = g.data()[o * out_last + p];
                }
            }
            vec![(*input, gi)]
        }
        Op::Relu(a) => vec![(*a, g.zip_map(val(*a), |x, v| if v > 0.0 { x } else { 0.0 }))],
        Op::Exp(a) => vec![(*a, g.zip_map(out, |x, o| x * o))],
        Op::Log(a) => vec![(*a, g.zip_map(val(*a), |x, v| x / v))],
        Op::Sqrt(a) => vec![(*a, g.zip_map(out, |x, o| 0.5 * x / o))],
        Op::Square(a) => vec![(*a, g.zip_map(val(*a), |x, v| 2.0 * x * v))],
        Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
        Op::SumAxis { input, axis } => {
            let shape = val(*input).shape();
            let (outer, n, inner) = outer_inner(shape, *axis);
            let mut gi = Tensor::zeros(shape);
            let gd = gi.data_mut();
            for o in 0..outer {
                for k in 0..n {
                    for i in 0..inner {
                        gd[(o * n + k) * inner + i] = g.data()[o * inner + i];
                    }
                }
            }
            vec![(*input, gi)]
        }
        Op::Mean(a) => {
            let n = val(*a).len() as f64;
            vec![(*a, Tensor::full(val(*a).shape(), g.item() / n))]
        }
        Op::Softmax(a) => {
            let dot: f64 = g.data().iter().zip(out.data()).map(|(x, s)| x * s).sum();
            vec![(*a, g.zip_map(out, |x, s| s * (x - dot)))]
        }
        Op::LogSumExp(a) => {
            let lse = out.item();
            let gi = val(*a).map(|v| g.item() * (v - lse).exp());
            vec![(*a, gi)]
        }
        Op::Cholesky(a) => {
            // Symmetric adjoint: sym(L^-T Φ(Lᵀ L̄) L^-1), Φ = lower triangle with halved diagonal.
            let l = out;
            let n = l.rows();
            let mut p = l.transpose().matmul(g);
            for i in 0..n {
                for j in 0..n {
                    if j > i {
                        p.set(i, j, 0.0);
                    } else if i == j {
                        p.set(i, j, 0.5 * p.at(i, j));
                    }
                }
            }
            let lt = l.transpose();
            // X = L^-T P
            let x = tensor::solve_triangular(&lt, &p, false);
            // S = X L^-1  =>  Sᵀ = L^-T Xᵀ
            let s = tensor::solve_triangular(&lt, &x.transpose(), false).transpose();
            vec![(*a, s.symmetrized())]
        }
        Op::TriSolve { tri, rhs, lower } => {
            let t = val(*tri);
            let x = out;
            let gb = tensor::solve_triangular(&t.transpose(), g, !*lower);
            let mut gt = gb.matmul(&x.transpose()).scale(-1.0);
            let n = t.rows();
            for i in 0..n {
                for j in 0..n {
                    if (*lower && j > i) || (!*lower && j < i) {
                        gt.set(i, j, 0.0);
                    }
                }
            }
            vec![(*tri, gt), (*rhs, gb)]
        }
        Op::LogDet(a) => {
            let inv = tensor::spd_inverse(val(*a))?;
            vec![(*a, inv.scale(g.item()).symmetrized())]
        }
        Op::Diag(a) => {
            let n = out.len();
            let mut gi = Tensor::zeros(val(*a).shape());
            for i in 0..n {
                gi.set(i, i, g.data()[i]);
            }
            vec![(*a, gi)]
        }
        Op::Conv2d { input, kernel, stride } => {
            let (gx, gk) = ops::conv2d_backward(val(*input), val(*kernel), *stride, g);
            vec![(*input, gx), (*kernel, gk)]
        }
    };
    Ok(res)
}
