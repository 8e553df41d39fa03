use std::cell::RefCell;
use std::fmt;

use super::{numel, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum UnaryOp {
    Neg,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Log1p,
    Square,
    Sqrt,
    Softplus,
    Relu,
    Scale(f64),
    AddConst(f64),
    Clamp(f64, f64),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Binary(BinaryOp, usize, usize),
    Unary(UnaryOp, usize),
    Transpose(usize),
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    SliceCols { input: usize, start: usize },
    SliceRows { input: usize, start: usize },
    GatherRows { table: usize, rows: Vec<usize> },
    BroadcastRows(usize),
    Softmax { input: usize, axis: usize },
    Sum { input: usize, axis: Option<usize> },
    Mean { input: usize, axis: Option<usize> },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass. Nodes are appended in evaluation order, so the
/// node list is already topologically sorted and backward is a single reverse
/// sweep.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &node.shape)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a tensor as a leaf; gradients are tracked if the tensor
    /// says so.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad,
        )
    }

    pub fn var(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var<'_>> {
        let t = Tensor::new(shape, data)?.with_grad();
        Ok(self.leaf(&t))
    }

    pub fn constant(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var<'_>> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.push(vec![], vec![value], Op::Leaf, false)
    }

    pub fn row(&self, data: &[f64]) -> Var<'_> {
        self.push(vec![1, data.len()], data.to_vec(), Op::Leaf, false)
    }

    /// Concatenates 2-D values along `axis` (0 = stack rows, 1 = join columns).
    pub fn concat<'t>(&'t self, inputs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        if inputs.is_empty() {
            return Err(Error::Shape("concat of nothing".into()));
        }
        let nodes = self.nodes.borrow();
        for v in inputs {
            if nodes[v.id].shape.len() != 2 {
                return Err(Error::Shape(format!(
                    "concat expects 2-D inputs, got {:?}",
                    nodes[v.id].shape
                )));
            }
        }
        let first = &nodes[inputs[0].id].shape;
        let (shape, value) = match axis {
            0 => {
                let cols = first[1];
                let mut rows = 0;
                let mut value = Vec::new();
                for v in inputs {
                    let s = &nodes[v.id].shape;
                    if s[1] != cols {
                        return Err(Error::Shape(format!("concat rows: {:?} vs {:?}", first, s)));
                    }
                    rows += s[0];
                    value.extend_from_slice(&nodes[v.id].value);
                }
                (vec![rows, cols], value)
            }
            1 => {
                let rows = first[0];
                let mut cols = 0;
                for v in inputs {
                    let s = &nodes[v.id].shape;
                    if s[0] != rows {
                        return Err(Error::Shape(format!("concat cols: {:?} vs {:?}", first, s)));
                    }
                    cols += s[1];
                }
                let mut value = vec![0.0; rows * cols];
                let mut off = 0;
                for v in inputs {
                    let n = &nodes[v.id];
                    let c = n.shape[1];
                    for r in 0..rows {
                        value[r * cols + off..r * cols + off + c]
                            .copy_from_slice(&n.value[r * c..(r + 1) * c]);
                    }
                    off += c;
                }
                (vec![rows, cols], value)
            }
            _ => return Err(Error::Shape(format!("concat axis {axis} out of range"))),
        };
        let requires_grad = inputs.iter().any(|v| nodes[v.id].requires_grad);
        drop(nodes);
        Ok(self.push(
            shape,
            value,
            Op::Concat {
                inputs: inputs.iter().map(|v| v.id).collect(),
                axis,
            },
            requires_grad,
        ))
    }

    /// Looks up rows of a 2-D table (embedding lookup).
    pub fn gather_rows<'t>(&'t self, table: Var<'t>, rows: &[usize]) -> Result<Var<'t>> {
        let nodes = self.nodes.borrow();
        let t = &nodes[table.id];
        if t.shape.len() != 2 {
            return Err(Error::Shape("gather_rows expects a 2-D table".into()));
        }
        let (n, c) = (t.shape[0], t.shape[1]);
        let mut value = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(Error::Shape(format!(
                    "row {r} out of range for table of {n}"
                )));
            }
            value.extend_from_slice(&t.value[r * c..(r + 1) * c]);
        }
        let requires_grad = t.requires_grad;
        drop(nodes);
        Ok(self.push(
            vec![rows.len(), c],
            value,
            Op::GatherRows {
                table: table.id,
                rows: rows.to_vec(),
            },
            requires_grad,
        ))
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    /// Reverse sweep from a scalar node. Gradients of leaves accumulate
    /// across calls.
    fn backward_from(&self, loss: usize) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss + 1];
        grads[loss] = Some(vec![1.0]);
        let mut stored = self.grads.borrow_mut();
        if stored.len() < nodes.len() {
            stored.resize(nodes.len(), None);
        }

        for i in (0..=loss).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |id: usize, f: &mut dyn FnMut(&mut [f64])| {
                if !nodes[id].requires_grad {
                    return;
                }
                let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
                f(slot);
            };
            match &node.op {
                Op::Leaf => {
                    let slot = stored[i].get_or_insert_with(|| vec![0.0; g.len()]);
                    slot.iter_mut().zip(&g).for_each(|(s, v)| *s += v);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    let n = nodes[*b].shape[1];
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    acc(*a, &mut |da| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += grow[j] * brow[j];
                                }
                                da[i * k + p] += s;
                            }
                        }
                    });
                    acc(*b, &mut |db| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let x = av[i * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                let drow = &mut db[p * n..(p + 1) * n];
                                for j in 0..n {
                                    drow[j] += x * grow[j];
                                }
                            }
                        }
                    });
                }
                Op::Binary(kind, a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let len = g.len();
                    let ai = |k: usize| if av.len() == 1 { 0 } else { k };
                    let bi = |k: usize| if bv.len() == 1 { 0 } else { k };
                    acc(*a, &mut |da| {
                        for k in 0..len {
                            let d = match kind {
                                BinaryOp::Add | BinaryOp::Sub => g[k],
                                BinaryOp::Mul => g[k] * bv[bi(k)],
                                BinaryOp::Div => g[k] / bv[bi(k)],
                            };
                            da[ai(k)] += d;
                        }
                    });
                    acc(*b, &mut |db| {
                        for k in 0..len {
                            let d = match kind {
                                BinaryOp::Add => g[k],
                                BinaryOp::Sub => -g[k],
                                BinaryOp::Mul => g[k] * av[ai(k)],
                                BinaryOp::Div => {
                                    let y = bv[bi(k)];
                                    -g[k] * av[ai(k)] / (y * y)
                                }
                            };
                            db[bi(k)] += d;
                        }
                    });
                }
                Op::Unary(kind, a) => {
                    let x = &nodes[*a].value;
                    let y = &node.value;
                    acc(*a, &mut |da| {
                        for k in 0..g.len() {
                            let local = match *kind {
                                UnaryOp::Neg => -1.0,
                                UnaryOp::Tanh => 1.0 - y[k] * y[k],
                                UnaryOp::Sigmoid => y[k] * (1.0 - y[k]),
                                UnaryOp::Exp => y[k],
                                UnaryOp::Log => 1.0 / x[k],
                                UnaryOp::Log1p => 1.0 / (1.0 + x[k]),
                                UnaryOp::Square => 2.0 * x[k],
                                UnaryOp::Sqrt => 0.5 / y[k],
                                UnaryOp::Softplus => sigmoid(x[k]),
                                UnaryOp::Relu => f64::from(u8::from(x[k] > 0.0)),
                                UnaryOp::Scale(c) => c,
                                UnaryOp::AddConst(_) => 1.0,
                                UnaryOp::Clamp(lo, hi) => {
                                    f64::from(u8::from(x[k] >= lo && x[k] <= hi))
                                }
                            };
                            da[k] += g[k] * local;
                        }
                    });
                }
                Op::Transpose(a) => {
                    let (r, c) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    acc(*a, &mut |da| {
                        for i in 0..r {
                            for j in 0..c {
                                da[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
                Op::Reshape(a) => acc(*a, &mut |da| {
                    da.iter_mut().zip(&g).for_each(|(d, v)| *d += v);
                }),
                Op::Concat { inputs, axis } => {
                    let cols = node.shape[1];
                    let mut off = 0;
                    for &id in inputs {
                        let s = &nodes[id].shape;
                        match axis {
                            0 => {
                                let n = nodes[id].value.len();
                                acc(id, &mut |d| {
                                    d.iter_mut()
                                        .zip(&g[off..off + n])
                                        .for_each(|(d, v)| *d += v)
                                });
                                off += n;
                            }
                            _ => {
                                let (rows, c) = (s[0], s[1]);
                                acc(id, &mut |d| {
                                    for r in 0..rows {
                                        for j in 0..c {
                                            d[r * c + j] += g[r * cols + off + j];
                                        }
                                    }
                                });
                                off += c;
                            }
                        }
                    }
                }
                Op::SliceCols { input, start } => {
                    let cols = nodes[*input].shape[1];
                    let (rows, w) = (node.shape[0], node.shape[1]);
                    acc(*input, &mut |d| {
                        for r in 0..rows {
                            for j in 0..w {
                                d[r * cols + start + j] += g[r * w + j];
                            }
                        }
                    });
                }
                Op::SliceRows { input, start } => {
                    let cols = node.shape[1];
                    acc(*input, &mut |d| {
                        let base = start * cols;
                        d[base..base + g.len()]
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(d, v)| *d += v);
                    });
                }
                Op::GatherRows { table, rows } => {
                    let c = node.shape[1];
                    acc(*table, &mut |d| {
                        for (r, &src) in rows.iter().enumerate() {
                            for j in 0..c {
                                d[src * c + j] += g[r * c + j];
                            }
                        }
                    });
                }
                Op::BroadcastRows(a) => {
                    let c = nodes[*a].value.len();
                    acc(*a, &mut |d| {
                        for (k, v) in g.iter().enumerate() {
                            d[k % c] += v;
                        }
                    });
                }
                Op::Softmax { input, axis } => {
                    let y = &node.value;
                    let (outer, len, stride) = softmax_layout(&node.shape, *axis);
                    acc(*input, &mut |d| {
                        for_each_lane(outer, len, stride, |idx| {
                            let dot: f64 = idx.clone().map(|k| g[k] * y[k]).sum();
                            for k in idx {
                                d[k] += y[k] * (g[k] - dot);
                            }
                        });
                    });
                }
                Op::Sum { input, axis } | Op::Mean { input, axis } => {
                    let in_shape = &nodes[*input].shape;
                    let mean = matches!(node.op, Op::Mean { .. });
                    match axis {
                        None => {
                            let n = nodes[*input].value.len();
                            let v = if mean { g[0] / n as f64 } else { g[0] };
                            acc(*input, &mut |d| d.iter_mut().for_each(|x| *x += v));
                        }
                        Some(ax) => {
                            let (outer, len, stride) = softmax_layout(in_shape, *ax);
                            let scale = if mean { 1.0 / len as f64 } else { 1.0 };
                            acc(*input, &mut |d| {
                                let mut out = 0;
                                for_each_lane(outer, len, stride, |idx| {
                                    for k in idx {
                                        d[k] += g[out] * scale;
                                    }
                                    out += 1;
                                });
                            });
                        }
                    }
                }
            }
        }
        Ok(())
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

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Layout for reducing along `axis` of a rank-1 or rank-2 shape:
/// (number of lanes, lane length, element stride within a lane).
fn softmax_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    match (shape.len(), axis) {
        (1, 0) => (1, shape[0], 1),
        (2, 0) => (shape[1], shape[0], shape[1]),
        (2, 1) => (shape[0], shape[1], 1),
        _ => unreachable!("validated by caller"),
    }
}

/// Calls `f` with the flat indices of each lane. Lanes are visited in the
/// same order as the reduced output is laid out.
fn for_each_lane(
    outer: usize,
    len: usize,
    stride: usize,
    mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>),
) {
    for o in 0..outer {
        let start = if stride == 1 { o * len } else { o };
        f((start..start + len * stride).step_by(stride));
    }
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    match (shape.len(), axis) {
        (1, 0) | (2, 0) | (2, 1) => Ok(()),
        _ => Err(Error::Shape(format!(
            "axis {axis} unsupported for shape {shape:?}"
        ))),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn to_tensor(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Value of a single-element node.
    pub fn item(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        debug_assert_eq!(v.len(), 1, "item() on non-scalar");
        v[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Var::backward`].
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.grads.borrow().get(self.id).cloned().flatten()
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward_from(self.id)
    }

    fn unary(self, kind: UnaryOp) -> Result<Var<'t>> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let mut out = Vec::with_capacity(n.value.len());
            for &x in &n.value {
                let y = match kind {
                    UnaryOp::Neg => -x,
                    UnaryOp::Tanh => x.tanh(),
                    UnaryOp::Sigmoid => sigmoid(x),
                    UnaryOp::Exp => {
                        let y = x.exp();
                        if !y.is_finite() {
                            return Err(Error::Domain(format!("exp({x}) overflows")));
                        }
                        y
                    }
                    UnaryOp::Log => {
                        if x <= 0.0 {
                            return Err(Error::Domain(format!("log of non-positive {x}")));
                        }
                        x.ln()
                    }
                    UnaryOp::Log1p => {
                        if x <= -1.0 {
                            return Err(Error::Domain(format!("log1p of {x}")));
                        }
                        x.ln_1p()
                    }
                    UnaryOp::Square => x * x,
                    UnaryOp::Sqrt => {
                        if x <= 0.0 {
                            return Err(Error::Domain(format!("sqrt of non-positive {x}")));
                        }
                        x.sqrt()
                    }
                    UnaryOp::Softplus => softplus(x),
                    UnaryOp::Relu => x.max(0.0),
                    UnaryOp::Scale(c) => c * x,
                    UnaryOp::AddConst(c) => x + c,
                    UnaryOp::Clamp(lo, hi) => x.clamp(lo, hi),
                };
                out.push(y);
            }
            (n.shape.clone(), out, n.requires_grad)
        };
        Ok(self.tape.push(shape, value, Op::Unary(kind, self.id), rg))
    }

    fn binary(self, kind: BinaryOp, other: Var<'t>) -> Result<Var<'t>> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let shape = if a.shape == b.shape || b.value.len() == 1 {
                a.shape.clone()
            } else if a.value.len() == 1 {
                b.shape.clone()
            } else {
                return Err(Error::Shape(format!(
                    "{kind:?}: incompatible shapes {:?} and {:?}",
                    a.shape, b.shape
                )));
            };
            let len = numel(&shape);
            let ai = |k: usize| if a.value.len() == 1 { 0 } else { k };
            let bi = |k: usize| if b.value.len() == 1 { 0 } else { k };
            let mut out = Vec::with_capacity(len);
            for k in 0..len {
                let (x, y) = (a.value[ai(k)], b.value[bi(k)]);
                out.push(match kind {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                    BinaryOp::Div => {
                        if y == 0.0 {
                            return Err(Error::Domain("division by zero".into()));
                        }
                        x / y
                    }
                });
            }
            (shape, out, a.requires_grad || b.requires_grad)
        };
        Ok(self
            .tape
            .push(shape, value, Op::Binary(kind, self.id, other.id), rg))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryOp::Add, other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryOp::Sub, other)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryOp::Mul, other)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryOp::Div, other)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Neg)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Tanh)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Sigmoid)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Log)
    }

    pub fn log1p(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Log1p)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Square)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Sqrt)
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Softplus)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Relu)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary(UnaryOp::Scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary(UnaryOp::AddConst(c))
    }

    /// Clamps into `[lo, hi]`; the gradient is passed through inside the
    /// interval and zero outside.
    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>> {
        self.unary(UnaryOp::Clamp(lo, hi))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(Error::Shape(format!(
                    "matmul {:?} x {:?}",
                    a.shape, b.shape
                )));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let x = a.value[i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    let brow = &b.value[p * n..(p + 1) * n];
                    for j in 0..n {
                        orow[j] += x * brow[j];
                    }
                }
            }
            (vec![m, n], out, a.requires_grad || b.requires_grad)
        };
        Ok(self
            .tape
            .push(shape, value, Op::MatMul(self.id, other.id), rg))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if a.shape.len() != 2 {
                return Err(Error::Shape(format!("transpose of {:?}", a.shape)));
            }
            let (r, c) = (a.shape[0], a.shape[1]);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = a.value[i * c + j];
                }
            }
            (vec![c, r], out, a.requires_grad)
        };
        Ok(self.tape.push(shape, value, Op::Transpose(self.id), rg))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if numel(&shape) != a.value.len() {
                return Err(Error::Shape(format!(
                    "cannot reshape {:?} into {:?}",
                    a.shape, shape
                )));
            }
            (a.value.clone(), a.requires_grad)
        };
        Ok(self.tape.push(shape, value, Op::Reshape(self.id), rg))
    }

    /// Columns `[start, start + len)` of a 2-D value.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let (value, rows, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if a.shape.len() != 2 || start + len > a.shape[1] {
                return Err(Error::Shape(format!(
                    "slice_cols {start}..{} of {:?}",
                    start + len,
                    a.shape
                )));
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            let mut out = Vec::with_capacity(rows * len);
            for r in 0..rows {
                out.extend_from_slice(&a.value[r * cols + start..r * cols + start + len]);
            }
            (out, rows, a.requires_grad)
        };
        Ok(self.tape.push(
            vec![rows, len],
            value,
            Op::SliceCols {
                input: self.id,
                start,
            },
            rg,
        ))
    }

    /// Rows `[start, start + len)` of a 2-D value.
    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let (value, cols, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if a.shape.len() != 2 || start + len > a.shape[0] {
                return Err(Error::Shape(format!(
                    "slice_rows {start}..{} of {:?}",
                    start + len,
                    a.shape
                )));
            }
            let cols = a.shape[1];
            (
                a.value[start * cols..(start + len) * cols].to_vec(),
                cols,
                a.requires_grad,
            )
        };
        Ok(self.tape.push(
            vec![len, cols],
            value,
            Op::SliceRows {
                input: self.id,
                start,
            },
            rg,
        ))
    }

    /// Repeats a row vector (`[c]` or `[1, c]`) into `n` rows.
    pub fn broadcast_rows(self, n: usize) -> Result<Var<'t>> {
        let (value, c, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let ok = a.shape.len() == 1 || (a.shape.len() == 2 && a.shape[0] == 1);
            if !ok {
                return Err(Error::Shape(format!("broadcast_rows of {:?}", a.shape)));
            }
            let c = a.value.len();
            let mut out = Vec::with_capacity(n * c);
            for _ in 0..n {
                out.extend_from_slice(&a.value);
            }
            (out, c, a.requires_grad)
        };
        Ok(self
            .tape
            .push(vec![n, c], value, Op::BroadcastRows(self.id), rg))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            check_axis(&a.shape, axis)?;
            let (outer, len, stride) = softmax_layout(&a.shape, axis);
            if len == 0 {
                return Err(Error::Shape("softmax over an empty axis".into()));
            }
            let mut out = vec![0.0; a.value.len()];
            for_each_lane(outer, len, stride, |idx| {
                let max = idx
                    .clone()
                    .map(|k| a.value[k])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in idx.clone() {
                    let e = (a.value[k] - max).exp();
                    out[k] = e;
                    total += e;
                }
                for k in idx {
                    out[k] /= total;
                }
            });
            (a.shape.clone(), out, a.requires_grad)
        };
        Ok(self.tape.push(
            shape,
            value,
            Op::Softmax {
                input: self.id,
                axis,
            },
            rg,
        ))
    }

    fn reduce(self, axis: Option<usize>, mean: bool) -> Result<Var<'t>> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            match axis {
                None => {
                    if a.value.is_empty() {
                        return Err(Error::Shape("reduction over an empty tensor".into()));
                    }
                    let s: f64 = a.value.iter().sum();
                    let v = if mean { s / a.value.len() as f64 } else { s };
                    (vec![], vec![v], a.requires_grad)
                }
                Some(ax) => {
                    check_axis(&a.shape, ax)?;
                    let (outer, len, stride) = softmax_layout(&a.shape, ax);
                    if len == 0 {
                        return Err(Error::Shape("reduction over an empty axis".into()));
                    }
                    let mut out = Vec::with_capacity(outer);
                    for_each_lane(outer, len, stride, |idx| {
                        let s: f64 = idx.map(|k| a.value[k]).sum();
                        out.push(if mean { s / len as f64 } else { s });
                    });
                    let mut shape = a.shape.clone();
                    shape.remove(ax);
                    (shape, out, a.requires_grad)
                }
            }
        };
        let op = if mean {
            Op::Mean {
                input: self.id,
                axis,
            }
        } else {
            Op::Sum {
                input: self.id,
                axis,
            }
        };
        Ok(self.tape.push(shape, value, op, rg))
    }

    pub fn sum(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(Some(axis), false)
    }

    pub fn mean(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(Some(axis), true)
    }

    pub fn sum_all(self) -> Result<Var<'t>> {
        self.reduce(None, false)
    }

    pub fn mean_all(self) -> Result<Var<'t>> {
        self.reduce(None, true)
    }

    /// `x @ w + b` with `b` broadcast over rows.
    pub fn affine(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let y = self.matmul(w)?;
        let rows = y.shape()[0];
        y.add(b.broadcast_rows(rows)?)
    }
}
