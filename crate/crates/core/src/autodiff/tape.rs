use std::cell::{Cell, RefCell};
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{gemm_acc, gemm_at_acc, gemm_bt_acc, split_axis, Tensor};
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddBias(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    MulRows(usize, usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    Reshape(usize),
    Transpose(usize),
    Sum { input: usize, axis: Option<usize> },
    Mean { input: usize, axis: usize },
    Gather { table: usize, ids: Vec<usize> },
    ScatterAddRows { input: usize, index: Vec<usize> },
    Softmax { input: usize, axis: usize },
    SegmentSoftmax { input: usize, segments: Vec<usize> },
    LogSoftmax { input: usize, axis: usize },
    Tanh(usize),
    Sigmoid(usize),
    LeakyRelu(usize, f64),
    Elu(usize),
    Log(usize),
    Dropout { input: usize, mask: Vec<f64> },
    MaskedFill { input: usize, mask: Vec<bool> },
    NllLoss { input: usize, target: usize },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records every operation of one forward pass so that [`Tape::backward`]
/// can replay it in reverse.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order of the computation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
    backward_done: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A trainable leaf. The tensor is shared, not copied.
    pub fn param(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push_arc(value, Op::Leaf, true)
    }

    /// A non-trainable leaf sharing an existing tensor.
    pub fn shared(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push_arc(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var<'_>) -> Arc<Tensor> {
        self.nodes.borrow()[v.id].value.clone()
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn unary(&self, x: Var<'_>, f: impl Fn(&Tensor) -> Tensor, op: Op) -> Var<'_> {
        let out = {
            let nodes = self.nodes.borrow();
            f(&nodes[x.id].value)
        };
        let rg = self.rg(&[x.id]);
        self.push(out, op, rg)
    }

    /// Concatenates along `axis`. All other extents must agree.
    pub fn concat<'t>(&'t self, xs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        if xs.is_empty() {
            return Err(Error::Autodiff("concat of zero tensors".into()));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let first = nodes[xs[0].id].value.shape().to_vec();
            if axis >= first.len() {
                return Err(Error::shape("concat", &first, &[axis]));
            }
            let mut total = 0;
            for x in xs {
                let s = nodes[x.id].value.shape();
                if s.len() != first.len()
                    || s.iter()
                        .zip(&first)
                        .enumerate()
                        .any(|(d, (a, b))| d != axis && a != b)
                {
                    return Err(Error::shape("concat", &first, s));
                }
                total += s[axis];
            }
            let mut shape = first.clone();
            shape[axis] = total;
            let (outer, _, inner) = split_axis(&shape, axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for x in xs {
                    let t = &nodes[x.id].value;
                    let n = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * n..(o + 1) * n]);
                }
            }
            Tensor::new(shape, data)?
        };
        let ids: Vec<usize> = xs.iter().map(|x| x.id).collect();
        let rg = self.rg(&ids);
        Ok(self.push(out, Op::Concat { inputs: ids, axis }, rg))
    }

    /// Runs reverse-mode accumulation from a one-element `loss`.
    ///
    /// Calling it twice without [`Tape::reset_grads`] is an error.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if self.backward_done.get() {
            return Err(Error::Autodiff(
                "backward called twice without reset_grads".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        self.backward_done.set(true);
        Ok(())
    }

    pub fn reset_grads(&self) {
        self.grads.borrow_mut().clear();
        self.backward_done.set(false);
    }

    /// Gradient of the last backward pass with respect to `v`, if it
    /// requires grad and was reached.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        if !self.nodes.borrow()[v.id].requires_grad {
            return None;
        }
        self.grads.borrow().get(v.id).cloned().flatten()
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).unwrap()
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .unwrap()
}

fn backprop(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let rg = |i: usize| nodes[i].requires_grad;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if rg(*a) {
                let mut da = Tensor::zeros(&[m, k]);
                gemm_bt_acc(g.data(), bv.data(), da.data_mut(), m, n, k);
                accumulate(grads, nodes, *a, da);
            }
            if rg(*b) {
                let mut db = Tensor::zeros(&[k, n]);
                gemm_at_acc(av.data(), g.data(), db.data_mut(), k, m, n);
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::AddBias(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            if rg(*b) {
                let n = val(*b).numel();
                let mut db = Tensor::zeros(val(*b).shape());
                for (i, x) in g.data().iter().enumerate() {
                    db.data_mut()[i % n] += x;
                }
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            if rg(*b) {
                accumulate(grads, nodes, *b, map(g, |x| -x));
            }
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                accumulate(grads, nodes, *a, zip(g, val(*b), |x, y| x * y));
            }
            if rg(*b) {
                accumulate(grads, nodes, *b, zip(g, val(*a), |x, y| x * y));
            }
        }
        Op::Scale(a, c) => accumulate(grads, nodes, *a, map(g, |x| x * c)),
        Op::AddConst(a) => accumulate(grads, nodes, *a, g.clone()),
        Op::MulRows(x, w) => {
            let (xv, wv) = (val(*x), val(*w));
            let cols = xv.shape()[1];
            if rg(*x) {
                let mut dx = g.clone();
                for (i, v) in dx.data_mut().iter_mut().enumerate() {
                    *v *= wv.data()[i / cols];
                }
                accumulate(grads, nodes, *x, dx);
            }
            if rg(*w) {
                let mut dw = Tensor::zeros(wv.shape());
                for (i, (gv, xv)) in g.data().iter().zip(xv.data()).enumerate() {
                    dw.data_mut()[i / cols] += gv * xv;
                }
                accumulate(grads, nodes, *w, dw);
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = split_axis(out.shape(), *axis);
            let row = out.shape()[*axis] * inner;
            let mut offset = 0;
            for &i in inputs {
                let s = val(i).shape();
                let n = s[*axis] * inner;
                if rg(i) {
                    let mut d = Vec::with_capacity(outer * n);
                    for o in 0..outer {
                        let base = o * row + offset;
                        d.extend_from_slice(&g.data()[base..base + n]);
                    }
                    accumulate(grads, nodes, i, Tensor::new(s.to_vec(), d).unwrap());
                }
                offset += n;
            }
        }
        Op::Slice { input, axis, start } => {
            let s = val(*input).shape();
            let (outer, full, inner) = split_axis(s, *axis);
            let len = out.shape()[*axis];
            let mut d = Tensor::zeros(s);
            for o in 0..outer {
                let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                let dst0 = o * full * inner + start * inner;
                d.data_mut()[dst0..dst0 + len * inner].copy_from_slice(src);
            }
            accumulate(grads, nodes, *input, d);
        }
        Op::Reshape(a) => {
            accumulate(grads, nodes, *a, g.clone().reshaped(val(*a).shape().to_vec()));
        }
        Op::Transpose(a) => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            let mut d = Tensor::zeros(&[c, r]);
            for i in 0..r {
                for j in 0..c {
                    d.data_mut()[j * r + i] = g.data()[i * c + j];
                }
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::Sum { input, axis: None } => {
            accumulate(grads, nodes, *input, Tensor::full(val(*input).shape(), g.item()));
        }
        Op::Sum {
            input,
            axis: Some(axis),
        } => {
            let d = broadcast_axis(g, val(*input).shape(), *axis, 1.0);
            accumulate(grads, nodes, *input, d);
        }
        Op::Mean { input, axis } => {
            let n = val(*input).shape()[*axis] as f64;
            let d = broadcast_axis(g, val(*input).shape(), *axis, 1.0 / n);
            accumulate(grads, nodes, *input, d);
        }
        Op::Gather { table, ids } => {
            let tv = val(*table);
            let cols = tv.shape()[1];
            let mut d = Tensor::zeros(tv.shape());
            for (r, &id) in ids.iter().enumerate() {
                let src = &g.data()[r * cols..(r + 1) * cols];
                let dst = &mut d.data_mut()[id * cols..(id + 1) * cols];
                for (a, b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
            }
            accumulate(grads, nodes, *table, d);
        }
        Op::ScatterAddRows { input, index } => {
            let cols = out.shape()[1];
            let mut d = Vec::with_capacity(index.len() * cols);
            for &r in index {
                d.extend_from_slice(&g.data()[r * cols..(r + 1) * cols]);
            }
            accumulate(
                grads,
                nodes,
                *input,
                Tensor::new(val(*input).shape().to_vec(), d).unwrap(),
            );
        }
        Op::Softmax { input, axis } => {
            let (outer, n, inner) = split_axis(out.shape(), *axis);
            let mut d = Tensor::zeros(out.shape());
            let (y, gd) = (out.data(), g.data());
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| o * n * inner + k * inner + i;
                    let dot: f64 = (0..n).map(|k| gd[idx(k)] * y[idx(k)]).sum();
                    for k in 0..n {
                        d.data_mut()[idx(k)] = y[idx(k)] * (gd[idx(k)] - dot);
                    }
                }
            }
            accumulate(grads, nodes, *input, d);
        }
        Op::SegmentSoftmax { input, segments } => {
            let nseg = segments.iter().copied().max().map_or(0, |m| m + 1);
            let mut dot = vec![0.0; nseg];
            for (k, &s) in segments.iter().enumerate() {
                dot[s] += g.data()[k] * out.data()[k];
            }
            let d: Vec<f64> = segments
                .iter()
                .enumerate()
                .map(|(k, &s)| out.data()[k] * (g.data()[k] - dot[s]))
                .collect();
            accumulate(grads, nodes, *input, Tensor::vector(d));
        }
        Op::LogSoftmax { input, axis } => {
            let (outer, n, inner) = split_axis(out.shape(), *axis);
            let mut d = Tensor::zeros(out.shape());
            let (y, gd) = (out.data(), g.data());
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| o * n * inner + k * inner + i;
                    let gsum: f64 = (0..n).map(|k| gd[idx(k)]).sum();
                    for k in 0..n {
                        d.data_mut()[idx(k)] = gd[idx(k)] - y[idx(k)].exp() * gsum;
                    }
                }
            }
            accumulate(grads, nodes, *input, d);
        }
        Op::Tanh(a) => accumulate(grads, nodes, *a, zip(g, out, |g, y| g * (1.0 - y * y))),
        Op::Sigmoid(a) => accumulate(grads, nodes, *a, zip(g, out, |g, y| g * y * (1.0 - y))),
        Op::LeakyRelu(a, slope) => {
            let s = *slope;
            accumulate(
                grads,
                nodes,
                *a,
                zip(g, val(*a), |g, x| if x > 0.0 { g } else { g * s }),
            );
        }
        Op::Elu(a) => {
            let d = Tensor::new(
                out.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(val(*a).data())
                    .zip(out.data())
                    .map(|((g, x), y)| if *x > 0.0 { *g } else { g * (y + 1.0) })
                    .collect(),
            )
            .unwrap();
            accumulate(grads, nodes, *a, d);
        }
        Op::Log(a) => accumulate(grads, nodes, *a, zip(g, val(*a), |g, x| g / x)),
        Op::Dropout { input, mask } => {
            let d = Tensor::new(
                g.shape().to_vec(),
                g.data().iter().zip(mask).map(|(g, m)| g * m).collect(),
            )
            .unwrap();
            accumulate(grads, nodes, *input, d);
        }
        Op::MaskedFill { input, mask } => {
            let d = Tensor::new(
                g.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(mask)
                    .map(|(g, &m)| if m { 0.0 } else { *g })
                    .collect(),
            )
            .unwrap();
            accumulate(grads, nodes, *input, d);
        }
        Op::NllLoss { input, target } => {
            let mut d = Tensor::zeros(val(*input).shape());
            d.data_mut()[*target] = -g.item();
            accumulate(grads, nodes, *input, d);
        }
    }
}

/// Expands `g` (the input shape with `axis` removed) back along `axis`,
/// multiplying by `factor`.
fn broadcast_axis(g: &Tensor, shape: &[usize], axis: usize, factor: f64) -> Tensor {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut d = Tensor::zeros(shape);
    for o in 0..outer {
        for k in 0..n {
            for i in 0..inner {
                d.data_mut()[o * n * inner + k * inner + i] = g.data()[o * inner + i] * factor;
            }
        }
    }
    d
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(d, _)| d != axis)
        .map(|(_, &n)| n)
        .collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(&Tensor, &Tensor) -> Result<Tensor>,
        op: Op,
    ) -> Result<Var<'t>> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value).map_err(|e| match e {
                Error::Shape { lhs, rhs, .. } => Error::Shape { op: name, lhs, rhs },
                e => e,
            })?
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(out, op, rg))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "matmul",
            |a, b| {
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(Error::shape("matmul", a.shape(), b.shape()));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut out = Tensor::zeros(&[m, n]);
                gemm_acc(a.data(), b.data(), out.data_mut(), m, k, n);
                Ok(out)
            },
            Op::MatMul(self.id, other.id),
        )
    }

    fn same_shape(
        self,
        other: Var<'t>,
        name: &'static str,
        f: fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.binary(
            other,
            name,
            move |a, b| {
                if a.shape() != b.shape() {
                    return Err(Error::shape(name, a.shape(), b.shape()));
                }
                Ok(zip(a, b, f))
            },
            op,
        )
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// Adds a bias vector over the leading axis: `[.., n] + [n]`.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            bias,
            "add_bias",
            |a, b| {
                let last = *a.shape().last().unwrap_or(&0);
                if b.rank() != 1 || b.numel() != last {
                    return Err(Error::shape("add_bias", a.shape(), b.shape()));
                }
                let mut out = a.clone();
                for (i, v) in out.data_mut().iter_mut().enumerate() {
                    *v += b.data()[i % last];
                }
                Ok(out)
            },
            Op::AddBias(self.id, bias.id),
        )
    }

    /// Scales row `r` of a `[rows, cols]` tensor by `weights[r]`.
    pub fn mul_rows(self, weights: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            weights,
            "mul_rows",
            |x, w| {
                if x.rank() != 2 || w.numel() != x.shape()[0] {
                    return Err(Error::shape("mul_rows", x.shape(), w.shape()));
                }
                let cols = x.shape()[1];
                let mut out = x.clone();
                for (i, v) in out.data_mut().iter_mut().enumerate() {
                    *v *= w.data()[i / cols];
                }
                Ok(out)
            },
            Op::MulRows(self.id, weights.id),
        )
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape
            .unary(self, |t| map(t, |x| x * c), Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_const(self, c: f64) -> Var<'t> {
        self.tape
            .unary(self, |t| map(t, |x| x + c), Op::AddConst(self.id))
    }

    /// `1 - x`.
    pub fn one_minus(self) -> Var<'t> {
        self.neg().add_const(1.0)
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.id].value;
            if axis >= t.rank() || start + len > t.shape()[axis] {
                return Err(Error::shape("slice", t.shape(), &[axis, start, len]));
            }
            let (outer, full, inner) = split_axis(t.shape(), axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let s = o * full * inner + start * inner;
                data.extend_from_slice(&t.data()[s..s + len * inner]);
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = len;
            Tensor::new(shape, data)?
        };
        let rg = self.tape.rg(&[self.id]);
        Ok(self.tape.push(
            out,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
            rg,
        ))
    }

    /// Row `r` of a matrix, as a `[1, cols]` matrix.
    pub fn row(self, r: usize) -> Result<Var<'t>> {
        self.slice(0, r, 1)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let n: usize = shape.iter().product();
        let cur = self.shape();
        if n != cur.iter().product::<usize>() {
            return Err(Error::shape("reshape", &cur, shape));
        }
        let shape = shape.to_vec();
        Ok(self.tape.unary(
            self,
            move |t| t.clone().reshaped(shape.clone()),
            Op::Reshape(self.id),
        ))
    }

    /// Flattens to rank 1.
    pub fn flatten(self) -> Var<'t> {
        let n = self.value().numel();
        self.reshape(&[n]).expect("flatten preserves numel")
    }

    /// Views a vector as a `[1, n]` row matrix.
    pub fn as_row(self) -> Var<'t> {
        let n = self.value().numel();
        self.reshape(&[1, n]).expect("as_row preserves numel")
    }

    /// Views a vector as an `[n, 1]` column matrix.
    pub fn as_col(self) -> Var<'t> {
        let n = self.value().numel();
        self.reshape(&[n, 1]).expect("as_col preserves numel")
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape("transpose", &s, &[]));
        }
        Ok(self.tape.unary(
            self,
            |t| {
                let (r, c) = (t.shape()[0], t.shape()[1]);
                let mut out = Tensor::zeros(&[c, r]);
                for i in 0..r {
                    for j in 0..c {
                        out.data_mut()[j * r + i] = t.data()[i * c + j];
                    }
                }
                out
            },
            Op::Transpose(self.id),
        ))
    }

    pub fn sum_all(self) -> Var<'t> {
        self.tape.unary(
            self,
            |t| Tensor::scalar(t.data().iter().sum()),
            Op::Sum {
                input: self.id,
                axis: None,
            },
        )
    }

    fn reduce(self, axis: usize, name: &'static str, factor_by_len: bool) -> Result<Var<'t>> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(Error::shape(name, &s, &[axis]));
        }
        let op = if factor_by_len {
            Op::Mean {
                input: self.id,
                axis,
            }
        } else {
            Op::Sum {
                input: self.id,
                axis: Some(axis),
            }
        };
        Ok(self.tape.unary(
            self,
            move |t| {
                let (outer, n, inner) = split_axis(t.shape(), axis);
                let scale = if factor_by_len { 1.0 / n as f64 } else { 1.0 };
                let mut data = vec![0.0; outer * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            data[o * inner + i] += t.data()[o * n * inner + k * inner + i];
                        }
                    }
                }
                data.iter_mut().for_each(|x| *x *= scale);
                Tensor::new(reduced_shape(t.shape(), axis), data).unwrap()
            },
            op,
        ))
    }

    /// Sums out `axis`.
    pub fn sum(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(axis, "sum", false)
    }

    pub fn mean(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(axis, "mean", true)
    }

    /// Row lookup: `table [n, d]`, `ids` → `[ids.len(), d]`.
    pub fn embedding_lookup(self, ids: &[usize]) -> Result<Var<'t>> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.id].value;
            if t.rank() != 2 {
                return Err(Error::shape("embedding_lookup", t.shape(), &[ids.len()]));
            }
            let (rows, cols) = (t.shape()[0], t.shape()[1]);
            let mut data = Vec::with_capacity(ids.len() * cols);
            for &id in ids {
                if id >= rows {
                    return Err(Error::shape("embedding_lookup", t.shape(), &[id]));
                }
                data.extend_from_slice(&t.data()[id * cols..(id + 1) * cols]);
            }
            Tensor::new(vec![ids.len(), cols], data)?
        };
        let rg = self.tape.rg(&[self.id]);
        Ok(self.tape.push(
            out,
            Op::Gather {
                table: self.id,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Inverse of [`Var::embedding_lookup`]: row `k` of `self` is added into
    /// row `index[k]` of a fresh `[rows, d]` tensor.
    pub fn scatter_add_rows(self, index: &[usize], rows: usize) -> Result<Var<'t>> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.id].value;
            if t.rank() != 2 || t.shape()[0] != index.len() || index.iter().any(|&r| r >= rows) {
                return Err(Error::shape("scatter_add_rows", t.shape(), &[index.len(), rows]));
            }
            let cols = t.shape()[1];
            let mut out = Tensor::zeros(&[rows, cols]);
            for (k, &r) in index.iter().enumerate() {
                let src = &t.data()[k * cols..(k + 1) * cols];
                for (a, b) in out.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                    *a += b;
                }
            }
            out
        };
        let rg = self.tape.rg(&[self.id]);
        Ok(self.tape.push(
            out,
            Op::ScatterAddRows {
                input: self.id,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(Error::shape("softmax", &s, &[axis]));
        }
        Ok(self.tape.unary(
            self,
            move |t| softmax_along(t, axis, false),
            Op::Softmax {
                input: self.id,
                axis,
            },
        ))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(Error::shape("log_softmax", &s, &[axis]));
        }
        Ok(self.tape.unary(
            self,
            move |t| softmax_along(t, axis, true),
            Op::LogSoftmax {
                input: self.id,
                axis,
            },
        ))
    }

    /// Softmax of a vector within groups: entries sharing a segment id are
    /// normalized together.
    pub fn segment_softmax(self, segments: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 1 || s[0] != segments.len() {
            return Err(Error::shape("segment_softmax", &s, &[segments.len()]));
        }
        let segs = segments.to_vec();
        Ok(self.tape.unary(
            self,
            move |t| {
                let nseg = segs.iter().copied().max().map_or(0, |m| m + 1);
                let mut max = vec![f64::NEG_INFINITY; nseg];
                for (&x, &g) in t.data().iter().zip(&segs) {
                    max[g] = max[g].max(x);
                }
                let e: Vec<f64> = t
                    .data()
                    .iter()
                    .zip(&segs)
                    .map(|(&x, &g)| (x - max[g]).exp())
                    .collect();
                let mut z = vec![0.0; nseg];
                for (&v, &g) in e.iter().zip(&segs) {
                    z[g] += v;
                }
                Tensor::vector(e.iter().zip(&segs).map(|(&v, &g)| v / z[g]).collect())
            },
            Op::SegmentSoftmax {
                input: self.id,
                segments: segments.to_vec(),
            },
        ))
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self, |t| map(t, f64::tanh), Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.unary(self, |t| map(t, sigmoid), Op::Sigmoid(self.id))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.tape.unary(
            self,
            move |t| map(t, |x| if x > 0.0 { x } else { slope * x }),
            Op::LeakyRelu(self.id, slope),
        )
    }

    pub fn elu(self) -> Var<'t> {
        self.tape.unary(
            self,
            |t| map(t, |x| if x > 0.0 { x } else { x.exp_m1() }),
            Op::Elu(self.id),
        )
    }

    pub fn log(self) -> Var<'t> {
        self.tape.unary(self, |t| map(t, f64::ln), Op::Log(self.id))
    }

    /// Inverted dropout. Identity outside training; otherwise the mask is
    /// drawn from a generator seeded with `seed`.
    pub fn dropout(self, rate: f64, train: bool, seed: u64) -> Var<'t> {
        if !train || rate <= 0.0 {
            return self;
        }
        let n = self.value().numel();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let m = mask.clone();
        self.tape.unary(
            self,
            move |t| zip(t, &Tensor::vector(m.clone()), |x, k| x * k),
            Op::Dropout {
                input: self.id,
                mask,
            },
        )
    }

    /// Replaces entries where `mask` is set by `value`.
    pub fn masked_fill(self, mask: &[bool], value: f64) -> Result<Var<'t>> {
        let n = self.value().numel();
        if mask.len() != n {
            return Err(Error::shape("masked_fill", &self.shape(), &[mask.len()]));
        }
        let m = mask.to_vec();
        Ok(self.tape.unary(
            self,
            move |t| {
                Tensor::new(
                    t.shape().to_vec(),
                    t.data()
                        .iter()
                        .zip(&m)
                        .map(|(&x, &f)| if f { value } else { x })
                        .collect(),
                )
                .unwrap()
            },
            Op::MaskedFill {
                input: self.id,
                mask: mask.to_vec(),
            },
        ))
    }

    /// `-logprobs[target]` for a vector of log-probabilities.
    pub fn nll_loss(self, target: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 1 || target >= s[0] {
            return Err(Error::shape("nll_loss", &s, &[target]));
        }
        Ok(self.tape.unary(
            self,
            move |t| Tensor::scalar(-t.data()[target]),
            Op::NllLoss {
                input: self.id,
                target,
            },
        ))
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

fn softmax_along(t: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, n, inner) = split_axis(t.shape(), axis);
    let mut out = Tensor::zeros(t.shape());
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| o * n * inner + k * inner + i;
            let max = (0..n)
                .map(|k| t.data()[idx(k)])
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..n).map(|k| (t.data()[idx(k)] - max).exp()).sum();
            let lz = z.ln();
            for k in 0..n {
                let shifted = t.data()[idx(k)] - max;
                out.data_mut()[idx(k)] = if log {
                    shifted - lz
                } else {
                    shifted.exp() / z
                };
            }
        }
    }
    out
}
