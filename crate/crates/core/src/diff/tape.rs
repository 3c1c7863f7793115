//! Operation recording and reverse sweep.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. [`Var`] is a
//! copyable handle into it. Calling [`Tape::backward`] on a scalar output walks
//! the recorded nodes in reverse and accumulates vector-Jacobian products into
//! a [`Gradients`] table.

use std::cell::{Ref, RefCell};

use super::tensor::{axis_split, matmul_nt_into, matmul_tn_into, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Tanh,
    Relu,
    Sigmoid,
    Exp,
    Ln,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Reduce {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Binary(Binary, usize, usize),
    Unary(Unary, usize),
    Affine { x: usize, scale: f64 },
    Powf { x: usize, exponent: f64 },
    Clamp { x: usize, lo: f64, hi: f64 },
    Softmax { x: usize, axis: usize },
    Reduce { op: Reduce, x: usize, axis: Option<usize>, argmax: Vec<usize> },
    Reshape(usize),
    Transpose(usize),
    RowBias { x: usize, bias: usize },
    Conv1d { x: usize, filters: usize, dilation: usize },
    Slice { x: usize, axis: usize, start: usize },
    Concat { xs: Vec<usize>, axis: usize },
    Stack(Vec<usize>),
    TopkMask { x: usize, mask: Vec<f64> },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
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
            .field("id", &self.id)
            .field("shape", &self.shape())
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

    /// Trainable input: gradients are accumulated for it.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Input excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
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

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let rg = self.needs(inputs);
        self.push(value, op, rg)
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat<'t>(&'t self, xs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let nodes = self.nodes.borrow();
        let first = &nodes[xs.first().ok_or_else(|| Error::Param("concat of nothing".into()))?.id].value;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::Param(format!("concat axis {axis} out of range for rank {rank}")));
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = 0;
        for v in xs {
            let s = nodes[v.id].value.shape();
            let ok = s.len() == rank
                && s.iter()
                    .enumerate()
                    .all(|(i, &d)| i == axis || d == first.shape()[i]);
            if !ok {
                return Err(Error::shape("concat", first.shape(), s));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for v in xs {
                let t = &nodes[v.id].value;
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        drop(nodes);
        let ids: Vec<usize> = xs.iter().map(|v| v.id).collect();
        Ok(self.record(
            Tensor::from_parts(out_shape, data),
            Op::Concat {
                xs: ids.clone(),
                axis,
            },
            &ids,
        ))
    }

    /// Stacks equally shaped tensors along a new trailing axis.
    pub fn stack<'t>(&'t self, xs: &[Var<'t>]) -> Result<Var<'t>> {
        let nodes = self.nodes.borrow();
        let first = &nodes[xs.first().ok_or_else(|| Error::Param("stack of nothing".into()))?.id].value;
        for v in xs {
            if nodes[v.id].value.shape() != first.shape() {
                return Err(Error::shape("stack", first.shape(), nodes[v.id].value.shape()));
            }
        }
        let k = xs.len();
        let n = first.numel();
        let mut data = vec![0.0; n * k];
        for (c, v) in xs.iter().enumerate() {
            for (i, &x) in nodes[v.id].value.data().iter().enumerate() {
                data[i * k + c] = x;
            }
        }
        let mut shape = first.shape().to_vec();
        shape.push(k);
        drop(nodes);
        let ids: Vec<usize> = xs.iter().map(|v| v.id).collect();
        Ok(self.record(Tensor::from_parts(shape, data), Op::Stack(ids.clone()), &ids))
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id].value;
        if out.numel() != 1 {
            return Err(Error::Param(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[output.id] = Some(vec![1.0]);

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }
}

/// Result of a reverse sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if no path reached it.
    pub fn get(&self, v: Var<'_>) -> Option<Tensor> {
        let shape = v.shape();
        self.grads
            .get(v.id)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(shape, g.clone()))
    }

    /// Gradient with respect to `v`, zeros if unreachable.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Reduces a gradient of the broadcast output shape back to an operand.
fn unbroadcast(g: Vec<f64>, operand_numel: usize) -> Vec<f64> {
    if operand_numel == g.len() {
        g
    } else {
        vec![g.iter().sum()]
    }
}

fn backprop_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (ta, tb) = (&nodes[a].value, &nodes[b].value);
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if nodes[a].requires_grad {
                let mut ga = vec![0.0; m * k];
                matmul_nt_into(g, tb.data(), &mut ga, m, n, k);
                accumulate(grads, nodes, a, ga);
            }
            if nodes[b].requires_grad {
                let mut gb = vec![0.0; k * n];
                matmul_tn_into(ta.data(), g, &mut gb, m, k, n);
                accumulate(grads, nodes, b, gb);
            }
        }
        &Op::Binary(kind, a, b) => {
            let (ta, tb) = (&nodes[a].value, &nodes[b].value);
            let n = g.len();
            let av = |i: usize| if ta.numel() == 1 { ta.data()[0] } else { ta.data()[i] };
            let bv = |i: usize| if tb.numel() == 1 { tb.data()[0] } else { tb.data()[i] };
            let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                Binary::Add => (g.to_vec(), g.to_vec()),
                Binary::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                Binary::Mul => (
                    (0..n).map(|i| g[i] * bv(i)).collect(),
                    (0..n).map(|i| g[i] * av(i)).collect(),
                ),
                // ties route to the left operand
                Binary::Max => (0..n)
                    .map(|i| if av(i) >= bv(i) { (g[i], 0.0) } else { (0.0, g[i]) })
                    .unzip(),
            };
            accumulate(grads, nodes, a, unbroadcast(ga, ta.numel()));
            accumulate(grads, nodes, b, unbroadcast(gb, tb.numel()));
        }
        &Op::Unary(kind, x) => {
            let xv = nodes[x].value.data();
            let gx: Vec<f64> = match kind {
                Unary::Tanh => g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                Unary::Relu => g
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
                Unary::Sigmoid => g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                Unary::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                Unary::Ln => g.iter().zip(xv).map(|(g, x)| g / x).collect(),
            };
            accumulate(grads, nodes, x, gx);
        }
        &Op::Affine { x, scale } => {
            accumulate(grads, nodes, x, g.iter().map(|v| v * scale).collect());
        }
        &Op::Powf { x, exponent } => {
            let xv = nodes[x].value.data();
            let gx = g
                .iter()
                .zip(xv)
                .map(|(g, &x)| g * exponent * x.powf(exponent - 1.0))
                .collect();
            accumulate(grads, nodes, x, gx);
        }
        &Op::Clamp { x, lo, hi } => {
            let xv = nodes[x].value.data();
            let gx = g
                .iter()
                .zip(xv)
                .map(|(g, &x)| if x >= lo && x <= hi { *g } else { 0.0 })
                .collect();
            accumulate(grads, nodes, x, gx);
        }
        &Op::Softmax { x, axis } => {
            let (outer, len, inner) = axis_split(node.value.shape(), axis);
            let mut gx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| (o * len + a) * inner + i;
                    let dot: f64 = (0..len).map(|a| g[idx(a)] * y[idx(a)]).sum();
                    for a in 0..len {
                        gx[idx(a)] = y[idx(a)] * (g[idx(a)] - dot);
                    }
                }
            }
            accumulate(grads, nodes, x, gx);
        }
        Op::Reduce { op, x, axis, argmax } => {
            let xs = nodes[*x].value.shape();
            let numel = nodes[*x].value.numel();
            let mut gx = vec![0.0; numel];
            match axis {
                None => match op {
                    Reduce::Sum => gx.iter_mut().for_each(|v| *v = g[0]),
                    Reduce::Mean => gx.iter_mut().for_each(|v| *v = g[0] / numel as f64),
                    Reduce::Max => gx[argmax[0]] = g[0],
                },
                Some(axis) => {
                    let (outer, len, inner) = axis_split(xs, *axis);
                    for o in 0..outer {
                        for i in 0..inner {
                            let gi = g[o * inner + i];
                            match op {
                                Reduce::Sum | Reduce::Mean => {
                                    let scale = if *op == Reduce::Mean { 1.0 / len as f64 } else { 1.0 };
                                    for a in 0..len {
                                        gx[(o * len + a) * inner + i] = gi * scale;
                                    }
                                }
                                Reduce::Max => {
                                    let a = argmax[o * inner + i];
                                    gx[(o * len + a) * inner + i] = gi;
                                }
                            }
                        }
                    }
                }
            }
            accumulate(grads, nodes, *x, gx);
        }
        &Op::Reshape(x) => accumulate(grads, nodes, x, g.to_vec()),
        &Op::Transpose(x) => {
            let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
            let mut gx = vec![0.0; g.len()];
            for i in 0..r {
                for j in 0..c {
                    gx[j * r + i] = g[i * c + j];
                }
            }
            accumulate(grads, nodes, x, gx);
        }
        &Op::RowBias { x, bias } => {
            let n = nodes[bias].value.numel();
            if nodes[bias].requires_grad {
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    for (b, v) in gb.iter_mut().zip(row) {
                        *b += v;
                    }
                }
                accumulate(grads, nodes, bias, gb);
            }
            accumulate(grads, nodes, x, g.to_vec());
        }
        &Op::Conv1d { x, filters, dilation } => {
            let (tx, tf) = (&nodes[x].value, &nodes[filters].value);
            let (b, t_in, c_in) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
            let (c_out, d) = (tf.shape()[0], tf.shape()[2]);
            let t_out = node.value.shape()[1];
            let (xv, fv) = (tx.data(), tf.data());
            let mut gx = vec![0.0; xv.len()];
            let mut gf = vec![0.0; fv.len()];
            for bi in 0..b {
                for t in 0..t_out {
                    let grow = &g[(bi * t_out + t) * c_out..(bi * t_out + t + 1) * c_out];
                    for s in 0..d {
                        let src = (bi * t_in + t + dilation * s) * c_in;
                        for (o, &go) in grow.iter().enumerate() {
                            if go == 0.0 {
                                continue;
                            }
                            for c in 0..c_in {
                                let fi = (o * c_in + c) * d + s;
                                gx[src + c] += go * fv[fi];
                                gf[fi] += go * xv[src + c];
                            }
                        }
                    }
                }
            }
            accumulate(grads, nodes, x, gx);
            accumulate(grads, nodes, filters, gf);
        }
        &Op::Slice { x, axis, start } => {
            let xs = nodes[x].value.shape();
            let (outer, len, inner) = axis_split(xs, axis);
            let out_len = node.value.shape()[axis];
            let mut gx = vec![0.0; nodes[x].value.numel()];
            for o in 0..outer {
                for a in 0..out_len {
                    let src = (o * out_len + a) * inner;
                    let dst = (o * len + start + a) * inner;
                    gx[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                }
            }
            accumulate(grads, nodes, x, gx);
        }
        Op::Concat { xs, axis } => {
            let out_shape = node.value.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let total = out_shape[*axis] * inner;
            let mut offset = 0;
            for &xi in xs {
                let chunk = nodes[xi].value.shape()[*axis] * inner;
                let mut gx = Vec::with_capacity(nodes[xi].value.numel());
                for o in 0..outer {
                    gx.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                }
                accumulate(grads, nodes, xi, gx);
                offset += chunk;
            }
        }
        Op::Stack(xs) => {
            let k = xs.len();
            for (c, &xi) in xs.iter().enumerate() {
                let gx = g.iter().skip(c).step_by(k).copied().collect();
                accumulate(grads, nodes, xi, gx);
            }
        }
        Op::TopkMask { x, mask } => {
            // straight-through: selected entries pass the gradient unchanged
            let gx = g.iter().zip(mask).map(|(g, m)| g * m).collect();
            accumulate(grads, nodes, *x, gx);
        }
        Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
            let n = nodes[*gain].value.numel();
            let gamma = nodes[*gain].value.data();
            let mut gx = vec![0.0; g.len()];
            let mut ggain = vec![0.0; n];
            let mut gbias = vec![0.0; n];
            for (r, inv) in inv_std.iter().enumerate() {
                let gr = &g[r * n..(r + 1) * n];
                let hr = &xhat[r * n..(r + 1) * n];
                let mut sum_gh = 0.0;
                let mut sum_ghh = 0.0;
                for j in 0..n {
                    ggain[j] += gr[j] * hr[j];
                    gbias[j] += gr[j];
                    let gh = gr[j] * gamma[j];
                    sum_gh += gh;
                    sum_ghh += gh * hr[j];
                }
                let nf = n as f64;
                for j in 0..n {
                    let gh = gr[j] * gamma[j];
                    gx[r * n + j] = inv / nf * (nf * gh - sum_gh - hr[j] * sum_ghh);
                }
            }
            accumulate(grads, nodes, *x, gx);
            accumulate(grads, nodes, *gain, ggain);
            accumulate(grads, nodes, *bias, gbias);
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_ref(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_ref(self.id).shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.value_ref(self.id).data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Copy of the value with no gradient path back to `self`.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let out = {
            let (a, b) = (self.tape.value_ref(self.id), self.tape.value_ref(other.id));
            a.matmul(&b)?
        };
        Ok(self.tape.record(out, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    fn binary(&self, other: &Var<'t>, kind: Binary, name: &'static str) -> Result<Var<'t>> {
        self.same_tape(other);
        let out = {
            let (a, b) = (self.tape.value_ref(self.id), self.tape.value_ref(other.id));
            let f = |x: f64, y: f64| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Max => x.max(y),
            };
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::from_parts(a.shape().to_vec(), data)
            } else if b.numel() == 1 {
                let y = b.data()[0];
                a.map(|x| f(x, y))
            } else if a.numel() == 1 {
                let x = a.data()[0];
                b.map(|y| f(x, y))
            } else {
                return Err(Error::shape(name, a.shape(), b.shape()));
            }
        };
        Ok(self.tape.record(out, Op::Binary(kind, self.id, other.id), &[self.id, other.id]))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add, "add")
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub, "sub")
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul, "mul")
    }

    /// Elementwise maximum; on ties the gradient goes to `self`.
    pub fn maximum(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Max, "maximum")
    }

    fn unary(&self, kind: Unary) -> Var<'t> {
        let out = {
            let x = self.tape.value_ref(self.id);
            match kind {
                Unary::Tanh => x.map(f64::tanh),
                Unary::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
                Unary::Sigmoid => x.map(sigmoid),
                Unary::Exp => x.map(f64::exp),
                Unary::Ln => x.map(f64::ln),
            }
        };
        self.tape.record(out, Op::Unary(kind, self.id), &[self.id])
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Unary::Relu)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Unary::Ln)
    }

    /// `scale * x + shift`.
    pub fn affine(&self, scale: f64, shift: f64) -> Var<'t> {
        let out = self.tape.value_ref(self.id).map(|v| scale * v + shift);
        self.tape.record(out, Op::Affine { x: self.id, scale }, &[self.id])
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        self.affine(factor, 0.0)
    }

    pub fn powf(&self, exponent: f64) -> Var<'t> {
        let out = self.tape.value_ref(self.id).map(|v| v.powf(exponent));
        self.tape.record(out, Op::Powf { x: self.id, exponent }, &[self.id])
    }

    /// Clamps into `[lo, hi]`; gradient is zero where clamping is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        let out = self.tape.value_ref(self.id).map(|v| v.clamp(lo, hi));
        self.tape.record(out, Op::Clamp { x: self.id, lo, hi }, &[self.id])
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let out = {
            let x = self.tape.value_ref(self.id);
            check_axis(x.shape(), axis)?;
            let (outer, len, inner) = axis_split(x.shape(), axis);
            let xv = x.data();
            let mut out = vec![0.0; xv.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| (o * len + a) * inner + i;
                    let m = (0..len).map(|a| xv[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for a in 0..len {
                        let e = (xv[idx(a)] - m).exp();
                        out[idx(a)] = e;
                        z += e;
                    }
                    for a in 0..len {
                        out[idx(a)] /= z;
                    }
                }
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        };
        Ok(self.tape.record(out, Op::Softmax { x: self.id, axis }, &[self.id]))
    }

    fn reduce(&self, op: Reduce, axis: Option<usize>) -> Result<Var<'t>> {
        let (out, argmax) = {
            let x = self.tape.value_ref(self.id);
            let xv = x.data();
            match axis {
                None => {
                    let (v, arg) = match op {
                        Reduce::Sum => (xv.iter().sum(), 0),
                        Reduce::Mean => (xv.iter().sum::<f64>() / xv.len() as f64, 0),
                        Reduce::Max => first_argmax(xv.iter().copied()),
                    };
                    (Tensor::scalar(v), vec![arg])
                }
                Some(axis) => {
                    check_axis(x.shape(), axis)?;
                    let (outer, len, inner) = axis_split(x.shape(), axis);
                    let mut out = Vec::with_capacity(outer * inner);
                    let mut args = Vec::new();
                    for o in 0..outer {
                        for i in 0..inner {
                            let lane = (0..len).map(|a| xv[(o * len + a) * inner + i]);
                            let v = match op {
                                Reduce::Sum => lane.sum(),
                                Reduce::Mean => lane.sum::<f64>() / len as f64,
                                Reduce::Max => {
                                    let (v, a) = first_argmax(lane);
                                    args.push(a);
                                    v
                                }
                            };
                            out.push(v);
                        }
                    }
                    let mut shape = x.shape().to_vec();
                    shape.remove(axis);
                    (Tensor::from_parts(shape, out), args)
                }
            }
        };
        Ok(self.tape.record(
            out,
            Op::Reduce {
                op,
                x: self.id,
                axis,
                argmax,
            },
            &[self.id],
        ))
    }

    /// Sum over `axis`, or over everything when `None`.
    pub fn sum(&self, axis: Option<usize>) -> Result<Var<'t>> {
        self.reduce(Reduce::Sum, axis)
    }

    pub fn mean(&self, axis: Option<usize>) -> Result<Var<'t>> {
        self.reduce(Reduce::Mean, axis)
    }

    /// Maximum; the gradient goes to the first maximal element.
    pub fn max(&self, axis: Option<usize>) -> Result<Var<'t>> {
        self.reduce(Reduce::Max, axis)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.tape.value_ref(self.id).reshaped(shape)?;
        Ok(self.tape.record(out, Op::Reshape(self.id), &[self.id]))
    }

    /// Matrix transpose.
    pub fn t(&self) -> Result<Var<'t>> {
        let out = {
            let x = self.tape.value_ref(self.id);
            if x.rank() != 2 {
                return Err(Error::shape("transpose", x.shape(), &[]));
            }
            x.transposed()
        };
        Ok(self.tape.record(out, Op::Transpose(self.id), &[self.id]))
    }

    /// Adds a length-n bias to every row of an m×n matrix.
    pub fn add_row_bias(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(bias);
        let out = {
            let (x, b) = (self.tape.value_ref(self.id), self.tape.value_ref(bias.id));
            let n = b.numel();
            if x.rank() != 2 || x.shape()[1] != n || b.rank() != 1 {
                return Err(Error::shape("add_row_bias", x.shape(), b.shape()));
            }
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(n) {
                for (v, bv) in row.iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        Ok(self.tape.record(out, Op::RowBias { x: self.id, bias: bias.id }, &[self.id, bias.id]))
    }

    /// Valid-mode dilated convolution over a batch of sequences.
    ///
    /// `self` is `[batch, time, c_in]`, `filters` is `[c_out, c_in, width]`,
    /// output is `[batch, time - (width-1)*dilation, c_out]` with
    /// `y[b,t,o] = Σ_{c,s} f[o,c,s] · x[b, t + dilation·s, c]`.
    pub fn conv1d(&self, filters: &Var<'t>, dilation: usize) -> Result<Var<'t>> {
        self.same_tape(filters);
        if dilation == 0 {
            return Err(Error::Param("dilation must be positive".into()));
        }
        let out = {
            let (x, f) = (self.tape.value_ref(self.id), self.tape.value_ref(filters.id));
            if x.rank() != 3 || f.rank() != 3 || x.shape()[2] != f.shape()[1] || f.shape()[2] == 0 {
                return Err(Error::shape("conv1d", x.shape(), f.shape()));
            }
            let (b, t_in, c_in) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (c_out, d) = (f.shape()[0], f.shape()[2]);
            let required = (d - 1) * dilation + 1;
            if t_in < required {
                return Err(Error::Length { len: t_in, required });
            }
            let t_out = t_in - (d - 1) * dilation;
            // filters regrouped as [s][c][o] for a contiguous inner loop
            let fv = f.data();
            let mut fr = vec![0.0; fv.len()];
            for o in 0..c_out {
                for c in 0..c_in {
                    for s in 0..d {
                        fr[(s * c_in + c) * c_out + o] = fv[(o * c_in + c) * d + s];
                    }
                }
            }
            let xv = x.data();
            let mut out = vec![0.0; b * t_out * c_out];
            for bi in 0..b {
                for t in 0..t_out {
                    let orow = &mut out[(bi * t_out + t) * c_out..(bi * t_out + t + 1) * c_out];
                    for s in 0..d {
                        let src = (bi * t_in + t + dilation * s) * c_in;
                        for c in 0..c_in {
                            let xval = xv[src + c];
                            if xval == 0.0 {
                                continue;
                            }
                            let frow = &fr[(s * c_in + c) * c_out..(s * c_in + c + 1) * c_out];
                            for (o, w) in orow.iter_mut().zip(frow) {
                                *o += xval * w;
                            }
                        }
                    }
                }
            }
            Tensor::from_parts(vec![b, t_out, c_out], out)
        };
        Ok(self.tape.record(
            out,
            Op::Conv1d {
                x: self.id,
                filters: filters.id,
                dilation,
            },
            &[self.id, filters.id],
        ))
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let out = {
            let x = self.tape.value_ref(self.id);
            check_axis(x.shape(), axis)?;
            if start + len > x.shape()[axis] {
                return Err(Error::Param(format!(
                    "slice {start}..{} exceeds axis length {}",
                    start + len,
                    x.shape()[axis]
                )));
            }
            let (outer, full, inner) = axis_split(x.shape(), axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let from = (o * full + start) * inner;
                data.extend_from_slice(&x.data()[from..from + len * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = len;
            Tensor::from_parts(shape, data)
        };
        Ok(self.tape.record(out, Op::Slice { x: self.id, axis, start }, &[self.id]))
    }

    /// Binary mask with exactly `k` ones per row at the row's largest entries
    /// (ties to the lower column). Backward is straight-through.
    pub fn topk_mask(&self, k: usize) -> Result<Var<'t>> {
        let mask = {
            let x = self.tape.value_ref(self.id);
            if x.rank() != 2 {
                return Err(Error::shape("topk_mask", x.shape(), &[]));
            }
            let cols = x.shape()[1];
            if k == 0 || k > cols {
                return Err(Error::Param(format!("top-k needs 1 <= k <= {cols}, got {k}")));
            }
            topk_rows(x.data(), cols, k)
        };
        let shape = self.shape();
        Ok(self.tape.record(
            Tensor::from_parts(shape, mask.clone()),
            Op::TopkMask { x: self.id, mask },
            &[self.id],
        ))
    }

    /// Row-wise normalization over the last axis of an m×n matrix, then
    /// `gain ⊙ x̂ + bias`. Population variance, `eps` inside the root.
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.same_tape(gain);
        self.same_tape(bias);
        let (out, xhat, inv_std) = {
            let x = self.tape.value_ref(self.id);
            let (g, b) = (self.tape.value_ref(gain.id), self.tape.value_ref(bias.id));
            if x.rank() != 2 || g.numel() != x.shape()[1] || b.numel() != x.shape()[1] {
                return Err(Error::shape("layer_norm", x.shape(), g.shape()));
            }
            let n = x.shape()[1];
            let mut out = Vec::with_capacity(x.numel());
            let mut xhat = Vec::with_capacity(x.numel());
            let mut inv_std = Vec::with_capacity(x.shape()[0]);
            for row in x.data().chunks(n) {
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std.push(inv);
                for (j, v) in row.iter().enumerate() {
                    let h = (v - mean) * inv;
                    xhat.push(h);
                    out.push(h * g.data()[j] + b.data()[j]);
                }
            }
            (Tensor::from_parts(x.shape().to_vec(), out), xhat, inv_std)
        };
        Ok(self.tape.record(
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            &[self.id, gain.id, bias.id],
        ))
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn first_argmax(values: impl Iterator<Item = f64>) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, v) in values.enumerate() {
        if v > best.0 || i == 0 {
            best = (v, i);
        }
    }
    best
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Param(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

/// Row-wise top-k selection on a row-major matrix with `cols` columns.
pub fn topk_rows(scores: &[f64], cols: usize, k: usize) -> Vec<f64> {
    let mut mask = vec![0.0; scores.len()];
    let mut order: Vec<usize> = Vec::with_capacity(cols);
    for (r, row) in scores.chunks(cols).enumerate() {
        order.clear();
        order.extend(0..cols);
        // stable sort keeps lower indices first among equal scores
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        for &c in &order[..k] {
            mask[r * cols + c] = 1.0;
        }
    }
    mask
}
