//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to a [`Tape`]; node ids are assigned in
//! creation order, so the node list is always topologically sorted and a
//! single reverse sweep visits each node exactly once.
//!
//! ```
//! use uqd_core::autodiff::Tape;
//! use uqd_core::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![3.0]));
//! let loss = x.mul(x).unwrap().sum().unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(x.grad().unwrap().data(), &[6.0]);
//! ```
//!
//! Gradients are reset before every [`Tape::backward`]; use
//! [`Tape::backward_accumulate`] to add into the existing leaf gradients.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::maps::PROB_FLOOR;
use crate::tensor::{axis_extents, Tensor};

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Ln { a: usize, floor: f64 },
    Sigmoid(usize),
    Silu(usize),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    Softmax { a: usize, axis: usize },
    LogSoftmax { a: usize, axis: usize },
    Conv2d { x: usize, w: usize, b: usize },
    AvgPool2(usize),
    Upsample2(usize),
    Concat(Vec<usize>),
    MaskMul { a: usize, mask: Vec<f64> },
    GlobalAvgPool(usize),
    Reshape(usize),
    Slice { a: usize, start: usize },
    Stack(Vec<usize>),
    Select { a: usize, index: usize },
    Cosine(usize, usize),
    BinaryKl { q: usize, target: Vec<f64> },
    BinaryXent { q: usize, target: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of a computation; owns every intermediate value.
///
/// A tape and its variables are confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

/// Handle to a node on a [`Tape`].
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

    /// Trainable leaf: its gradient is populated by `backward`.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, false)
    }

    fn push_unchecked(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
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

    fn push(&self, value: Tensor, op: Op, name: &str) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "{name} produced a non-finite value"
            )));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents(&op).iter().any(|&p| nodes[p].requires_grad)
        };
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse sweep from `loss`, resetting all leaf gradients first.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        self.backward_impl(loss, true)
    }

    /// Reverse sweep from `loss`, adding into existing leaf gradients.
    pub fn backward_accumulate(&self, loss: Var<'_>) -> Result<()> {
        self.backward_impl(loss, false)
    }

    /// Clears all stored leaf gradients.
    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    fn backward_impl(&self, loss: Var<'_>, reset: bool) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if !nodes[loss.id].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }

        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        if nodes[loss.id].requires_grad {
            local[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = local[id].take() else { continue };
            if matches!(nodes[id].op, Op::Leaf) {
                local[id] = Some(g);
                continue;
            }
            propagate(&nodes, id, &g, &mut local);
        }

        let mut grads = self.grads.borrow_mut();
        if reset {
            grads.clear();
        }
        grads.resize(nodes.len(), None);
        for (id, node) in nodes.iter().enumerate() {
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                continue;
            }
            let contribution = local
                .get_mut(id)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![0.0; node.value.len()]);
            match &mut grads[id] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(&contribution) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contribution),
            }
        }
        Ok(())
    }
}

fn parents(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Cosine(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Exp(a)
        | Op::Ln { a, .. }
        | Op::Sigmoid(a)
        | Op::Silu(a)
        | Op::Relu(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Softmax { a, .. }
        | Op::LogSoftmax { a, .. }
        | Op::AvgPool2(a)
        | Op::Upsample2(a)
        | Op::MaskMul { a, .. }
        | Op::GlobalAvgPool(a)
        | Op::Reshape(a)
        | Op::Slice { a, .. }
        | Op::Select { a, .. }
        | Op::BinaryKl { q: a, .. }
        | Op::BinaryXent { q: a, .. } => vec![*a],
        Op::Conv2d { x, w, b } => vec![*x, *w, *b],
        Op::Concat(ids) | Op::Stack(ids) => ids.clone(),
    }
}

/// Adds into the gradient slot of `id`, allocating zeros on first touch.
fn accumulate(
    nodes: &[Node],
    local: &mut [Option<Vec<f64>>],
    id: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = local[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
    let out = nodes[id].value.data();
    let val = |i: usize| nodes[i].value.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, local, *a, |s| add_into(s, g));
            accumulate(nodes, local, *b, |s| add_into(s, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, local, *a, |s| add_into(s, g));
            accumulate(nodes, local, *b, |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s -= g)
            });
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            accumulate(nodes, local, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * vb[i];
                }
            });
            accumulate(nodes, local, *b, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * va[i];
                }
            });
        }
        Op::Div(a, b) => {
            let vb = val(*b);
            accumulate(nodes, local, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] / vb[i];
                }
            });
            accumulate(nodes, local, *b, |s| {
                for i in 0..s.len() {
                    s[i] -= g[i] * out[i] / vb[i];
                }
            });
        }
        Op::Scale(a, c) => accumulate(nodes, local, *a, |s| {
            s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g)
        }),
        Op::AddScalar(a) | Op::Reshape(a) => accumulate(nodes, local, *a, |s| add_into(s, g)),
        Op::Exp(a) => accumulate(nodes, local, *a, |s| {
            for i in 0..s.len() {
                s[i] += g[i] * out[i];
            }
        }),
        Op::Ln { a, floor } => {
            let va = val(*a);
            accumulate(nodes, local, *a, |s| {
                for i in 0..s.len() {
                    if va[i] > *floor {
                        s[i] += g[i] / va[i];
                    }
                }
            })
        }
        Op::Sigmoid(a) => accumulate(nodes, local, *a, |s| {
            for i in 0..s.len() {
                s[i] += g[i] * out[i] * (1.0 - out[i]);
            }
        }),
        Op::Silu(a) => {
            let va = val(*a);
            accumulate(nodes, local, *a, |s| {
                for i in 0..s.len() {
                    let sg = sigmoid_scalar(va[i]);
                    s[i] += g[i] * (sg + va[i] * sg * (1.0 - sg));
                }
            })
        }
        Op::Relu(a) => {
            let va = val(*a);
            accumulate(nodes, local, *a, |s| {
                for i in 0..s.len() {
                    if va[i] > 0.0 {
                        s[i] += g[i];
                    }
                }
            })
        }
        Op::Sum(a) => accumulate(nodes, local, *a, |s| s.iter_mut().for_each(|s| *s += g[0])),
        Op::Mean(a) => accumulate(nodes, local, *a, |s| {
            let d = g[0] / s.len() as f64;
            s.iter_mut().for_each(|s| *s += d)
        }),
        Op::Softmax { a, axis } => {
            let (outer, n, inner) = axis_extents(nodes[*a].value.shape(), *axis).unwrap();
            accumulate(nodes, local, *a, |s| {
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + k;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * out[idx(j)]).sum();
                        for j in 0..n {
                            s[idx(j)] += out[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            })
        }
        Op::LogSoftmax { a, axis } => {
            let (outer, n, inner) = axis_extents(nodes[*a].value.shape(), *axis).unwrap();
            accumulate(nodes, local, *a, |s| {
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + k;
                        let gsum: f64 = (0..n).map(|j| g[idx(j)]).sum();
                        for j in 0..n {
                            s[idx(j)] += g[idx(j)] - out[idx(j)].exp() * gsum;
                        }
                    }
                }
            })
        }
        Op::Conv2d { x, w, b } => {
            let xs = nodes[*x].value.shape();
            let ws = nodes[*w].value.shape();
            let geom = ConvGeom::new(xs, ws);
            let (vx, vw) = (val(*x), val(*w));
            accumulate(nodes, local, *x, |s| conv2d_backward_input(&geom, vw, g, s));
            accumulate(nodes, local, *w, |s| {
                conv2d_backward_weight(&geom, vx, g, s)
            });
            accumulate(nodes, local, *b, |s| {
                let hw = geom.h * geom.w;
                for (co, s) in s.iter_mut().enumerate() {
                    *s += g[co * hw..(co + 1) * hw].iter().sum::<f64>();
                }
            });
        }
        Op::AvgPool2(a) => {
            let sh = nodes[*a].value.shape();
            let (c, h, w) = (sh[0], sh[1], sh[2]);
            let (ho, wo) = (h / 2, w / 2);
            accumulate(nodes, local, *a, |s| {
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            s[(ch * h + y) * w + x] += 0.25 * g[(ch * ho + y / 2) * wo + x / 2];
                        }
                    }
                }
            })
        }
        Op::Upsample2(a) => {
            let sh = nodes[*a].value.shape();
            let (c, h, w) = (sh[0], sh[1], sh[2]);
            let (ho, wo) = (2 * h, 2 * w);
            accumulate(nodes, local, *a, |s| {
                for ch in 0..c {
                    for y in 0..ho {
                        for x in 0..wo {
                            s[(ch * h + y / 2) * w + x / 2] += g[(ch * ho + y) * wo + x];
                        }
                    }
                }
            })
        }
        Op::Concat(ids) | Op::Stack(ids) => {
            let mut offset = 0;
            for &p in ids {
                let n = nodes[p].value.len();
                let part = &g[offset..offset + n];
                accumulate(nodes, local, p, |s| add_into(s, part));
                offset += n;
            }
        }
        Op::MaskMul { a, mask } => accumulate(nodes, local, *a, |s| {
            for i in 0..s.len() {
                s[i] += g[i] * mask[i];
            }
        }),
        Op::GlobalAvgPool(a) => {
            let sh = nodes[*a].value.shape();
            let hw = sh[1] * sh[2];
            accumulate(nodes, local, *a, |s| {
                for (c, gc) in g.iter().enumerate() {
                    let d = gc / hw as f64;
                    s[c * hw..(c + 1) * hw].iter_mut().for_each(|s| *s += d);
                }
            })
        }
        Op::Slice { a, start } => accumulate(nodes, local, *a, |s| {
            add_into(&mut s[*start..*start + g.len()], g)
        }),
        Op::Select { a, index } => accumulate(nodes, local, *a, |s| s[*index] += g[0]),
        Op::Cosine(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let na = norm(va);
            let nb = norm(vb);
            let sim = out[0];
            accumulate(nodes, local, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[0] * (vb[i] / (na * nb) - sim * va[i] / (na * na));
                }
            });
            accumulate(nodes, local, *b, |s| {
                for i in 0..s.len() {
                    s[i] += g[0] * (va[i] / (na * nb) - sim * vb[i] / (nb * nb));
                }
            });
        }
        Op::BinaryKl { q, target } | Op::BinaryXent { q, target } => {
            let vq = val(*q);
            let scale = g[0] / vq.len() as f64;
            accumulate(nodes, local, *q, |s| {
                for i in 0..s.len() {
                    let (p, qi) = (target[i], vq[i]);
                    let mut d = 0.0;
                    if qi > PROB_FLOOR {
                        d -= p / qi;
                    }
                    if 1.0 - qi > PROB_FLOOR {
                        d += (1.0 - p) / (1.0 - qi);
                    }
                    s[i] += scale * d;
                }
            })
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Logistic function, evaluated without overflow for any finite input.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct ConvGeom {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize]) -> Self {
        Self {
            cin: xs[0],
            h: xs[1],
            w: xs[2],
            cout: ws[0],
            k: ws[2],
        }
    }

    /// For kernel offset `d` (already centred), the output range whose
    /// shifted input index stays inside `0..len`.
    fn valid(len: usize, d: isize) -> (usize, usize) {
        let lo = (-d).max(0) as usize;
        let hi = (len as isize - d.max(0)) as usize;
        (lo, hi.max(lo))
    }

    /// Calls `f(co, ci, kernel index, dy, dx)` for every weight tap.
    fn taps(&self, mut f: impl FnMut(usize, usize, usize, isize, isize)) {
        let pad = (self.k / 2) as isize;
        for co in 0..self.cout {
            for ci in 0..self.cin {
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let widx = ((co * self.cin + ci) * self.k + ky) * self.k + kx;
                        f(co, ci, widx, ky as isize - pad, kx as isize - pad);
                    }
                }
            }
        }
    }
}

fn conv2d_forward(geom: &ConvGeom, x: &[f64], wt: &[f64], bias: &[f64]) -> Vec<f64> {
    let (h, w) = (geom.h, geom.w);
    let hw = h * w;
    let mut out = vec![0.0; geom.cout * hw];
    for (co, b) in bias.iter().enumerate() {
        out[co * hw..(co + 1) * hw].iter_mut().for_each(|o| *o = *b);
    }
    geom.taps(|co, ci, widx, dy, dx| {
        let wv = wt[widx];
        if wv == 0.0 {
            return;
        }
        let (y0, y1) = ConvGeom::valid(h, dy);
        let (x0, x1) = ConvGeom::valid(w, dx);
        for y in y0..y1 {
            let yi = (y as isize + dy) as usize;
            let o_row = &mut out[co * hw + y * w + x0..co * hw + y * w + x1];
            let i_start = (ci * hw + yi * w) as isize + x0 as isize + dx;
            let i_row = &x[i_start as usize..i_start as usize + (x1 - x0)];
            for (o, i) in o_row.iter_mut().zip(i_row) {
                *o += wv * i;
            }
        }
    });
    out
}

fn conv2d_backward_input(geom: &ConvGeom, wt: &[f64], g: &[f64], gx: &mut [f64]) {
    let (h, w) = (geom.h, geom.w);
    let hw = h * w;
    geom.taps(|co, ci, widx, dy, dx| {
        let wv = wt[widx];
        let (y0, y1) = ConvGeom::valid(h, dy);
        let (x0, x1) = ConvGeom::valid(w, dx);
        for y in y0..y1 {
            let yi = (y as isize + dy) as usize;
            let g_row = &g[co * hw + y * w + x0..co * hw + y * w + x1];
            let i_start = ((ci * hw + yi * w) as isize + x0 as isize + dx) as usize;
            let gx_row = &mut gx[i_start..i_start + (x1 - x0)];
            for (d, gv) in gx_row.iter_mut().zip(g_row) {
                *d += wv * gv;
            }
        }
    });
}

fn conv2d_backward_weight(geom: &ConvGeom, x: &[f64], g: &[f64], gw: &mut [f64]) {
    let (h, w) = (geom.h, geom.w);
    let hw = h * w;
    geom.taps(|co, ci, widx, dy, dx| {
        let (y0, y1) = ConvGeom::valid(h, dy);
        let (x0, x1) = ConvGeom::valid(w, dx);
        let mut acc = 0.0;
        for y in y0..y1 {
            let yi = (y as isize + dy) as usize;
            let g_row = &g[co * hw + y * w + x0..co * hw + y * w + x1];
            let i_start = ((ci * hw + yi * w) as isize + x0 as isize + dx) as usize;
            let i_row = &x[i_start..i_start + (x1 - x0)];
            acc += g_row.iter().zip(i_row).map(|(a, b)| a * b).sum::<f64>();
        }
        gw[widx] += acc;
    });
}

fn check_same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    /// Copy of the current value.
    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    /// Borrow of the current value; drop it before recording new ops.
    pub fn value_ref(&self) -> Ref<'t, Tensor> {
        self.tape.value(self.id)
    }

    /// First element, for scalar results.
    pub fn item(&self) -> f64 {
        self.tape.value(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Gradient of the last backward pass, for trainable leaves.
    pub fn grad(&self) -> Option<Tensor> {
        let grads = self.tape.grads.borrow();
        let g = grads.get(self.id)?.as_ref()?;
        let shape = self.shape();
        Some(Tensor::new(shape, g.clone()).expect("gradient matches value shape"))
    }

    fn unary(self, op: Op, name: &str, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let value = self.tape.value(self.id).map(f);
        self.tape.push(value, op, name)
    }

    fn binary(
        self,
        other: Var<'t>,
        op: Op,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            check_same_shape(&a, &b, name)?;
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        self.tape.push(value, op, name)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add(self.id, other.id), "add", |a, b| a + b)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub(self.id, other.id), "sub", |a, b| a - b)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul(self.id, other.id), "mul", |a, b| a * b)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Div(self.id, other.id), "div", |a, b| a / b)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::Scale(self.id, c), "scale", |a| c * a)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::AddScalar(self.id), "add_scalar", |a| a + c)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(Op::Exp(self.id), "exp", f64::exp)
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn ln_clamped(self, floor: f64) -> Result<Var<'t>> {
        self.unary(Op::Ln { a: self.id, floor }, "ln", |a| a.max(floor).ln())
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(Op::Sigmoid(self.id), "sigmoid", sigmoid_scalar)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(self) -> Result<Var<'t>> {
        self.unary(Op::Silu(self.id), "silu", |a| a * sigmoid_scalar(a))
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(Op::Relu(self.id), "relu", |a| a.max(0.0))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let s = self.tape.value(self.id).data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), "sum")
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let m = {
            let v = self.tape.value(self.id);
            v.data().iter().sum::<f64>() / v.len() as f64
        };
        self.tape.push(Tensor::scalar(m), Op::Mean(self.id), "mean")
    }

    /// Softmax along `axis`, stabilised by subtracting the per-slice maximum.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let value = {
            let v = self.tape.value(self.id);
            softmax_tensor(&v, axis, false)?
        };
        self.tape
            .push(value, Op::Softmax { a: self.id, axis }, "softmax")
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        let value = {
            let v = self.tape.value(self.id);
            softmax_tensor(&v, axis, true)?
        };
        self.tape
            .push(value, Op::LogSoftmax { a: self.id, axis }, "log_softmax")
    }

    /// Same-padded 2-D convolution of a `[Cin, H, W]` input with an odd
    /// `[Cout, Cin, K, K]` kernel and `[Cout]` bias.
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value(self.id);
            let wt = self.tape.value(weight.id);
            let b = self.tape.value(bias.id);
            let (xs, ws) = (x.shape(), wt.shape());
            if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] || ws[2] % 2 == 0
            {
                return Err(Error::Dimension(format!(
                    "conv2d: input {xs:?} incompatible with kernel {ws:?}"
                )));
            }
            if b.shape() != [ws[0]] {
                return Err(Error::Dimension(format!(
                    "conv2d: bias {:?} for {} output channels",
                    b.shape(),
                    ws[0]
                )));
            }
            let geom = ConvGeom::new(xs, ws);
            let data = conv2d_forward(&geom, x.data(), wt.data(), b.data());
            Tensor::new(vec![ws[0], xs[1], xs[2]], data)?
        };
        self.tape.push(
            value,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.id,
            },
            "conv2d",
        )
    }

    /// 2×2 average pooling of a `[C, H, W]` tensor with even H and W.
    pub fn avg_pool2(self) -> Result<Var<'t>> {
        let value = {
            let v = self.tape.value(self.id);
            let sh = v.shape();
            if sh.len() != 3 || !sh[1].is_multiple_of(2) || !sh[2].is_multiple_of(2) {
                return Err(Error::Dimension(format!(
                    "avg_pool2 needs [C, even H, even W], got {sh:?}"
                )));
            }
            let (c, h, w) = (sh[0], sh[1], sh[2]);
            let (ho, wo) = (h / 2, w / 2);
            let d = v.data();
            let mut out = vec![0.0; c * ho * wo];
            for ch in 0..c {
                for y in 0..ho {
                    for x in 0..wo {
                        let at = |yy: usize, xx: usize| d[(ch * h + yy) * w + xx];
                        out[(ch * ho + y) * wo + x] = 0.25
                            * (at(2 * y, 2 * x)
                                + at(2 * y, 2 * x + 1)
                                + at(2 * y + 1, 2 * x)
                                + at(2 * y + 1, 2 * x + 1));
                    }
                }
            }
            Tensor::new(vec![c, ho, wo], out)?
        };
        self.tape.push(value, Op::AvgPool2(self.id), "avg_pool2")
    }

    /// Nearest-neighbour 2× upsampling of a `[C, H, W]` tensor.
    pub fn upsample2(self) -> Result<Var<'t>> {
        let value = {
            let v = self.tape.value(self.id);
            let sh = v.shape();
            if sh.len() != 3 {
                return Err(Error::Dimension(format!(
                    "upsample2 needs [C, H, W], got {sh:?}"
                )));
            }
            let (c, h, w) = (sh[0], sh[1], sh[2]);
            let (ho, wo) = (2 * h, 2 * w);
            let d = v.data();
            let mut out = vec![0.0; c * ho * wo];
            for ch in 0..c {
                for y in 0..ho {
                    for x in 0..wo {
                        out[(ch * ho + y) * wo + x] = d[(ch * h + y / 2) * w + x / 2];
                    }
                }
            }
            Tensor::new(vec![c, ho, wo], out)?
        };
        self.tape.push(value, Op::Upsample2(self.id), "upsample2")
    }

    /// Concatenation along the leading axis; trailing dims must agree.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tape = first.tape;
        let value = {
            let head = tape.value(first.id);
            let trailing = head.shape()[1..].to_vec();
            let mut lead = 0;
            let mut data = Vec::new();
            for p in parts {
                let v = tape.value(p.id);
                if v.rank() == 0 || v.shape()[1..] != trailing[..] {
                    return Err(Error::Dimension(format!(
                        "concat: {:?} does not match trailing dims {trailing:?}",
                        v.shape()
                    )));
                }
                lead += v.shape()[0];
                data.extend_from_slice(v.data());
            }
            let mut shape = vec![lead];
            shape.extend(trailing);
            Tensor::new(shape, data)?
        };
        tape.push(
            value,
            Op::Concat(parts.iter().map(|p| p.id).collect()),
            "concat",
        )
    }

    /// Packs scalars into a vector.
    pub fn stack(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("stack of zero scalars".into()))?;
        let tape = first.tape;
        let value = {
            let mut data = Vec::with_capacity(parts.len());
            for p in parts {
                let v = tape.value(p.id);
                if !v.is_scalar() {
                    return Err(Error::Dimension(format!(
                        "stack needs scalars, got {:?}",
                        v.shape()
                    )));
                }
                data.push(v.item());
            }
            Tensor::from_vec(data)
        };
        tape.push(
            value,
            Op::Stack(parts.iter().map(|p| p.id).collect()),
            "stack",
        )
    }

    /// Elementwise product with a constant mask.
    pub fn mask_mul(self, mask: Vec<f64>) -> Result<Var<'t>> {
        let value = {
            let v = self.tape.value(self.id);
            if mask.len() != v.len() {
                return Err(Error::Dimension(format!(
                    "mask of {} values for tensor of {}",
                    mask.len(),
                    v.len()
                )));
            }
            let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
            Tensor::new(v.shape().to_vec(), data)?
        };
        self.tape
            .push(value, Op::MaskMul { a: self.id, mask }, "mask_mul")
    }

    /// Inverted dropout: zero each element with probability `rate` and
    /// scale survivors by `1 / (1 - rate)`.
    pub fn dropout(self, rate: f64, rng: &mut impl rand::Rng) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!(
                "dropout rate {rate} not in [0, 1)"
            )));
        }
        let n = self.tape.value(self.id).len();
        let keep = 1.0 / (1.0 - rate);
        let mask = (0..n)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        self.mask_mul(mask)
    }

    /// Mean over the spatial axes of `[C, H, W]`, giving `[C]`.
    pub fn global_avg_pool(self) -> Result<Var<'t>> {
        let value = {
            let v = self.tape.value(self.id);
            let sh = v.shape();
            if sh.len() != 3 {
                return Err(Error::Dimension(format!(
                    "global_avg_pool needs [C, H, W], got {sh:?}"
                )));
            }
            let hw = sh[1] * sh[2];
            let data = v
                .data()
                .chunks(hw)
                .map(|c| c.iter().sum::<f64>() / hw as f64)
                .collect();
            Tensor::from_vec(data)
        };
        self.tape
            .push(value, Op::GlobalAvgPool(self.id), "global_avg_pool")
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.tape.value(self.id).reshape(shape)?;
        self.tape.push(value, Op::Reshape(self.id), "reshape")
    }

    /// Contiguous flat range `start..start + product(shape)`, reshaped.
    pub fn slice(self, start: usize, shape: &[usize]) -> Result<Var<'t>> {
        let value = {
            let v = self.tape.value(self.id);
            let n: usize = shape.iter().product();
            if start + n > v.len() {
                return Err(Error::Dimension(format!(
                    "slice {start}..{} of a tensor with {} values",
                    start + n,
                    v.len()
                )));
            }
            Tensor::new(shape.to_vec(), v.data()[start..start + n].to_vec())?
        };
        self.tape
            .push(value, Op::Slice { a: self.id, start }, "slice")
    }

    /// Element `index` of the flattened tensor, as a scalar.
    pub fn select(self, index: usize) -> Result<Var<'t>> {
        let value = {
            let v = self.tape.value(self.id);
            let x = *v.data().get(index).ok_or_else(|| {
                Error::Dimension(format!("index {index} out of {} values", v.len()))
            })?;
            Tensor::scalar(x)
        };
        self.tape
            .push(value, Op::Select { a: self.id, index }, "select")
    }

    /// Cosine similarity of two equal-length vectors.
    pub fn cosine(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            if a.len() != b.len() {
                return Err(Error::Dimension(format!(
                    "cosine of vectors with lengths {} and {}",
                    a.len(),
                    b.len()
                )));
            }
            let (na, nb) = (norm(a.data()), norm(b.data()));
            if na == 0.0 || nb == 0.0 {
                return Err(Error::Numeric(
                    "cosine similarity of a zero-norm vector".into(),
                ));
            }
            let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
            Tensor::scalar(dot / (na * nb))
        };
        self.tape
            .push(value, Op::Cosine(self.id, other.id), "cosine")
    }

    /// Pixel-mean of the binary KL divergence `KL(target || self)`, where
    /// `self` holds foreground probabilities.
    pub fn binary_kl_from(self, target: &[f64]) -> Result<Var<'t>> {
        let value = {
            let q = self.tape.value(self.id);
            check_len(target.len(), q.len(), "binary_kl")?;
            let total: f64 = target
                .iter()
                .zip(q.data())
                .map(|(&p, &q)| crate::maps::binary_kl(p, q))
                .sum();
            Tensor::scalar(total / q.len() as f64)
        };
        self.tape.push(
            value,
            Op::BinaryKl {
                q: self.id,
                target: target.to_vec(),
            },
            "binary_kl",
        )
    }

    /// Pixel-mean binary cross-entropy of probabilities `self` against
    /// targets in `[0, 1]`.
    pub fn binary_cross_entropy(self, target: &[f64]) -> Result<Var<'t>> {
        let value = {
            let q = self.tape.value(self.id);
            check_len(target.len(), q.len(), "binary_cross_entropy")?;
            let total: f64 = target
                .iter()
                .zip(q.data())
                .map(|(&y, &q)| crate::maps::binary_xent(y, q))
                .sum();
            Tensor::scalar(total / q.len() as f64)
        };
        self.tape.push(
            value,
            Op::BinaryXent {
                q: self.id,
                target: target.to_vec(),
            },
            "binary_cross_entropy",
        )
    }
}

fn check_len(target: usize, q: usize, op: &str) -> Result<()> {
    if target != q {
        return Err(Error::Dimension(format!(
            "{op}: {target} targets for {q} probabilities"
        )));
    }
    Ok(())
}

fn softmax_tensor(v: &Tensor, axis: usize, log: bool) -> Result<Tensor> {
    let (outer, n, inner) = axis_extents(v.shape(), axis)?;
    let d = v.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for k in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + k;
            let max = (0..n).map(|j| d[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..n).map(|j| (d[idx(j)] - max).exp()).sum();
            for j in 0..n {
                let shifted = d[idx(j)] - max;
                out[idx(j)] = if log {
                    shifted - z.ln()
                } else {
                    shifted.exp() / z
                };
            }
        }
    }
    Tensor::new(v.shape().to_vec(), out)
}

/// Softmax of a plain tensor along `axis`.
pub fn softmax(logits: &Tensor, axis: usize) -> Result<Tensor> {
    softmax_tensor(logits, axis, false)
}

/// Elementwise logistic function of a plain tensor.
pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t(&[0.0, 0.0]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&t(&[3f64.ln(), 0.0]), 0).unwrap();
        assert_abs_diff_eq!(s.data()[0], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(s.data()[1], 0.25, epsilon = 1e-15);
        let s = softmax(&t(&[1000.0, 0.0]), 0).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] < 1e-300 && s.is_finite());
        assert!(matches!(softmax(&t(&[1.0]), 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_along_inner_axis() {
        let x = Tensor::new(vec![2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert_abs_diff_eq!(s.data()[0] + s.data()[2], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.data()[1] + s.data()[3], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        let tiny = sigmoid_scalar(-1000.0);
        assert!((0.0..1e-300).contains(&tiny));
        assert_abs_diff_eq!(sigmoid_scalar(3f64.ln()), 0.75, epsilon = 1e-15);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 3], 1.5));
        let loss = x.sum().unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_square() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3.0]));
        let loss = x.mul(x).unwrap().sum().unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1.0, 2.0]));
        let c = tape.constant(t(&[4.0]));
        let loss = c.sum().unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn accumulate_vs_reset() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2.0]));
        let loss = x.mul(x).unwrap().sum().unwrap();
        tape.backward(loss).unwrap();
        tape.backward_accumulate(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[8.0]);
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[4.0]);
    }

    #[test]
    fn exp_overflow_is_numeric_error() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1000.0]));
        assert!(matches!(x.exp(), Err(Error::Numeric(_))));
    }

    #[test]
    fn cosine_zero_norm_rejected() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[0.0, 0.0]));
        let b = tape.leaf(t(&[1.0, 0.0]));
        assert!(matches!(a.cosine(b), Err(Error::Numeric(_))));
    }

    #[test]
    fn conv_identity_kernel() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.constant(Tensor::new(vec![1, 1, 3, 3], k).unwrap());
        let b = tape.constant(t(&[0.5]));
        let y = x.conv2d(w, b).unwrap();
        assert_eq!(y.value().data(), &[1.5, 2.5, 3.5, 4.5]);
    }

    #[test]
    fn conv_shift_kernel_pads_with_zero() {
        // Kernel tap at (0, 0) reads the up-left neighbour.
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let mut k = vec![0.0; 9];
        k[0] = 1.0;
        let w = tape.constant(Tensor::new(vec![1, 1, 3, 3], k).unwrap());
        let b = tape.constant(t(&[0.0]));
        let y = x.conv2d(w, b).unwrap();
        assert_eq!(y.value().data(), &[0.0, 0.0, 0.0, 1.0]);
    }
}
