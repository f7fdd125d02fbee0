//! Reverse-mode tape.
//!
//! Every backward rule is written in terms of [`Var`] operations, so a
//! gradient computed with `create_graph = true` is itself recorded on the
//! tape and can be differentiated again.

use std::cell::RefCell;
use std::rc::Rc;

use crate::conv::{self, ConvSpec};
use crate::tensor::{Shape, Tensor, SCALAR};

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Powf(usize, f64),
    MaskMul(usize, Rc<Tensor>),
    LeakyRelu(usize, f64),
    Tanh(usize),
    Broadcast(usize),
    SumTo(usize),
    Conv { x: usize, w: usize, spec: ConvSpec },
    ConvTranspose { y: usize, w: usize, spec: ConvSpec },
    ConvWeight { x: usize, y: usize, spec: ConvSpec },
}

impl Op {
    fn parents(&self) -> [Option<usize>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => [Some(a), Some(b)],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Powf(a, _)
            | Op::MaskMul(a, _)
            | Op::LeakyRelu(a, _)
            | Op::Tanh(a)
            | Op::Broadcast(a)
            | Op::SumTo(a) => [Some(a), None],
            Op::Conv { x, w, .. } => [Some(x), Some(w)],
            Op::ConvTranspose { y, w, .. } => [Some(y), Some(w)],
            Op::ConvWeight { x, y, .. } => [Some(x), Some(y)],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    no_grad: usize,
}

/// Recording context for one forward/backward computation.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<Inner>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf gradients never flow into.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let shape = value.shape();
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self.clone(),
            id,
            shape,
        }
    }

    /// Records the result of an op; collapses to a constant when no parent
    /// carries a gradient or while gradient recording is suspended.
    fn record(&self, value: Tensor, op: Op) -> Var {
        let requires_grad = {
            let inner = self.inner.borrow();
            inner.no_grad == 0
                && op
                    .parents()
                    .iter()
                    .flatten()
                    .any(|&p| inner.nodes[p].requires_grad)
        };
        if requires_grad {
            self.push(value, op, true)
        } else {
            self.push(value, Op::Leaf, false)
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.inner.borrow().nodes[id].value.clone()
    }

    fn var(&self, id: usize) -> Var {
        let shape = self.inner.borrow().nodes[id].value.shape();
        Var {
            tape: self.clone(),
            id,
            shape,
        }
    }

    /// Runs `f` with gradient recording suspended.
    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        self.inner.borrow_mut().no_grad += 1;
        let out = f();
        self.inner.borrow_mut().no_grad -= 1;
        out
    }

    /// Gradients of `sum(output)` with respect to each of `wrt`.
    ///
    /// With `create_graph` the returned variables are differentiable
    /// functions of the tape's leaves; otherwise they are constants.
    pub fn grad(&self, output: &Var, wrt: &[&Var], create_graph: bool) -> Vec<Var> {
        assert!(
            Rc::ptr_eq(&self.inner, &output.tape.inner),
            "output belongs to another tape"
        );
        let last = output.id;
        let reach = {
            let inner = self.inner.borrow();
            let mut reach = vec![false; last + 1];
            for v in wrt {
                if v.id <= last {
                    reach[v.id] = true;
                }
            }
            for i in 0..=last {
                if reach[i] || !inner.nodes[i].requires_grad {
                    continue;
                }
                reach[i] = inner.nodes[i]
                    .op
                    .parents()
                    .iter()
                    .flatten()
                    .any(|&p| reach[p]);
            }
            reach
        };

        let run = || {
            let mut grads: Vec<Option<Var>> = vec![None; last + 1];
            if reach[last] {
                grads[last] = Some(self.constant(Tensor::ones(output.shape)));
            }
            for i in (0..=last).rev() {
                let Some(gy) = grads[i].take() else { continue };
                if wrt.iter().any(|v| v.id == i) {
                    grads[i] = Some(gy.clone());
                }
                let op = self.inner.borrow().nodes[i].op.clone();
                let needs = |p: usize| reach[p];
                let mut contributions: Vec<(usize, Var)> = Vec::with_capacity(2);
                match op {
                    Op::Leaf => {}
                    Op::Add(a, b) => {
                        if needs(a) {
                            contributions.push((a, gy.clone()));
                        }
                        if needs(b) {
                            contributions.push((b, gy.clone()));
                        }
                    }
                    Op::Sub(a, b) => {
                        if needs(a) {
                            contributions.push((a, gy.clone()));
                        }
                        if needs(b) {
                            contributions.push((b, gy.scale(-1.0)));
                        }
                    }
                    Op::Mul(a, b) => {
                        if needs(a) {
                            contributions.push((a, gy.mul(&self.var(b))));
                        }
                        if needs(b) {
                            contributions.push((b, gy.mul(&self.var(a))));
                        }
                    }
                    Op::Scale(a, f) => contributions.push((a, gy.scale(f))),
                    Op::AddScalar(a) => contributions.push((a, gy.clone())),
                    Op::Powf(a, p) => {
                        let d = self.var(a).powf(p - 1.0).scale(p);
                        contributions.push((a, gy.mul(&d)));
                    }
                    Op::MaskMul(a, mask) => contributions.push((a, gy.mask_mul(mask))),
                    Op::LeakyRelu(a, slope) => {
                        let mask = self.value(a).map(|v| if v > 0.0 { 1.0 } else { slope });
                        contributions.push((a, gy.mask_mul(Rc::new(mask))));
                    }
                    Op::Tanh(a) => {
                        let d = self.var(i).powf(2.0).scale(-1.0).add_scalar(1.0);
                        contributions.push((a, gy.mul(&d)));
                    }
                    Op::Broadcast(a) => {
                        let shape = self.value(a).shape();
                        contributions.push((a, gy.sum_to(shape)));
                    }
                    Op::SumTo(a) => {
                        let shape = self.value(a).shape();
                        contributions.push((a, gy.broadcast_to(shape)));
                    }
                    Op::Conv { x, w, spec } => {
                        let (xv, wv) = (self.var(x), self.var(w));
                        if needs(x) {
                            let hw = (xv.shape[2], xv.shape[3]);
                            contributions.push((x, gy.conv_transpose2d(&wv, spec, hw)));
                        }
                        if needs(w) {
                            contributions.push((w, xv.conv_weight_grad(&gy, spec)));
                        }
                    }
                    Op::ConvTranspose { y, w, spec } => {
                        // The node holds the input-shaped side of the form.
                        if needs(y) {
                            contributions.push((y, gy.conv2d(&self.var(w), spec)));
                        }
                        if needs(w) {
                            contributions.push((w, gy.conv_weight_grad(&self.var(y), spec)));
                        }
                    }
                    Op::ConvWeight { x, y, spec } => {
                        let (xv, yv) = (self.var(x), self.var(y));
                        if needs(x) {
                            let hw = (xv.shape[2], xv.shape[3]);
                            contributions.push((x, yv.conv_transpose2d(&gy, spec, hw)));
                        }
                        if needs(y) {
                            contributions.push((y, xv.conv2d(&gy, spec)));
                        }
                    }
                }
                for (p, g) in contributions {
                    if !needs(p) {
                        continue;
                    }
                    grads[p] = Some(match grads[p].take() {
                        Some(acc) => acc.add(&g),
                        None => g,
                    });
                }
            }
            wrt.iter()
                .map(|v| {
                    let g = if v.id <= last {
                        grads[v.id].clone()
                    } else {
                        None
                    };
                    g.unwrap_or_else(|| self.constant(Tensor::zeros(v.shape)))
                })
                .collect()
        };

        if create_graph {
            run()
        } else {
            self.no_grad(run)
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
    shape: Shape,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape)
    }
}

/// `a^p` with exact fast paths for the exponents the networks use.
fn pow(a: f64, p: f64) -> f64 {
    match p {
        0.0 => 1.0,
        1.0 => a,
        2.0 => a * a,
        3.0 => a * a * a,
        0.5 => a.sqrt(),
        -0.5 => 1.0 / a.sqrt(),
        -1.0 => 1.0 / a,
        -1.5 => 1.0 / (a * a.sqrt()),
        _ => a.powf(p),
    }
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// A constant copy of this value.
    pub fn detach(&self) -> Var {
        let value = (*self.value()).clone();
        self.tape.constant(value)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var {
        self.tape.record(value, op)
    }

    pub fn add(&self, other: &Var) -> Var {
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.unary(v, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var) -> Var {
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.unary(v, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var) -> Var {
        let v = self.value().zip_map(&other.value(), |a, b| a * b);
        self.unary(v, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, factor: f64) -> Var {
        let v = self.value().map(|a| a * factor);
        self.unary(v, Op::Scale(self.id, factor))
    }

    pub fn add_scalar(&self, offset: f64) -> Var {
        let v = self.value().map(|a| a + offset);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn powf(&self, exponent: f64) -> Var {
        let v = self.value().map(|a| pow(a, exponent));
        self.unary(v, Op::Powf(self.id, exponent))
    }

    pub fn square(&self) -> Var {
        self.powf(2.0)
    }

    pub fn sqrt(&self) -> Var {
        self.powf(0.5)
    }

    /// Elementwise product with a constant tensor.
    pub fn mask_mul(&self, mask: Rc<Tensor>) -> Var {
        let v = self.value().zip_map(&mask, |a, m| a * m);
        self.unary(v, Op::MaskMul(self.id, mask))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let v = self.value().map(|a| if a > 0.0 { a } else { slope * a });
        self.unary(v, Op::LeakyRelu(self.id, slope))
    }

    pub fn relu(&self) -> Var {
        self.leaky_relu(0.0)
    }

    pub fn tanh(&self) -> Var {
        let v = self.value().map(f64::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn broadcast_to(&self, shape: Shape) -> Var {
        if shape == self.shape {
            return self.clone();
        }
        let v = self.value().broadcast_to(shape);
        self.unary(v, Op::Broadcast(self.id))
    }

    pub fn sum_to(&self, shape: Shape) -> Var {
        if shape == self.shape {
            return self.clone();
        }
        let v = self.value().sum_to(shape);
        self.unary(v, Op::SumTo(self.id))
    }

    pub fn sum(&self) -> Var {
        self.sum_to(SCALAR)
    }

    pub fn mean(&self) -> Var {
        let n = crate::tensor::numel(&self.shape) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Mean over the axes where `shape` has unit size.
    pub fn mean_to(&self, shape: Shape) -> Var {
        let ratio = crate::tensor::numel(&self.shape) / crate::tensor::numel(&shape);
        self.sum_to(shape).scale(1.0 / ratio as f64)
    }

    pub fn conv2d(&self, weight: &Var, spec: ConvSpec) -> Var {
        let v = conv::conv2d(&self.value(), &weight.value(), spec);
        self.unary(
            v,
            Op::Conv {
                x: self.id,
                w: weight.id,
                spec,
            },
        )
    }

    /// Transposed convolution producing a map of spatial size `out_hw`.
    pub fn conv_transpose2d(&self, weight: &Var, spec: ConvSpec, out_hw: (usize, usize)) -> Var {
        let v = conv::conv_transpose2d(&self.value(), &weight.value(), spec, out_hw);
        self.unary(
            v,
            Op::ConvTranspose {
                y: self.id,
                w: weight.id,
                spec,
            },
        )
    }

    /// Weight-shaped adjoint pairing this input with an output-shaped `y`.
    pub fn conv_weight_grad(&self, y: &Var, spec: ConvSpec) -> Var {
        let v = conv::conv_weight_grad(&self.value(), &y.value(), spec);
        self.unary(
            v,
            Op::ConvWeight {
                x: self.id,
                y: y.id,
                spec,
            },
        )
    }
}
