//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] is an arena of nodes appended in execution order, so the
//! recording order is already a topological order. [`Tape::backward`] walks it
//! once in reverse. A fresh tape is built for every forward pass.

use crate::error::{Error, Result};
use crate::ops::{self, conv2d_backward, sum_pool_backward, ConvGrads, ConvSpec};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    /// Never issued by a tape; used while reporting binding errors.
    pub(crate) const DANGLING: Var = Var(usize::MAX);

    pub fn id(self) -> usize {
        self.0
    }
}

/// A differentiable operation and its operands.
#[derive(Clone, Debug)]
pub enum Op<T> {
    Add(Var, Var),
    Sub(Var, Var),
    /// Elementwise product.
    Mul(Var, Var),
    Scale(Var, T),
    /// Sum of all elements, producing a `(1, 1, 1, 1)` scalar.
    Sum(Var),
    Relu(Var),
    Conv2d {
        x: Var,
        weights: Var,
        /// Bias stored as a `(1, out_channels, 1, 1)` tensor.
        bias: Option<Var>,
        spec: ConvSpec,
    },
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
        len: usize,
    },
    /// `alpha * a + (1 - alpha) * b`
    ConvexMix {
        a: Var,
        b: Var,
        alpha: f64,
    },
    MaxPool {
        x: Var,
        factor: usize,
    },
    SumPool {
        x: Var,
        factor: usize,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Sum(a) | Op::Relu(a) => vec![*a],
            Op::Conv2d {
                x, weights, bias, ..
            } => {
                let mut v = vec![*x, *weights];
                v.extend(bias.iter().copied());
                v
            }
            Op::Concat(parts) => parts.clone(),
            Op::SliceChannels { x, .. } | Op::MaxPool { x, .. } | Op::SumPool { x, .. } => vec![*x],
            Op::ConvexMix { a, b, .. } => vec![*a, *b],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Relu(..) => "relu",
            Op::Conv2d { .. } => "conv2d",
            Op::Concat(..) => "concat",
            Op::SliceChannels { .. } => "slice_channels",
            Op::ConvexMix { .. } => "convex_mix",
            Op::MaxPool { .. } => "max_pool",
            Op::SumPool { .. } => "sum_pool",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Option<Op<T>>,
    requires_grad: bool,
    // max-pool routing indices
    argmax: Vec<usize>,
}

/// Recording of one forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Option<Op<T>>, requires_grad: bool, argmax: Vec<usize>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            argmax,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Constant input: no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, None, false, Vec::new())
    }

    /// Trainable leaf whose gradient is kept after [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, None, true, Vec::new())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::Autodiff(format!("variable {} is not on this tape", v.0)));
        }
        Ok(())
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(format!("{op} of {sa} and {sb}")));
        }
        Ok(sa)
    }

    /// Evaluate `op` on its recorded inputs and append the result.
    pub fn record(&mut self, op: Op<T>) -> Result<Var> {
        let inputs = op.inputs();
        for v in &inputs {
            self.check_var(*v)?;
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let mut argmax = Vec::new();
        let value = match &op {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let s = self.same_shape(op.name(), *a, *b)?;
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let data: Vec<T> = match op {
                    Op::Add(..) => xa.iter().zip(xb).map(|(p, q)| *p + *q).collect(),
                    Op::Sub(..) => xa.iter().zip(xb).map(|(p, q)| *p - *q).collect(),
                    _ => xa.iter().zip(xb).map(|(p, q)| *p * *q).collect(),
                };
                Tensor::new(s, data)?
            }
            Op::Scale(a, s) => {
                let x = self.value(*a);
                Tensor::new(x.shape(), x.data().iter().map(|v| *v * *s).collect())?
            }
            Op::Sum(a) => Tensor::scalar(self.value(*a).sum()),
            Op::Relu(a) => ops::relu(self.value(*a)),
            Op::Conv2d {
                x,
                weights,
                bias,
                spec,
            } => {
                let b = match bias {
                    Some(b) => {
                        let bt = self.value(*b);
                        if bt.shape() != Shape::new(1, spec.out_channels, 1, 1) {
                            return Err(Error::shape(format!(
                                "bias {} for {} output channels",
                                bt.shape(),
                                spec.out_channels
                            )));
                        }
                        Some(bt.data())
                    }
                    None => None,
                };
                ops::conv2d(self.value(*x), self.value(*weights), b, spec)?
            }
            Op::Concat(parts) => {
                let refs: Vec<&Tensor<T>> = parts.iter().map(|v| self.value(*v)).collect();
                ops::concat_channels(&refs)?
            }
            Op::SliceChannels { x, start, len } => ops::slice_channels(self.value(*x), *start, *len)?,
            Op::ConvexMix { a, b, alpha } => ops::convex_mix(self.value(*a), self.value(*b), *alpha)?,
            Op::MaxPool { x, factor } => {
                let (out, arg) = ops::max_pool(self.value(*x), *factor)?;
                argmax = arg;
                out
            }
            Op::SumPool { x, factor } => ops::sum_pool(self.value(*x), *factor)?,
        };
        Ok(self.push(value, Some(op), requires_grad, argmax))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.record(Op::Scale(a, s))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Relu(a))
    }

    pub fn conv2d(&mut self, x: Var, weights: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        self.record(Op::Conv2d {
            x,
            weights,
            bias,
            spec,
        })
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.record(Op::Concat(parts.to_vec()))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.record(Op::SliceChannels { x, start, len })
    }

    pub fn convex_mix(&mut self, a: Var, b: Var, alpha: f64) -> Result<Var> {
        self.record(Op::ConvexMix { a, b, alpha })
    }

    pub fn max_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.record(Op::MaxPool { x, factor })
    }

    pub fn sum_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.record(Op::SumPool { x, factor })
    }

    /// Squared L2 distance `sum((a - b)^2)` as a scalar node.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.sum(sq)
    }

    /// Populate gradients of `loss` with respect to every leaf that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_var(loss)?;
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        if !self.shape(loss).is_scalar() {
            return Err(Error::Autodiff(format!(
                "backward needs a (1, 1, 1, 1) loss, got {}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(op) = self.nodes[i].op.clone() else {
                continue;
            };
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &op, &g);
        }
        Ok(())
    }

    // Take (or allocate) the accumulation buffer of `v`, if it needs one.
    fn acc(&mut self, v: Var) -> Option<Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(self.grads[v.0].take().unwrap_or_else(|| vec![T::zero(); len]))
    }

    fn put(&mut self, v: Var, buf: Option<Vec<T>>) {
        if let Some(b) = buf {
            self.grads[v.0] = Some(b);
        }
    }

    fn add_into(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if let Some(mut buf) = self.acc(v) {
            f(&mut buf);
            self.grads[v.0] = Some(buf);
        }
    }

    fn propagate(&mut self, node: usize, op: &Op<T>, g: &[T]) {
        match *op {
            Op::Add(a, b) => {
                self.add_into(a, |d| axpy(d, g, T::one()));
                self.add_into(b, |d| axpy(d, g, T::one()));
            }
            Op::Sub(a, b) => {
                self.add_into(a, |d| axpy(d, g, T::one()));
                self.add_into(b, |d| axpy(d, g, -T::one()));
            }
            Op::Mul(a, b) => {
                let xb = self.nodes[b.0].value.data().to_vec();
                self.add_into(a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(&xb) {
                        *d += *g * *y;
                    }
                });
                let xa = self.nodes[a.0].value.data().to_vec();
                self.add_into(b, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(&xa) {
                        *d += *g * *x;
                    }
                });
            }
            Op::Scale(a, s) => self.add_into(a, |d| axpy(d, g, s)),
            Op::Sum(a) => self.add_into(a, |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Relu(a) => {
                let mut buf = self.acc(a);
                if let Some(d) = buf.as_deref_mut() {
                    // derivative at exactly zero is taken as zero
                    for ((d, g), y) in d.iter_mut().zip(g).zip(self.nodes[node].value.data()) {
                        if *y > T::zero() {
                            *d += *g;
                        }
                    }
                }
                self.put(a, buf);
            }
            Op::Conv2d {
                x,
                weights,
                bias,
                ref spec,
            } => {
                let mut dx = self.acc(x);
                let mut dw = self.acc(weights);
                let mut db = bias.and_then(|b| self.acc(b));
                conv2d_backward(
                    &self.nodes[x.0].value,
                    &self.nodes[weights.0].value,
                    g,
                    spec,
                    ConvGrads {
                        dx: dx.as_deref_mut(),
                        dw: dw.as_deref_mut(),
                        db: db.as_deref_mut(),
                    },
                );
                self.put(x, dx);
                self.put(weights, dw);
                if let Some(b) = bias {
                    self.put(b, db);
                }
            }
            Op::Concat(ref parts) => {
                let s = self.nodes[node].value.shape();
                let plane = s.plane();
                let mut offset = 0;
                for p in parts {
                    let pc = self.shape(*p).c;
                    let start = offset;
                    self.add_into(*p, |d| {
                        for b in 0..s.n {
                            let src = &g[(b * s.c + start) * plane..(b * s.c + start + pc) * plane];
                            axpy(&mut d[b * pc * plane..(b + 1) * pc * plane], src, T::one());
                        }
                    });
                    offset += pc;
                }
            }
            Op::SliceChannels { x, start, len } => {
                let s = self.shape(x);
                let plane = s.plane();
                self.add_into(x, |d| {
                    for b in 0..s.n {
                        let dst = &mut d[(b * s.c + start) * plane..(b * s.c + start + len) * plane];
                        axpy(dst, &g[b * len * plane..(b + 1) * len * plane], T::one());
                    }
                });
            }
            Op::ConvexMix { a, b, alpha } => {
                self.add_into(a, |d| axpy(d, g, T::of(alpha)));
                self.add_into(b, |d| axpy(d, g, T::of(1.0 - alpha)));
            }
            Op::MaxPool { x, .. } => {
                let arg = std::mem::take(&mut self.nodes[node].argmax);
                self.add_into(x, |d| {
                    for (i, gv) in arg.iter().zip(g) {
                        d[*i] += *gv;
                    }
                });
                self.nodes[node].argmax = arg;
            }
            Op::SumPool { x, factor } => {
                let s = self.shape(x);
                self.add_into(x, |d| sum_pool_backward(s, factor, g, d));
            }
        }
    }

    /// Gradient of a leaf after [`Tape::backward`]; zeros when the loss does
    /// not depend on it.
    pub fn grad(&self, v: Var) -> Result<Tensor<T>> {
        self.check_var(v)?;
        if !self.backward_done {
            return Err(Error::Autodiff("gradient requested before backward".into()));
        }
        let node = &self.nodes[v.0];
        if node.op.is_some() {
            return Err(Error::Autodiff(format!(
                "gradients are only retained for leaves; node {} is `{}`",
                v.0,
                node.op.as_ref().map(Op::name).unwrap_or("leaf")
            )));
        }
        let data = self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
        Tensor::new(node.value.shape(), data)
    }
}

fn axpy<T: Scalar>(dst: &mut [T], src: &[T], s: T) {
    debug_assert_eq!(dst.len(), src.len());
    if s == T::one() {
        dst.iter_mut().zip(src).for_each(|(d, v)| *d += *v);
    } else {
        dst.iter_mut().zip(src).for_each(|(d, v)| *d += s * *v);
    }
}
