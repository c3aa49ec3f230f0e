//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! One [`Tape`] holds one computation record. Every recorded operation
//! appends a node holding its output value, so parents always precede
//! children and backward can walk the node list in reverse. A tape lives
//! for a single training step and is dropped afterwards.

use super::kernels as k;
use super::kernels::Padding;
use super::{Elem, Tensor};
use crate::error::{Error, Result};
use std::cell::RefCell;

/// Handle to a node on a tape. Only meaningful for the tape it came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Clamp(Var, f64, f64),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Neg(Var),
    Silu(Var),
    Matmul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: Padding,
    },
    Concat(Vec<Var>, usize),
    Upsample2x(Var),
    Downsample2x(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Sum(Var),
    Mean(Var, Vec<usize>),
    SumAll(Var),
    MeanAll(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm(Var, Vec<usize>, f64),
    StopGradient,
}

struct Node<E: Elem> {
    op: Op,
    value: Tensor<E>,
}

pub struct Tape<E: Elem> {
    nodes: RefCell<Vec<Node<E>>>,
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-leaf gradients produced by [`Tape::backward`].
pub struct Gradients<E: Elem> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Elem> Gradients<E> {
    /// Gradient of the root w.r.t. `v`, or `None` if unreachable.
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with unreachable leaves materialized as zeros.
    pub fn get_or_zero(&self, v: Var, shape: &[usize]) -> Tensor<E> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, op: Op, value: Tensor<E>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var(nodes.len() - 1)
    }

    /// Record an input or parameter.
    pub fn leaf(&self, value: Tensor<E>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, v: Var) -> Tensor<E> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn with_value<T>(&self, v: Var, f: impl FnOnce(&Tensor<E>) -> T) -> T {
        f(&self.nodes.borrow()[v.0].value)
    }

    fn with_values2<T>(&self, a: Var, b: Var, f: impl FnOnce(&Tensor<E>, &Tensor<E>) -> T) -> T {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    // -- elementwise ------------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with_values2(a, b, |x, y| k::bcast_zip(x, y, |p, q| p + q))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with_values2(a, b, |x, y| k::bcast_zip(x, y, |p, q| p - q))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with_values2(a, b, |x, y| k::bcast_zip(x, y, |p, q| p * q))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with_values2(a, b, |x, y| k::bcast_zip(x, y, |p, q| p / q))?;
        Ok(self.push(Op::Div(a, b), v))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let cv = E::from_f64(c);
        let v = self.with_value(a, |x| x.map(|p| p * cv));
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let cv = E::from_f64(c);
        let v = self.with_value(a, |x| x.map(|p| p + cv));
        self.push(Op::AddScalar(a), v)
    }

    pub fn clamp(&self, a: Var, min: f64, max: f64) -> Var {
        let (lo, hi) = (E::from_f64(min), E::from_f64(max));
        let v = self.with_value(a, |x| {
            x.map(|p| {
                if p < lo {
                    lo
                } else if p > hi {
                    hi
                } else {
                    p
                }
            })
        });
        self.push(Op::Clamp(a, min, max), v)
    }

    pub fn exp(&self, a: Var) -> Var {
        let v = self.with_value(a, |x| x.map(|p| p.exp()));
        self.push(Op::Exp(a), v)
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        let v = self.with_value(a, k::log_checked)?;
        Ok(self.push(Op::Log(a), v))
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        let v = self.with_value(a, k::sqrt_checked)?;
        Ok(self.push(Op::Sqrt(a), v))
    }

    pub fn neg(&self, a: Var) -> Var {
        let v = self.with_value(a, |x| x.map(|p| -p));
        self.push(Op::Neg(a), v)
    }

    pub fn silu(&self, a: Var) -> Var {
        let v = self.with_value(a, |x| x.map(|p| p * k::sigmoid(p)));
        self.push(Op::Silu(a), v)
    }

    // -- linear algebra ---------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with_values2(a, b, k::matmul)?;
        Ok(self.push(Op::Matmul(a, b), v))
    }

    pub fn conv2d(&self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let v = self.with_values2(input, kernel, |i, w| k::conv2d(i, w, stride, padding))?;
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            v,
        ))
    }

    // -- structural -------------------------------------------------------

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Tensor<E>> = parts.iter().map(|p| &nodes[p.0].value).collect();
            k::concat(&refs, axis)?
        };
        Ok(self.push(Op::Concat(parts.to_vec(), axis), v))
    }

    pub fn upsample2x(&self, a: Var) -> Result<Var> {
        let v = self.with_value(a, k::upsample2x)?;
        Ok(self.push(Op::Upsample2x(a), v))
    }

    pub fn downsample2x(&self, a: Var) -> Result<Var> {
        let v = self.with_value(a, k::downsample2x)?;
        Ok(self.push(Op::Downsample2x(a), v))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.with_value(a, |x| x.reshaped(shape))?;
        Ok(self.push(Op::Reshape(a), v))
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = self.with_value(a, |x| k::permute(x, axes))?;
        Ok(self.push(Op::Permute(a, axes.to_vec()), v))
    }

    pub fn sum(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = self.with_value(a, |x| k::sum_axes(x, axes))?;
        Ok(self.push(Op::Sum(a), v))
    }

    pub fn mean(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = self.with_value(a, |x| {
            let count: usize = axes.iter().map(|&ax| x.shape()[ax]).product();
            let inv = E::from_f64(1.0 / count as f64);
            k::sum_axes(x, axes).map(|s| s.map(|p| p * inv))
        })?;
        Ok(self.push(Op::Mean(a, axes.to_vec()), v))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let v = self.with_value(a, k::sum_all);
        self.push(Op::SumAll(a), v)
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let v = self.with_value(a, |x| {
            let inv = E::from_f64(1.0 / x.len() as f64);
            k::sum_all(x).map(|p| p * inv)
        });
        self.push(Op::MeanAll(a), v)
    }

    // -- nonlinear --------------------------------------------------------

    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let v = self.with_value(a, |x| k::softmax(x, axis))?;
        Ok(self.push(Op::Softmax(a, axis), v))
    }

    pub fn log_softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let v = self.with_value(a, |x| k::log_softmax(x, axis))?;
        Ok(self.push(Op::LogSoftmax(a, axis), v))
    }

    /// Normalize to zero mean, unit variance over `axes` (no affine part).
    pub fn layer_norm(&self, a: Var, axes: &[usize], eps: f64) -> Result<Var> {
        let v = self.with_value(a, |x| k::layer_norm(x, axes, eps))?;
        Ok(self.push(Op::LayerNorm(a, axes.to_vec(), eps), v))
    }

    /// Forward identity, backward annihilator.
    pub fn stop_gradient(&self, a: Var) -> Var {
        let v = self.value(a);
        self.push(Op::StopGradient, v)
    }

    /// Scaled dot-product attention over `[batch, tokens, dim]` inputs,
    /// composed from recorded primitives. Single head.
    pub fn attention(&self, q: Var, key: Var, v: Var) -> Result<Var> {
        let d = *self
            .shape(q)
            .last()
            .ok_or_else(|| Error::shape("attention requires rank >= 2"))?;
        let kt = self.permute(key, &[0, 2, 1])?;
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, 1.0 / (d as f64).sqrt());
        let weights = self.softmax(scaled, 2)?;
        self.matmul(weights, v)
    }

    // -- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar root. Returns a gradient per reachable
    /// leaf; nodes behind [`Tape::stop_gradient`] receive nothing.
    pub fn backward(&self, root: Var) -> Result<Gradients<E>> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward root must be scalar, got shape {:?}",
                nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; nodes.len()];
        grads[root.0] = Some(Tensor::full(nodes[root.0].value.shape(), E::one()));

        for id in (0..=root.0).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            let send = |target: Var, contrib: Tensor<E>, grads: &mut Vec<Option<Tensor<E>>>| {
                match &mut grads[target.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += *c;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(grad);
                    continue;
                }
                Op::StopGradient => {}
                Op::Add(a, b) => {
                    let ga = k::reduce_to_shape(&grad, &self_shape(&nodes, *a));
                    let gb = k::reduce_to_shape(&grad, &self_shape(&nodes, *b));
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::Sub(a, b) => {
                    let ga = k::reduce_to_shape(&grad, &self_shape(&nodes, *a));
                    let gb = k::reduce_to_shape(&grad.map(|g| -g), &self_shape(&nodes, *b));
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let ga = k::reduce_to_shape(&k::bcast_zip(&grad, vb, |g, y| g * y)?, va.shape());
                    let gb = k::reduce_to_shape(&k::bcast_zip(&grad, va, |g, x| g * x)?, vb.shape());
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::Div(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let ga = k::reduce_to_shape(&k::bcast_zip(&grad, vb, |g, y| g / y)?, va.shape());
                    let ratio = k::bcast_zip(va, vb, |x, y| x / (y * y))?;
                    let gb =
                        k::reduce_to_shape(&k::bcast_zip(&grad, &ratio, |g, r| -(g * r))?, vb.shape());
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::Scale(a, c) => {
                    let cv = E::from_f64(*c);
                    send(*a, grad.map(|g| g * cv), &mut grads);
                }
                Op::AddScalar(a) => send(*a, grad, &mut grads),
                Op::Clamp(a, min, max) => {
                    let (lo, hi) = (E::from_f64(*min), E::from_f64(*max));
                    let va = &nodes[a.0].value;
                    let mut g = grad;
                    for (gv, &xv) in g.data_mut().iter_mut().zip(va.data()) {
                        if xv < lo || xv > hi {
                            *gv = E::zero();
                        }
                    }
                    send(*a, g, &mut grads);
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    send(*a, k::bcast_zip(&grad, y, |g, v| g * v)?, &mut grads);
                }
                Op::Log(a) => {
                    let va = &nodes[a.0].value;
                    send(*a, k::bcast_zip(&grad, va, |g, x| g / x)?, &mut grads);
                }
                Op::Sqrt(a) => {
                    let y = &node.value;
                    let half = E::from_f64(0.5);
                    send(*a, k::bcast_zip(&grad, y, |g, v| g * half / v)?, &mut grads);
                }
                Op::Neg(a) => send(*a, grad.map(|g| -g), &mut grads),
                Op::Silu(a) => {
                    let va = &nodes[a.0].value;
                    let dsilu = va.map(|x| {
                        let s = k::sigmoid(x);
                        s * (E::one() + x * (E::one() - s))
                    });
                    send(*a, k::bcast_zip(&grad, &dsilu, |g, d| g * d)?, &mut grads);
                }
                Op::Matmul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let r = va.rank();
                    let mut perm: Vec<usize> = (0..r).collect();
                    perm.swap(r - 2, r - 1);
                    let ga = k::matmul(&grad, &k::permute(vb, &perm)?)?;
                    let gb = k::matmul(&k::permute(va, &perm)?, &grad)?;
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    stride,
                    padding,
                } => {
                    let (vi, vk) = (&nodes[input.0].value, &nodes[kernel.0].value);
                    let (gi, gk) = k::conv2d_backward(vi, vk, &grad, *stride, *padding)?;
                    send(*input, gi, &mut grads);
                    send(*kernel, gk, &mut grads);
                }
                Op::Concat(parts, axis) => {
                    let shapes: Vec<Vec<usize>> = parts
                        .iter()
                        .map(|p| nodes[p.0].value.shape().to_vec())
                        .collect();
                    for (p, g) in parts.iter().zip(k::concat_backward(&grad, &shapes, *axis)) {
                        send(*p, g, &mut grads);
                    }
                }
                Op::Upsample2x(a) => {
                    let g = k::upsample2x_backward(&grad, nodes[a.0].value.shape());
                    send(*a, g, &mut grads);
                }
                Op::Downsample2x(a) => {
                    let g = k::downsample2x_backward(&grad, nodes[a.0].value.shape());
                    send(*a, g, &mut grads);
                }
                Op::Reshape(a) => {
                    send(*a, grad.reshaped(nodes[a.0].value.shape())?, &mut grads);
                }
                Op::Permute(a, axes) => {
                    send(*a, k::permute(&grad, &k::invert_permutation(axes))?, &mut grads);
                }
                Op::Sum(a) => {
                    let g = k::expand(&grad, nodes[a.0].value.shape())?;
                    send(*a, g, &mut grads);
                }
                Op::Mean(a, axes) => {
                    let va = &nodes[a.0].value;
                    let count: usize = axes.iter().map(|&ax| va.shape()[ax]).product();
                    let inv = E::from_f64(1.0 / count as f64);
                    let g = k::expand(&grad.map(|g| g * inv), va.shape())?;
                    send(*a, g, &mut grads);
                }
                Op::SumAll(a) => {
                    let g = Tensor::full(nodes[a.0].value.shape(), grad.item());
                    send(*a, g, &mut grads);
                }
                Op::MeanAll(a) => {
                    let va = &nodes[a.0].value;
                    let inv = E::from_f64(1.0 / va.len() as f64);
                    send(*a, Tensor::full(va.shape(), grad.item() * inv), &mut grads);
                }
                Op::Softmax(a, axis) => {
                    // dx = p * (g - sum(g * p))
                    let p = &node.value;
                    let gp = k::bcast_zip(&grad, p, |g, pv| g * pv)?;
                    let s = k::sum_axes(&gp, &[*axis])?;
                    let centered = k::bcast_zip(&grad, &s, |g, sv| g - sv)?;
                    send(*a, k::bcast_zip(&centered, p, |c, pv| c * pv)?, &mut grads);
                }
                Op::LogSoftmax(a, axis) => {
                    // dx = g - softmax * sum(g)
                    let p = node.value.map(|v| v.exp());
                    let s = k::sum_axes(&grad, &[*axis])?;
                    let sp = k::bcast_zip(&p, &s, |pv, sv| pv * sv)?;
                    send(*a, k::bcast_zip(&grad, &sp, |g, v| g - v)?, &mut grads);
                }
                Op::LayerNorm(a, axes, eps) => {
                    // dx = inv_std * (g - mean(g) - y * mean(g * y))
                    let va = &nodes[a.0].value;
                    let y = &node.value;
                    let (_, inv_std) = k::layer_norm_stats(va, axes, *eps)?;
                    let count: usize = axes.iter().map(|&ax| va.shape()[ax]).product();
                    let inv_n = E::from_f64(1.0 / count as f64);
                    let mean_g = k::sum_axes(&grad, axes)?.map(|v| v * inv_n);
                    let gy = k::bcast_zip(&grad, y, |g, yv| g * yv)?;
                    let mean_gy = k::sum_axes(&gy, axes)?.map(|v| v * inv_n);
                    let y_mgy = k::bcast_zip(y, &mean_gy, |yv, m| yv * m)?;
                    let inner = k::bcast_zip(
                        &k::bcast_zip(&grad, &mean_g, |g, m| g - m)?,
                        &y_mgy,
                        |g, v| g - v,
                    )?;
                    send(*a, k::bcast_zip(&inner, &inv_std, |g, s| g * s)?, &mut grads);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn self_shape<E: Elem>(nodes: &[Node<E>], v: Var) -> Vec<usize> {
    nodes[v.0].value.shape().to_vec()
}

// Plain (unrecorded) tensor math used by samplers and metrics.
impl<E: Elem> Tensor<E> {
    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        k::bcast_zip(self, other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        k::bcast_zip(self, other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        k::bcast_zip(self, other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor<E> {
        let cv = E::from_f64(c);
        self.map(|v| v * cv)
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor<E>> {
        k::softmax(self, axis)
    }

    pub fn sum_all_value(&self) -> f64 {
        self.data().iter().map(|&v| Elem::to_f64(v)).sum()
    }
}
