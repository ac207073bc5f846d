//! Reverse-mode differentiation over whole tensors.
//!
//! A [`Graph`] records every operation as a node appended to a tape; node
//! indices are therefore already in topological order and the graph cannot
//! contain cycles. [`Graph::backward`] walks the tape in reverse and returns
//! the gradient of a scalar output with respect to every node that requires
//! one. A node used several times (for instance a filter appearing both as
//! `V` and, through [`Graph::adjoint`], as `V⁻`) receives the sum of all
//! contributions.

mod check;
mod param;

pub use check::{gradcheck, GradcheckConfig, GradcheckReport, WorstCoordinate};
pub use param::{ParamId, ParamStore, Parameter};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{
    adjoint_grouped, conv_backward_input, conv_backward_weight, conv_forward, gelu_grad,
    pad_zero, ConvSpec, Tensor,
};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type CustomBackward<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>]) -> Vec<Tensor<T>> + Send + Sync>;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Conv {
        x: Var,
        w: Var,
        spec: ConvSpec,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        spec: ConvSpec,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Pad {
        x: Var,
        margins: Vec<usize>,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Adjoint {
        v: Var,
        groups: usize,
    },
    InstanceNorm {
        x: Var,
        scale: Option<Var>,
        shift: Option<Var>,
        normalized: Tensor<T>,
        inv_std: Vec<T>,
    },
    Sum(Var),
    SumSpatial(Var),
    LogSoftmax(Var),
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Tape of tensor operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    kink_hash: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            kink_hash: FNV_OFFSET,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Hash of every ReLU activation pattern recorded so far. Two evaluations
    /// of the same recipe with equal signatures took the same linear piece.
    pub fn kink_signature(&self) -> u64 {
        self.kink_hash
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds every parameter of `store` as a leaf; the returned vector is
    /// indexed by [`ParamId`].
    pub fn bind(&mut self, store: &ParamStore<T>) -> Vec<Var> {
        store
            .iter()
            .map(|p| {
                if p.requires_grad {
                    self.input(p.value.clone())
                } else {
                    self.constant(p.value.clone())
                }
            })
            .collect()
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb && self.value(b).numel() != 1 {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    /// `a + b`; `b` may be a one-element tensor broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("add", a, b)?;
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("sub", a, b)?;
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("mul", a, b)?;
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// `a / b`; zero denominators are an error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("div", a, b)?;
        let v = self.value(a).div(self.value(b))?;
        Ok(self.push(v, Op::Div(a, b), &[a, b]))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).add_scalar(c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    /// Rectifier; the subgradient at zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut h = self.kink_hash;
        for &v in x.data() {
            h = (h ^ u64::from(v > T::zero())).wrapping_mul(FNV_PRIME);
        }
        let v = x.relu();
        self.kink_hash = h;
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).gelu();
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// `ln(1 + eˣ)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(i) = self.value(a).data().iter().position(|&v| !(v > T::zero())) {
            return Err(Error::InvalidArgument(format!(
                "log of non-positive value at index {i}"
            )));
        }
        let v = self.value(a).map(T::ln);
        Ok(self.push(v, Op::Log(a), &[a]))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).square();
        self.push(v, Op::Square(a), &[a])
    }

    /// Grouped cross-correlation of `x` `(C_in, s…)` with `w`
    /// `(C_out, C_in/groups, k…)`.
    pub fn conv(&mut self, x: Var, w: Var, spec: &ConvSpec) -> Result<Var> {
        let v = conv_forward(self.value(x), self.value(w), spec)?;
        Ok(self.push(
            v,
            Op::Conv {
                x,
                w,
                spec: spec.clone(),
            },
            &[x, w],
        ))
    }

    /// Transposed correlation: `w` is `(C_in, C_out/groups, k…)` and each
    /// spatial extent maps to `(n − 1)·stride + k − 2·pad`.
    pub fn conv_transpose(&mut self, x: Var, w: Var, spec: &ConvSpec) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if ws.len() != xs.len() + 1 || spec.stride.len() != xs.len() - 1 {
            return Err(Error::shape("conv_transpose", &xs, &ws));
        }
        let mut out_spatial = Vec::with_capacity(xs.len() - 1);
        for a in 0..xs.len() - 1 {
            let full = (xs[a + 1] - 1) * spec.stride[a] + ws[a + 2];
            out_spatial.push(full.checked_sub(2 * spec.padding[a]).filter(|&n| n > 0).ok_or_else(
                || Error::invalid_shape("conv_transpose", "padding exceeds output extent"),
            )?);
        }
        let v = conv_backward_input(self.value(x), self.value(w), spec, &out_spatial)?;
        Ok(self.push(
            v,
            Op::ConvTranspose {
                x,
                w,
                spec: spec.clone(),
            },
            &[x, w],
        ))
    }

    /// Adds a per-channel bias `b` of shape `(C)`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        if bv.shape() != [xv.channels()] {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let plane = xv.numel() / xv.channels();
        let mut out = xv.clone();
        for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let bc = bv.data()[c];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        Ok(self.push(out, Op::AddBias { x, b }, &[x, b]))
    }

    /// `1×…×1` correlation plus optional bias.
    pub fn pointwise_conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let rank = self.value(x).rank() - 1;
        let y = self.conv(x, w, &ConvSpec::valid(rank))?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn pad(&mut self, x: Var, margins: &[usize]) -> Result<Var> {
        let v = pad_zero(self.value(x), margins)?;
        Ok(self.push(
            v,
            Op::Pad {
                x,
                margins: margins.to_vec(),
            },
            &[x],
        ))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_channels(&tensors)?;
        Ok(self.push(v, Op::Concat(parts.to_vec()), parts))
    }

    /// Channels `start..start + len`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).channel_slice(start, len)?;
        Ok(self.push(v, Op::Slice { x, start }, &[x]))
    }

    /// Grouped adjoint filter (channel roles swapped, spatial axes reversed).
    pub fn adjoint(&mut self, v: Var, groups: usize) -> Result<Var> {
        let vt = self.value(v);
        if vt.rank() < 3 || groups == 0 || !vt.shape()[0].is_multiple_of(groups) {
            return Err(Error::invalid_shape(
                "adjoint",
                format!("filter {:?} cannot be split into {groups} groups", vt.shape()),
            ));
        }
        let out = adjoint_grouped(vt, groups);
        Ok(self.push(out, Op::Adjoint { v, groups }, &[v]))
    }

    /// Per-channel normalization over the spatial axes (biased variance),
    /// followed by an optional per-channel affine map.
    pub fn instance_norm(
        &mut self,
        x: Var,
        scale: Option<Var>,
        shift: Option<Var>,
        eps: T,
    ) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.channels();
        for p in [scale, shift].into_iter().flatten() {
            if self.value(p).shape() != [c] {
                return Err(Error::shape("instance_norm", xv.shape(), self.value(p).shape()));
            }
        }
        let plane = xv.numel() / c;
        let n: T = lit(plane as f64);
        let mut normalized = xv.clone();
        let mut inv_std = Vec::with_capacity(c);
        for chunk in normalized.data_mut().chunks_mut(plane) {
            let mean = chunk.iter().copied().sum::<T>() / n;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            chunk.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let mut out = normalized.clone();
        for (ci, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let g = scale.map_or(T::one(), |s| self.value(s).data()[ci]);
            let b = shift.map_or(T::zero(), |s| self.value(s).data()[ci]);
            chunk.iter_mut().for_each(|v| *v = *v * g + b);
        }
        let mut parents = vec![x];
        parents.extend(scale);
        parents.extend(shift);
        Ok(self.push(
            out,
            Op::InstanceNorm {
                x,
                scale,
                shift,
                normalized,
                inv_std,
            },
            &parents,
        ))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, T::one() / lit(n as f64))
    }

    /// Per-channel sum over the spatial axes, shape `(C)`.
    pub fn sum_spatial(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let plane = x.numel() / x.channels();
        let data = x.data().chunks(plane).map(|c| c.iter().copied().sum()).collect();
        let v = Tensor::from_vec(vec![x.channels()], data).expect("channel count");
        self.push(v, Op::SumSpatial(a), &[a])
    }

    /// Log-softmax across channels at every spatial position.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.channels();
        let plane = x.numel() / c;
        let d = x.data();
        let mut out = vec![T::zero(); d.len()];
        for p in 0..plane {
            let m = (0..c).map(|k| d[k * plane + p]).fold(T::neg_infinity(), T::max);
            let lse = (0..c).map(|k| (d[k * plane + p] - m).exp()).sum::<T>().ln() + m;
            for k in 0..c {
                out[k * plane + p] = d[k * plane + p] - lse;
            }
        }
        let v = Tensor::from_vec(x.shape().to_vec(), out).expect("same shape");
        self.push(v, Op::LogSoftmax(a), &[a])
    }

    /// `⟨a, c⟩` for a constant tensor `c`.
    pub fn dot_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        let cv = self.constant(c.clone());
        let m = self.mul(a, cv)?;
        Ok(self.sum(m))
    }

    /// Operation with a caller-supplied value and vector-Jacobian product.
    ///
    /// `backward(grad_out, input_values)` must return one gradient per input.
    pub fn custom<F>(&mut self, inputs: &[Var], value: Tensor<T>, backward: F) -> Var
    where
        F: Fn(&Tensor<T>, &[&Tensor<T>]) -> Vec<Tensor<T>> + Send + Sync + 'static,
    {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
            inputs,
        )
    }

    /// Gradients of the one-element node `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = &self.nodes[output.0];
        if out.value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar output, got shape {:?}",
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.value.shape(), T::one()));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let target = self.value(v);
        let g = if target.numel() == 1 && g.numel() != 1 {
            // broadcast operand
            Tensor::full(target.shape(), g.sum())
        } else {
            g
        };
        debug_assert_eq!(g.shape(), target.shape());
        match &mut grads[v.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.mul(bv)?);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.mul(av)?);
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.div(bv)?);
                }
                if self.requires_grad(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let gb = g.mul(&node.value)?.div(bv)?.scale(-T::one());
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c)),
            Op::Relu(a) => {
                let x = self.value(*a);
                let gx = g.zip_map(x, |gv, xv| if xv > T::zero() { gv } else { T::zero() })?;
                self.accumulate(grads, *a, gx);
            }
            Op::Gelu(a) => {
                let gx = g.zip_map(self.value(*a), |gv, xv| gv * gelu_grad(xv))?;
                self.accumulate(grads, *a, gx);
            }
            Op::Sigmoid(a) => {
                let gx = g.zip_map(&node.value, |gv, s| gv * s * (T::one() - s))?;
                self.accumulate(grads, *a, gx);
            }
            Op::Softplus(a) => {
                let gx = g.zip_map(self.value(*a), |gv, xv| gv * sigmoid(xv))?;
                self.accumulate(grads, *a, gx);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.mul(&node.value)?),
            Op::Log(a) => self.accumulate(grads, *a, g.div(self.value(*a))?),
            Op::Square(a) => {
                let gx = g.zip_map(self.value(*a), |gv, xv| gv * (xv + xv))?;
                self.accumulate(grads, *a, gx);
            }
            Op::Conv { x, w, spec } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.requires_grad(*x) {
                    let gx = conv_backward_input(g, wv, spec, xv.spatial())?;
                    self.accumulate(grads, *x, gx);
                }
                if self.requires_grad(*w) {
                    let gw = conv_backward_weight(xv, g, wv.shape(), spec)?;
                    self.accumulate(grads, *w, gw);
                }
            }
            Op::ConvTranspose { x, w, spec } => {
                let wv = self.value(*w);
                if self.requires_grad(*x) {
                    self.accumulate(grads, *x, conv_forward(g, wv, spec)?);
                }
                if self.requires_grad(*w) {
                    let gw = conv_backward_weight(g, self.value(*x), wv.shape(), spec)?;
                    self.accumulate(grads, *w, gw);
                }
            }
            Op::AddBias { x, b } => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*b) {
                    let plane = g.numel() / g.channels();
                    let data = g.data().chunks(plane).map(|c| c.iter().copied().sum()).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(vec![g.channels()], data)?);
                }
            }
            Op::Pad { x, margins } => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, crop(g, xv.shape(), margins));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let len = self.value(*p).channels();
                    if self.requires_grad(*p) {
                        self.accumulate(grads, *p, g.channel_slice(start, len)?);
                    }
                    start += len;
                }
            }
            Op::Slice { x, start } => {
                let xv = self.value(*x);
                let plane = xv.numel() / xv.channels();
                let mut gx = Tensor::zeros(xv.shape());
                gx.data_mut()[start * plane..start * plane + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, *x, gx);
            }
            Op::Adjoint { v, groups } => {
                self.accumulate(grads, *v, adjoint_grouped(g, *groups));
            }
            Op::InstanceNorm {
                x,
                scale,
                shift,
                normalized,
                inv_std,
            } => {
                let c = g.channels();
                let plane = g.numel() / c;
                let n: T = lit(plane as f64);
                if let Some(s) = scale {
                    let data = g
                        .data()
                        .chunks(plane)
                        .zip(normalized.data().chunks(plane))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *s, Tensor::from_vec(vec![c], data)?);
                }
                if let Some(b) = shift {
                    let data = g.data().chunks(plane).map(|gc| gc.iter().copied().sum()).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(vec![c], data)?);
                }
                if self.requires_grad(*x) {
                    let mut gx = Tensor::zeros(g.shape());
                    for (ci, &istd) in inv_std.iter().enumerate() {
                        let gamma = scale.map_or(T::one(), |s| self.value(s).data()[ci]);
                        let gc = &g.data()[ci * plane..(ci + 1) * plane];
                        let xc = &normalized.data()[ci * plane..(ci + 1) * plane];
                        let sum_g: T = gc.iter().copied().sum::<T>() * gamma;
                        let sum_gx: T =
                            gc.iter().zip(xc).map(|(&a, &b)| a * b).sum::<T>() * gamma;
                        let k = istd / n;
                        let out = &mut gx.data_mut()[ci * plane..(ci + 1) * plane];
                        for ((o, &gv), &xh) in out.iter_mut().zip(gc).zip(xc) {
                            *o = k * (n * gv * gamma - sum_g - xh * sum_gx);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(av.shape(), g.data()[0]));
            }
            Op::SumSpatial(a) => {
                let av = self.value(*a);
                let plane = av.numel() / av.channels();
                let gx = Tensor::from_fn(av.shape(), |i| g.data()[i / plane]);
                self.accumulate(grads, *a, gx);
            }
            Op::LogSoftmax(a) => {
                let c = g.channels();
                let plane = g.numel() / c;
                let y = node.value.data();
                let gd = g.data();
                let mut gx = vec![T::zero(); gd.len()];
                for p in 0..plane {
                    let total: T = (0..c).map(|k| gd[k * plane + p]).sum();
                    for k in 0..c {
                        let i = k * plane + p;
                        gx[i] = gd[i] - y[i].exp() * total;
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec(g.shape().to_vec(), gx)?);
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = backward(g, &vals);
                if gs.len() != inputs.len() {
                    return Err(Error::InvalidArgument(format!(
                        "custom backward returned {} gradients for {} inputs",
                        gs.len(),
                        inputs.len()
                    )));
                }
                for (v, gv) in inputs.iter().zip(gs) {
                    if gv.shape() != self.value(*v).shape() {
                        return Err(Error::shape("custom backward", gv.shape(), self.value(*v).shape()));
                    }
                    self.accumulate(grads, *v, gv);
                }
            }
        }
        Ok(())
    }
}

fn crop<T: Scalar>(g: &Tensor<T>, shape: &[usize], margins: &[usize]) -> Tensor<T> {
    let inner: Vec<usize> = shape[1..].to_vec();
    let outer: Vec<usize> = g.spatial().to_vec();
    let rank = inner.len();
    Tensor::from_fn(shape, |i| {
        // unravel i in `shape`, shift spatial coordinates by the margins
        let mut rem = i;
        let mut coords = vec![0; rank];
        for a in (0..rank).rev() {
            coords[a] = rem % inner[a];
            rem /= inner[a];
        }
        let mut j = rem;
        for a in 0..rank {
            j = j * outer[a] + coords[a] + margins[a];
        }
        g.data()[j]
    })
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}
