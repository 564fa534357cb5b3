//! Wengert-list reverse-mode autodiff.
//!
//! Every op appends a node holding its forward value and the inputs needed by
//! its backward rule. Nodes are only ever appended, so the list is already in
//! topological order and `backward` is a single reverse sweep.

use rayon::prelude::*;

use super::kernels::{self, ConvLayout};
use super::{numel, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stride, zero padding and channel grouping of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    /// 1 for a dense convolution, `in_channels` for depthwise.
    pub groups: usize,
}

impl Default for Conv2dGeometry {
    fn default() -> Self {
        Conv2dGeometry {
            stride: 1,
            pad_h: 0,
            pad_w: 0,
            groups: 1,
        }
    }
}

/// Square pooling window. Padded cells never win the max.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pool2dGeometry {
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Exp(Var),
    Log(Var),
    MaxScalar(Var, T),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    HardSwish(Var),
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    Softmax(Var, usize),
    AddAlong {
        x: Var,
        bias: Var,
        axis: usize,
    },
    MulAlong {
        x: Var,
        scale: Var,
        axis: usize,
    },
    AddSuffix(Var, Var),
    MulPrefix(Var, Var),
    BroadcastLeading(Var),
    Concat(Vec<Var>, usize),
    Select {
        x: Var,
        axis: usize,
        index: usize,
    },
    Mask(Var, Vec<T>),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv2dGeometry,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    NormalizeLast {
        x: Var,
        inv_std: Vec<T>,
    },
    NormalizeChannels {
        x: Var,
        inv_std: Vec<T>,
    },
    Bce {
        pred: Var,
        labels: Vec<T>,
        eps: T,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation and replays it backwards.
///
/// A tape is meant for a single forward/backward pass and is confined to one
/// thread; individual kernels may still fan out internally.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `(outer, dim, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    Ok(())
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

/// Gather `src` (of `shape`) into the axis order `axes`.
fn permute_data<T: Element>(src: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out_shape, out);
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(src[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad_f64(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn hard_swish<T: Element>(x: T) -> T {
    let three = T::of(3.0);
    let six = T::of(6.0);
    x * (x + three).max(T::zero()).min(six) / six
}

fn hard_swish_grad<T: Element>(x: T) -> T {
    let three = T::of(3.0);
    if x < -three {
        T::zero()
    } else if x > three {
        T::one()
    } else {
        (x + x + three) / T::of(6.0)
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Register a tensor; it participates in differentiation iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad();
        let mut value = t.detached();
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Register a tensor that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---- elementwise -------------------------------------------------

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        mk: fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        same_shape(op, self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(out, mk(a, b), &[a, b]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(x).map(f);
        self.push(out, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::MulScalar(x, s))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(&bad) = self.value(x).data().iter().find(|v| !(**v > T::zero())) {
            return Err(Error::NonPositiveLog(bad.as_f64()));
        }
        Ok(self.unary(x, |v| v.ln(), Op::Log(x)))
    }

    /// `max(x, s)` elementwise; at a tie the gradient goes to the scalar.
    pub fn max_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| if v > s { v } else { s }, Op::MaxScalar(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.max_scalar(x, T::zero())
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { slope * v },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| {
                // Split by sign so exp never overflows.
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            },
            Op::Sigmoid(x),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::of(gelu_f64(v.as_f64())), Op::Gelu(x))
    }

    pub fn hard_swish(&mut self, x: Var) -> Var {
        self.unary(x, hard_swish, Op::HardSwish(x))
    }

    /// Multiply by a fixed mask (used for dropout).
    pub fn mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::LengthMismatch {
                shape: self.shape(x).to_vec(),
                expected: self.value(x).numel(),
                actual: mask.len(),
            });
        }
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        Ok(self.push(out, Op::Mask(x, mask), &[x]))
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product of `[G, M, K]` with `[G, K, N]`, or with `[G, N, K]`
    /// transposed when `transpose_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::ShapeMismatch {
            op: "batch_matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let kb = if transpose_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![T::zero(); g * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        out.par_chunks_mut((m * n).max(1)).enumerate().for_each(|(i, o)| {
            kernels::gemm(
                m,
                k,
                n,
                &va[i * m * k..(i + 1) * m * k],
                false,
                &vb[i * k * n..(i + 1) * k * n],
                transpose_b,
                o,
                false,
            )
        });
        Ok(self.push(
            Tensor::from_parts(vec![g, m, n], out),
            Op::BatchMatMul { a, b, transpose_b },
            &[a, b],
        ))
    }

    // ---- shape -------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?.detached();
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::invalid(
                "permute",
                format!("{axes:?} is not a permutation of rank {}", shape.len()),
            ));
        }
        let (out_shape, data) = permute_data(self.value(x).data(), &shape, axes);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Permute(x, axes.to_vec()), &[x]))
    }

    /// Collapse every axis after the first: `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() < 2 {
            return Err(Error::invalid("flatten", format!("needs rank >= 2, got {shape:?}")));
        }
        let b = shape[0];
        let rest = numel(&shape[1..]);
        self.reshape(x, &[b, rest])
    }

    /// Stack `n` copies of `x` along a new leading axis.
    pub fn broadcast_leading(&mut self, x: Var, n: usize) -> Var {
        let v = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(v.shape());
        let data = v.data().repeat(n);
        self.push(Tensor::from_parts(shape, data), Op::BroadcastLeading(x), &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        check_axis(&base, axis)?;
        let mut dim = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            dim += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = dim;
        let mut data = Vec::with_capacity(outer * dim * inner);
        for o in 0..outer {
            for &x in xs {
                let d = self.shape(x)[axis];
                data.extend_from_slice(&self.value(x).data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Concat(xs.to_vec(), axis), xs))
    }

    /// Slice `index` out of `axis`, dropping that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(&shape, axis)?;
        if index >= shape[axis] {
            return Err(Error::invalid(
                "select",
                format!("index {index} out of range for extent {}", shape[axis]),
            ));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * dim + index) * inner..][..inner]);
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Select { x, axis, index }, &[x]))
    }

    // ---- reductions --------------------------------------------------

    fn reduce(&mut self, x: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let v = self.value(x);
        let (shape, data) = match axis {
            None => {
                let mut s: T = v.data().iter().copied().sum();
                if mean {
                    s = s / T::of(v.numel() as f64);
                }
                (Vec::new(), vec![s])
            }
            Some(axis) => {
                check_axis(v.shape(), axis)?;
                let (outer, dim, inner) = split_axis(v.shape(), axis);
                let src = v.data();
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for d in 0..dim {
                        let row = &src[(o * dim + d) * inner..][..inner];
                        for (acc, &e) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                            *acc = *acc + e;
                        }
                    }
                }
                if mean {
                    let c = T::of(dim as f64);
                    out.iter_mut().for_each(|e| *e = *e / c);
                }
                let mut s = v.shape().to_vec();
                s.remove(axis);
                (s, out)
            }
        };
        let op = if mean { Op::Mean(x, axis) } else { Op::Sum(x, axis) };
        Ok(self.push(Tensor::from_parts(shape, data), op, &[x]))
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    /// Softmax along `axis`, stabilised by subtracting the slice max.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        check_axis(v.shape(), axis)?;
        let (outer, dim, inner) = split_axis(v.shape(), axis);
        if dim == 0 {
            return Err(Error::invalid("softmax", "empty axis"));
        }
        let src = v.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |d: usize| (o * dim + d) * inner + i;
                let mut m = src[at(0)];
                for d in 1..dim {
                    m = m.max(src[at(d)]);
                }
                let mut z = T::zero();
                for d in 0..dim {
                    let e = (src[at(d)] - m).exp();
                    out[at(d)] = e;
                    z = z + e;
                }
                for d in 0..dim {
                    out[at(d)] = out[at(d)] / z;
                }
            }
        }
        let shape = v.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(x, axis), &[x]))
    }

    // ---- explicit broadcasting ---------------------------------------

    fn check_along(&self, op: &'static str, x: Var, p: Var, axis: usize) -> Result<()> {
        let (sx, sp) = (self.shape(x), self.shape(p));
        check_axis(sx, axis)?;
        if sp.len() != 1 || sp[0] != sx[axis] {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sx.to_vec(),
                rhs: sp.to_vec(),
            });
        }
        Ok(())
    }

    /// Add the 1-D `bias` along `axis` of `x`.
    pub fn add_along(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        self.check_along("add_along", x, bias, axis)?;
        let (outer, dim, inner) = split_axis(self.shape(x), axis);
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for o in 0..outer {
            for d in 0..dim {
                data[(o * dim + d) * inner..][..inner]
                    .iter_mut()
                    .for_each(|e| *e = *e + b[d]);
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::AddAlong { x, bias, axis },
            &[x, bias],
        ))
    }

    /// Multiply by the 1-D `scale` along `axis` of `x`.
    pub fn mul_along(&mut self, x: Var, scale: Var, axis: usize) -> Result<Var> {
        self.check_along("mul_along", x, scale, axis)?;
        let (outer, dim, inner) = split_axis(self.shape(x), axis);
        let s = self.value(scale).data();
        let mut data = self.value(x).data().to_vec();
        for o in 0..outer {
            for d in 0..dim {
                data[(o * dim + d) * inner..][..inner]
                    .iter_mut()
                    .for_each(|e| *e = *e * s[d]);
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::MulAlong { x, scale, axis },
            &[x, scale],
        ))
    }

    /// `x + b` where `b`'s shape is a suffix of `x`'s; `b` repeats over the
    /// leading axes.
    pub fn add_suffix(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return Err(Error::ShapeMismatch {
                op: "add_suffix",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let inner = numel(sb);
        let bv = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        if inner > 0 {
            for chunk in data.chunks_mut(inner) {
                chunk.iter_mut().zip(bv).for_each(|(e, &v)| *e = *e + v);
            }
        }
        let shape = sx.to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddSuffix(x, b), &[x, b]))
    }

    /// `x * s` where `s`'s shape is a prefix of `x`'s; `s` repeats over the
    /// trailing axes.
    pub fn mul_prefix(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x), self.shape(s));
        if ss.len() > sx.len() || sx[..ss.len()] != *ss {
            return Err(Error::ShapeMismatch {
                op: "mul_prefix",
                lhs: sx.to_vec(),
                rhs: ss.to_vec(),
            });
        }
        let inner = numel(&sx[ss.len()..]);
        let sv = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        if inner > 0 {
            for (chunk, &f) in data.chunks_mut(inner).zip(sv) {
                chunk.iter_mut().for_each(|e| *e = *e * f);
            }
        }
        let shape = sx.to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::MulPrefix(x, s), &[x, s]))
    }

    // ---- normalisation -----------------------------------------------

    /// Normalise each slice along the last axis to zero mean and unit
    /// (biased, `eps`-damped) variance.
    pub fn normalize_last(&mut self, x: Var, eps: T) -> Result<Var> {
        let v = self.value(x);
        let c = *v
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("layer_norm", "scalar input"))?;
        if c == 0 {
            return Err(Error::invalid("layer_norm", "empty last axis"));
        }
        let rows = v.numel() / c;
        let mut out = vec![T::zero(); v.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        let cf = T::of(c as f64);
        for r in 0..rows {
            let row = &v.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / cf;
            let is = T::one() / (var + eps).sqrt();
            for (o, &e) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = (e - mean) * is;
            }
            inv_std.push(is);
        }
        let shape = v.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::NormalizeLast { x, inv_std }, &[x]))
    }

    /// Batch-statistics normalisation over every axis except axis 1.
    /// Returns the normalised value with the per-channel batch mean and
    /// biased variance.
    pub fn normalize_channels(&mut self, x: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let v = self.value(x);
        if v.rank() < 2 {
            return Err(Error::invalid("batch_norm", "needs rank >= 2"));
        }
        let (outer, ch, inner) = split_axis(v.shape(), 1);
        let count = outer * inner;
        if count == 0 {
            return Err(Error::invalid("batch_norm", "empty batch"));
        }
        let n = T::of(count as f64);
        let src = v.data();
        let mut means = vec![T::zero(); ch];
        let mut vars = vec![T::zero(); ch];
        for (c, (mean, var)) in means.iter_mut().zip(vars.iter_mut()).enumerate() {
            let mut s = T::zero();
            for o in 0..outer {
                s = s + src[(o * ch + c) * inner..][..inner].iter().copied().sum::<T>();
            }
            *mean = s / n;
            let mut q = T::zero();
            for o in 0..outer {
                q = q + src[(o * ch + c) * inner..][..inner]
                    .iter()
                    .map(|&e| (e - *mean) * (e - *mean))
                    .sum::<T>();
            }
            *var = q / n;
        }
        let inv_std: Vec<T> = vars.iter().map(|&var| T::one() / (var + eps).sqrt()).collect();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for c in 0..ch {
                let at = (o * ch + c) * inner;
                for i in 0..inner {
                    out[at + i] = (src[at + i] - means[c]) * inv_std[c];
                }
            }
        }
        let shape = v.shape().to_vec();
        let var = self.push(
            Tensor::from_parts(shape, out),
            Op::NormalizeChannels { x, inv_std },
            &[x],
        );
        Ok((var, means, vars))
    }

    // ---- loss ---------------------------------------------------------

    /// Mean binary cross-entropy of probabilities `pred` (`[B]` or `[B, 1]`)
    /// against 0/1 `labels`, with `pred` clamped to `[eps, 1 - eps]`.
    ///
    /// The derivative is taken at the clamped probability.
    pub fn bce(&mut self, pred: Var, labels: &[T], eps: T) -> Result<Var> {
        let p = self.value(pred);
        let ok_shape = match p.shape() {
            [b] | [b, 1] => *b == labels.len(),
            _ => false,
        };
        if !ok_shape {
            return Err(Error::ShapeMismatch {
                op: "bce",
                lhs: p.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&y) = labels.iter().find(|&&y| y != T::zero() && y != T::one()) {
            return Err(Error::InvalidLabel(y.as_f64()));
        }
        if labels.is_empty() {
            return Err(Error::invalid("bce", "empty batch"));
        }
        let hi = T::one() - eps;
        // NaN predictions must surface as a NaN loss, not be clamped away
        let total: T = p
            .data()
            .iter()
            .zip(labels)
            .map(|(&pv, &y)| {
                let pc = if pv.is_nan() { pv } else { pv.max(eps).min(hi) };
                -(y * pc.ln() + (T::one() - y) * (T::one() - pc).ln())
            })
            .sum();
        let loss = total / T::of(labels.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                labels: labels.to_vec(),
                eps,
            },
            &[pred],
        ))
    }

    // ---- backward ----------------------------------------------------

    /// Populate gradients of `loss` for every node that requires them.
    /// Gradients from a previous call are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, &x)| *b = *b + x),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let map1 = |x: Var, f: &dyn Fn(usize) -> T| -> Vec<T> { (0..self.val(x).len()).map(f).collect() };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&e| -e).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.iter().zip(vb).map(|(&e, &v)| e * v).collect());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.iter().zip(va).map(|(&e, &v)| e * v).collect());
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.iter().zip(vb).map(|(&e, &v)| e / v).collect());
                }
                if self.wants(*b) {
                    let gb = (0..g.len()).map(|k| -g[k] * va[k] / (vb[k] * vb[k])).collect();
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::MulScalar(x, s) => self.accumulate(grads, *x, g.iter().map(|&e| e * *s).collect()),
            Op::Exp(x) => self.accumulate(grads, *x, map1(*x, &|k| g[k] * y[k])),
            Op::Log(x) => {
                let vx = self.val(*x);
                self.accumulate(grads, *x, map1(*x, &|k| g[k] / vx[k]))
            }
            Op::MaxScalar(x, s) => {
                let vx = self.val(*x);
                self.accumulate(grads, *x, map1(*x, &|k| if vx[k] > *s { g[k] } else { T::zero() }))
            }
            Op::LeakyRelu(x, slope) => {
                let vx = self.val(*x);
                self.accumulate(
                    grads,
                    *x,
                    map1(*x, &|k| if vx[k] > T::zero() { g[k] } else { g[k] * *slope }),
                )
            }
            Op::Sigmoid(x) => self.accumulate(grads, *x, map1(*x, &|k| g[k] * y[k] * (T::one() - y[k]))),
            Op::Tanh(x) => self.accumulate(grads, *x, map1(*x, &|k| g[k] * (T::one() - y[k] * y[k]))),
            Op::Gelu(x) => {
                let vx = self.val(*x);
                self.accumulate(grads, *x, map1(*x, &|k| g[k] * T::of(gelu_grad_f64(vx[k].as_f64()))))
            }
            Op::HardSwish(x) => {
                let vx = self.val(*x);
                self.accumulate(grads, *x, map1(*x, &|k| g[k] * hard_swish_grad(vx[k])))
            }
            Op::Mask(x, mask) => self.accumulate(grads, *x, g.iter().zip(mask).map(|(&e, &m)| e * m).collect()),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    kernels::gemm(m, n, k, g, false, self.val(*b), true, &mut ga, false);
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    kernels::gemm(k, m, n, self.val(*a), true, g, false, &mut gb, false);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let sa = self.nodes[a.0].value.shape();
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (va, vb) = (self.val(*a), self.val(*b));
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); bs * m * k];
                    ga.par_chunks_mut((m * k).max(1)).enumerate().for_each(|(i, o)| {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &vb[i * k * n..(i + 1) * k * n];
                        // transpose_b: b is [n, k], so g . b; else g . b^T.
                        kernels::gemm(m, n, k, gi, false, bi, !*transpose_b, o, false);
                    });
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); bs * k * n];
                    gb.par_chunks_mut((k * n).max(1)).enumerate().for_each(|(i, o)| {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &va[i * m * k..(i + 1) * m * k];
                        if *transpose_b {
                            // d b[n, k] = g^T . a
                            kernels::gemm(n, m, k, gi, true, ai, false, o, false);
                        } else {
                            // d b[k, n] = a^T . g
                            kernels::gemm(k, m, n, ai, true, gi, false, o, false);
                        }
                    });
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (_, gx) = permute_data(g, node.value.shape(), &inverse);
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x, axis) | Op::Mean(x, axis) => {
                let mean = matches!(node.op, Op::Mean(..));
                let sx = self.nodes[x.0].value.shape();
                let gx = match axis {
                    None => {
                        let n = numel(sx);
                        let e = if mean { g[0] / T::of(n as f64) } else { g[0] };
                        vec![e; n]
                    }
                    Some(axis) => {
                        let (outer, dim, inner) = split_axis(sx, *axis);
                        let scale = if mean { T::one() / T::of(dim as f64) } else { T::one() };
                        let mut gx = vec![T::zero(); outer * dim * inner];
                        for o in 0..outer {
                            for d in 0..dim {
                                for k in 0..inner {
                                    gx[(o * dim + d) * inner + k] = g[o * inner + k] * scale;
                                }
                            }
                        }
                        gx
                    }
                };
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(x, axis) => {
                let (outer, dim, inner) = split_axis(node.value.shape(), *axis);
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let at = |d: usize| (o * dim + d) * inner + k;
                        let dotp: T = (0..dim).map(|d| g[at(d)] * y[at(d)]).sum();
                        for d in 0..dim {
                            gx[at(d)] = y[at(d)] * (g[at(d)] - dotp);
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::AddAlong { x, bias, axis } => {
                self.accumulate(grads, *x, g.to_vec());
                if self.wants(*bias) {
                    let (outer, dim, inner) = split_axis(node.value.shape(), *axis);
                    let mut gb = vec![T::zero(); dim];
                    for o in 0..outer {
                        for (d, acc) in gb.iter_mut().enumerate() {
                            *acc = *acc + g[(o * dim + d) * inner..][..inner].iter().copied().sum::<T>();
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::MulAlong { x, scale, axis } => {
                let (outer, dim, inner) = split_axis(node.value.shape(), *axis);
                let s = self.val(*scale);
                let vx = self.val(*x);
                if self.wants(*x) {
                    let mut gx = g.to_vec();
                    for o in 0..outer {
                        for d in 0..dim {
                            gx[(o * dim + d) * inner..][..inner]
                                .iter_mut()
                                .for_each(|e| *e = *e * s[d]);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.wants(*scale) {
                    let mut gs = vec![T::zero(); dim];
                    for o in 0..outer {
                        for (d, acc) in gs.iter_mut().enumerate() {
                            let at = (o * dim + d) * inner;
                            *acc = *acc + (0..inner).map(|k| g[at + k] * vx[at + k]).sum::<T>();
                        }
                    }
                    self.accumulate(grads, *scale, gs);
                }
            }
            Op::AddSuffix(x, b) => {
                self.accumulate(grads, *x, g.to_vec());
                if self.wants(*b) {
                    let inner = self.val(*b).len();
                    let mut gb = vec![T::zero(); inner];
                    if inner > 0 {
                        for chunk in g.chunks(inner) {
                            gb.iter_mut().zip(chunk).for_each(|(a, &e)| *a = *a + e);
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MulPrefix(x, s) => {
                let sv = self.val(*s);
                let vx = self.val(*x);
                let inner = if sv.is_empty() { 0 } else { vx.len() / sv.len() };
                if self.wants(*x) {
                    let mut gx = g.to_vec();
                    if inner > 0 {
                        for (chunk, &f) in gx.chunks_mut(inner).zip(sv) {
                            chunk.iter_mut().for_each(|e| *e = *e * f);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.wants(*s) {
                    let gs = (0..sv.len())
                        .map(|o| (0..inner).map(|k| g[o * inner + k] * vx[o * inner + k]).sum())
                        .collect();
                    self.accumulate(grads, *s, gs);
                }
            }
            Op::BroadcastLeading(x) => {
                let inner = self.val(*x).len();
                let mut gx = vec![T::zero(); inner];
                if inner > 0 {
                    for chunk in g.chunks(inner) {
                        gx.iter_mut().zip(chunk).for_each(|(a, &e)| *a = *a + e);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Concat(xs, axis) => {
                let (outer, dim, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let d = self.nodes[x.0].value.shape()[*axis];
                    if self.wants(x) {
                        let mut gx = Vec::with_capacity(outer * d * inner);
                        for o in 0..outer {
                            gx.extend_from_slice(&g[(o * dim + offset) * inner..][..d * inner]);
                        }
                        self.accumulate(grads, x, gx);
                    }
                    offset += d;
                }
            }
            Op::Select { x, axis, index } => {
                let (outer, dim, inner) = split_axis(self.nodes[x.0].value.shape(), *axis);
                let mut gx = vec![T::zero(); outer * dim * inner];
                for o in 0..outer {
                    gx[(o * dim + index) * inner..][..inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(i, *x, *w, *b, *geom, g, grads),
            Op::MaxPool2d { x, argmax } => {
                let mut gx = vec![T::zero(); self.val(*x).len()];
                for (&src, &e) in argmax.iter().zip(g) {
                    gx[src] = gx[src] + e;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::NormalizeLast { x, inv_std } => {
                let c = *node.value.shape().last().unwrap();
                let cf = T::of(c as f64);
                let mut gx = vec![T::zero(); y.len()];
                for (r, &is) in inv_std.iter().enumerate() {
                    let (gr, yr) = (&g[r * c..(r + 1) * c], &y[r * c..(r + 1) * c]);
                    let mg = gr.iter().copied().sum::<T>() / cf;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / cf;
                    for k in 0..c {
                        gx[r * c + k] = is * (gr[k] - mg - yr[k] * mgy);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::NormalizeChannels { x, inv_std } => {
                let (outer, ch, inner) = split_axis(node.value.shape(), 1);
                let n = T::of((outer * inner) as f64);
                let mut gx = vec![T::zero(); y.len()];
                for (c, &is) in inv_std.iter().enumerate().take(ch) {
                    let mut sg = T::zero();
                    let mut sgy = T::zero();
                    for o in 0..outer {
                        let at = (o * ch + c) * inner;
                        for k in 0..inner {
                            sg = sg + g[at + k];
                            sgy = sgy + g[at + k] * y[at + k];
                        }
                    }
                    let (mg, mgy) = (sg / n, sgy / n);
                    for o in 0..outer {
                        let at = (o * ch + c) * inner;
                        for k in 0..inner {
                            gx[at + k] = is * (g[at + k] - mg - y[at + k] * mgy);
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Bce { pred, labels, eps } => {
                let p = self.val(*pred);
                let hi = T::one() - *eps;
                let scale = g[0] / T::of(labels.len() as f64);
                let gp = p
                    .iter()
                    .zip(labels)
                    .map(|(&pv, &yv)| {
                        let pc = if pv.is_nan() { pv } else { pv.max(*eps).min(hi) };
                        scale * (-(yv / pc) + (T::one() - yv) / (T::one() - pc))
                    })
                    .collect();
                self.accumulate(grads, *pred, gp);
            }
        }
        Ok(())
    }

    // ---- spatial -----------------------------------------------------

    /// Cross-correlation of `x: [B, Cin, H, W]` with `w: [Cout, Cin/groups, kh, kw]`
    /// plus an optional per-output-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: Conv2dGeometry) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: sx.clone(),
            rhs: sw.clone(),
        };
        if sx.len() != 4 || sw.len() != 4 {
            return Err(mismatch());
        }
        if geom.stride == 0 || geom.groups == 0 {
            return Err(Error::invalid("conv2d", "stride and groups must be positive"));
        }
        let (batch, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, cin_g, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if cin_g * geom.groups != cin || cout % geom.groups != 0 {
            return Err(mismatch());
        }
        if kh == 0 || kw == 0 {
            return Err(Error::invalid("conv2d", "empty kernel"));
        }
        if kh > h + 2 * geom.pad_h || kw > wd + 2 * geom.pad_w {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "kernel {kh}x{kw} larger than padded input {}x{}",
                    h + 2 * geom.pad_h,
                    wd + 2 * geom.pad_w
                ),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![cout],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let layout = conv_layout(&sx, &sw, geom);
        let co_g = cout / geom.groups;
        let plane = cin_g * h * wd;
        let p = layout.cols();
        let kdim = layout.rows();
        let (vx, vw) = (self.val(x), self.val(w));
        let bias = b.map(|b| self.val(b));
        let mut out = vec![T::zero(); batch * cout * p];
        out.par_chunks_mut((cout * p).max(1)).enumerate().for_each(|(n, o)| {
            let mut cols = vec![T::zero(); kdim * p];
            for g in 0..geom.groups {
                let xin = &vx[(n * cin + g * cin_g) * h * wd..][..plane];
                kernels::im2col(xin, &layout, &mut cols);
                kernels::gemm(
                    co_g,
                    kdim,
                    p,
                    &vw[g * co_g * kdim..(g + 1) * co_g * kdim],
                    false,
                    &cols,
                    false,
                    &mut o[g * co_g * p..(g + 1) * co_g * p],
                    false,
                );
            }
            if let Some(bias) = bias {
                for (c, &bv) in bias.iter().enumerate() {
                    o[c * p..(c + 1) * p].iter_mut().for_each(|e| *e = *e + bv);
                }
            }
        });
        let out = Tensor::from_parts(vec![batch, cout, layout.out_h, layout.out_w], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        node: usize,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv2dGeometry,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let sx = self.nodes[x.0].value.shape().to_vec();
        let sw = self.nodes[w.0].value.shape().to_vec();
        let layout = conv_layout(&sx, &sw, geom);
        let (batch, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let cout = sw[0];
        let cin_g = cin / geom.groups;
        let co_g = cout / geom.groups;
        let p = layout.cols();
        let kdim = layout.rows();
        let plane = cin_g * h * wd;
        let (vx, vw) = (self.val(x), self.val(w));
        let (want_x, want_w) = (self.wants(x), self.wants(w));
        debug_assert_eq!(self.nodes[node].value.numel(), batch * cout * p);

        // Per-sample input gradient and weight-gradient partials.
        let parts: Vec<(Vec<T>, Vec<T>)> = (0..batch)
            .into_par_iter()
            .map(|n| {
                let gn = &g[n * cout * p..(n + 1) * cout * p];
                let mut dx = if want_x {
                    vec![T::zero(); cin * h * wd]
                } else {
                    Vec::new()
                };
                let mut dw = if want_w { vec![T::zero(); vw.len()] } else { Vec::new() };
                let mut cols = vec![T::zero(); kdim * p];
                for grp in 0..geom.groups {
                    let gg = &gn[grp * co_g * p..(grp + 1) * co_g * p];
                    if want_w {
                        let xin = &vx[(n * cin + grp * cin_g) * h * wd..][..plane];
                        kernels::im2col(xin, &layout, &mut cols);
                        kernels::gemm(
                            co_g,
                            p,
                            kdim,
                            gg,
                            false,
                            &cols,
                            true,
                            &mut dw[grp * co_g * kdim..(grp + 1) * co_g * kdim],
                            false,
                        );
                    }
                    if want_x {
                        kernels::gemm(
                            kdim,
                            co_g,
                            p,
                            &vw[grp * co_g * kdim..(grp + 1) * co_g * kdim],
                            true,
                            gg,
                            false,
                            &mut cols,
                            false,
                        );
                        kernels::col2im(&cols, &layout, &mut dx[grp * plane..(grp + 1) * plane]);
                    }
                }
                (dx, dw)
            })
            .collect();

        if want_x {
            let mut gx = Vec::with_capacity(batch * cin * h * wd);
            for (dx, _) in &parts {
                gx.extend_from_slice(dx);
            }
            self.accumulate(grads, x, gx);
        }
        if want_w {
            let mut gw = vec![T::zero(); vw.len()];
            for (_, dw) in &parts {
                gw.iter_mut().zip(dw).for_each(|(a, &e)| *a = *a + e);
            }
            self.accumulate(grads, w, gw);
        }
        if let Some(b) = b {
            if self.wants(b) {
                let mut gb = vec![T::zero(); cout];
                for n in 0..batch {
                    for (c, acc) in gb.iter_mut().enumerate() {
                        *acc = *acc + g[(n * cout + c) * p..][..p].iter().copied().sum::<T>();
                    }
                }
                self.accumulate(grads, b, gb);
            }
        }
    }

    /// Max pooling over `[B, C, H, W]`. Among equal maxima the first in
    /// row-major window order receives the gradient.
    pub fn max_pool2d(&mut self, x: Var, geom: Pool2dGeometry) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::invalid("max_pool2d", format!("needs rank 4, got {sx:?}")));
        }
        let Pool2dGeometry {
            window: k,
            stride,
            padding: pad,
        } = geom;
        if k == 0 || stride == 0 {
            return Err(Error::invalid("max_pool2d", "window and stride must be positive"));
        }
        if pad >= k {
            return Err(Error::invalid("max_pool2d", "padding must be smaller than the window"));
        }
        let (batch, ch, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if k > h + 2 * pad || k > w + 2 * pad {
            return Err(Error::invalid(
                "max_pool2d",
                format!("window {k} exceeds input {h}x{w}"),
            ));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let src = self.val(x);
        let mut out = Vec::with_capacity(batch * ch * oh * ow);
        let mut argmax = Vec::with_capacity(batch * ch * oh * ow);
        for bc in 0..batch * ch {
            let base = bc * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best: Option<(T, usize)> = None;
                    for di in 0..k {
                        let r = (i * stride + di) as isize - pad as isize;
                        if r < 0 || r >= h as isize {
                            continue;
                        }
                        for dj in 0..k {
                            let c = (j * stride + dj) as isize - pad as isize;
                            if c < 0 || c >= w as isize {
                                continue;
                            }
                            let at = base + r as usize * w + c as usize;
                            if best.is_none_or(|(m, _)| src[at] > m) {
                                best = Some((src[at], at));
                            }
                        }
                    }
                    let (m, at) = best.expect("window overlaps the input");
                    out.push(m);
                    argmax.push(at);
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![batch, ch, oh, ow], out),
            Op::MaxPool2d { x, argmax },
            &[x],
        ))
    }
}

fn conv_layout(sx: &[usize], sw: &[usize], geom: Conv2dGeometry) -> ConvLayout {
    let (h, w) = (sx[2], sx[3]);
    let (kh, kw) = (sw[2], sw[3]);
    ConvLayout {
        channels: sw[1],
        height: h,
        width: w,
        kh,
        kw,
        stride: geom.stride,
        pad_h: geom.pad_h,
        pad_w: geom.pad_w,
        out_h: (h + 2 * geom.pad_h - kh) / geom.stride + 1,
        out_w: (w + 2 * geom.pad_w - kw) / geom.stride + 1,
    }
}
