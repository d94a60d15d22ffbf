//! Differentiable wrappers over the tensor kernels.

use std::rc::Rc;

use super::tape::Var;
use crate::error::{shape_err, Result};
use crate::tensor::index::{self, IndexMap};
use crate::tensor::nn::{self, split_axis, Activation};
use crate::tensor::{conv, dft, spatial, Padding};
use crate::{Scalar, Tensor};

fn mean_axis_scale<T: Scalar>(n: usize) -> T {
    T::one() / T::lit(n as f64)
}

/// Broadcasts a reduced tensor (axis removed) back along `axis` of `shape`.
fn expand_axis<T: Scalar>(g: &Tensor<T>, shape: &[usize], axis: usize) -> Result<Tensor<T>> {
    let mut kept = shape.to_vec();
    kept[axis] = 1;
    g.reshape(&kept)?.expand(shape)
}

impl<'t, T: Scalar> Var<'t, T> {
    fn unary<F>(&self, value: Tensor<T>, back: F) -> Var<'t, T>
    where
        F: Fn(&Tensor<T>) -> Result<Tensor<T>> + 'static,
    {
        self.tape.op(value, &[self], move |g, _| Ok(vec![Some(back(g)?)]))
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let value = self.value.broadcast_zip(&other.value, |a, b| a + b)?;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Ok(self.tape.op(value, &[self, other], move |g, need| {
            Ok(vec![
                need[0].then(|| g.sum_to(&sa)).transpose()?,
                need[1].then(|| g.sum_to(&sb)).transpose()?,
            ])
        }))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let value = self.value.broadcast_zip(&other.value, |a, b| a - b)?;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Ok(self.tape.op(value, &[self, other], move |g, need| {
            Ok(vec![
                need[0].then(|| g.sum_to(&sa)).transpose()?,
                need[1].then(|| g.map(|v| -v).sum_to(&sb)).transpose()?,
            ])
        }))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let value = self.value.broadcast_zip(&other.value, |a, b| a * b)?;
        let (a, b) = (Rc::clone(&self.value), Rc::clone(&other.value));
        Ok(self.tape.op(value, &[self, other], move |g, need| {
            let ga = if need[0] {
                Some(g.broadcast_zip(&b, |x, y| x * y)?.sum_to(a.shape())?)
            } else {
                None
            };
            let gb = if need[1] {
                Some(g.broadcast_zip(&a, |x, y| x * y)?.sum_to(b.shape())?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }))
    }

    pub fn div(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let value = self.value.broadcast_zip(&other.value, |a, b| a / b)?;
        let (a, b) = (Rc::clone(&self.value), Rc::clone(&other.value));
        Ok(self.tape.op(value, &[self, other], move |g, need| {
            let ga = if need[0] {
                Some(g.broadcast_zip(&b, |x, y| x / y)?.sum_to(a.shape())?)
            } else {
                None
            };
            let gb = if need[1] {
                // d(a/b)/db = -a/b^2
                let q = a.broadcast_zip(&b, |x, y| -x / (y * y))?;
                Some(g.broadcast_zip(&q, |x, y| x * y)?.sum_to(b.shape())?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }))
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        self.unary(self.value.scale(c), move |g| Ok(g.scale(c)))
    }

    pub fn add_scalar(&self, c: T) -> Var<'t, T> {
        self.unary(self.value.map(|v| v + c), |g| Ok(g.clone()))
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    pub fn exp(&self) -> Var<'t, T> {
        let y = self.value.map(|v| v.exp());
        let saved = y.clone();
        self.unary(y, move |g| g.mul(&saved))
    }

    pub fn ln(&self) -> Var<'t, T> {
        let x = Rc::clone(&self.value);
        self.unary(self.value.map(|v| v.ln()), move |g| g.zip_map(&x, "ln", |g, x| g / x))
    }

    /// `|x|`, with subgradient 0 at the kink.
    pub fn abs(&self) -> Var<'t, T> {
        let x = Rc::clone(&self.value);
        self.unary(self.value.map(|v| v.abs()), move |g| {
            g.zip_map(&x, "abs", |g, x| {
                if x > T::zero() {
                    g
                } else if x < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            })
        })
    }

    pub fn square(&self) -> Var<'t, T> {
        let x = Rc::clone(&self.value);
        self.unary(self.value.map(|v| v * v), move |g| {
            g.zip_map(&x, "square", |g, x| g * (x + x))
        })
    }

    pub fn act(&self, kind: Activation) -> Var<'t, T> {
        let x = Rc::clone(&self.value);
        self.unary(nn::activation(kind, &self.value), move |g| {
            nn::activation_backward(kind, &x, g)
        })
    }

    pub fn silu(&self) -> Var<'t, T> {
        self.act(Activation::Silu)
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        self.act(Activation::Sigmoid)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Var<'t, T> {
        let shape = self.shape().to_vec();
        self.unary(Tensor::scalar(self.value.sum()), move |g| {
            Ok(Tensor::full(&shape, g.data()[0]))
        })
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = self.value.numel().max(1);
        self.sum().scale(mean_axis_scale(n))
    }

    /// Sums `axis` away.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.shape().to_vec();
        let (outer, n, inner) = split_axis(&shape, axis, "sum_axis")?;
        let src = self.value.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &src[(o * n + k) * inner..][..inner];
                for (d, &v) in out[o * inner..][..inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let mut reduced = shape.clone();
        reduced.remove(axis);
        let value = Tensor::new(reduced, out)?;
        Ok(self.unary(value, move |g| expand_axis(g, &shape, axis)))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        let n = *self
            .shape()
            .get(axis)
            .ok_or_else(|| shape_err("mean_axis", format!("axis {axis} out of range")))?;
        Ok(self.sum_axis(axis)?.scale(mean_axis_scale(n.max(1))))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = self.value.reshape(shape)?;
        let orig = self.shape().to_vec();
        Ok(self.unary(value, move |g| g.reshape(&orig)))
    }

    /// `out[i] = self[map.indices[i]]`; the adjoint scatter-adds.
    pub fn gather(&self, map: &IndexMap) -> Var<'t, T> {
        let value = self.value.gather(&map.indices, &map.shape);
        let idx = Rc::new(map.indices.clone());
        let src_shape = self.shape().to_vec();
        self.unary(value, move |g| Ok(g.scatter_add(&idx, &src_shape)))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t, T>> {
        Ok(self.gather(&index::permute_map(self.shape(), axes)?))
    }

    pub fn transpose_last2(&self) -> Result<Var<'t, T>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(shape_err("transpose", format!("need rank >= 2, got {:?}", self.shape())));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        Ok(self.gather(&index::narrow_map(self.shape(), axis, start, len)?))
    }

    /// Splits `axis` into `parts` equal chunks.
    pub fn chunk(&self, parts: usize, axis: usize) -> Result<Vec<Var<'t, T>>> {
        let n = *self
            .shape()
            .get(axis)
            .ok_or_else(|| shape_err("chunk", format!("axis {axis} out of range")))?;
        if parts == 0 || n % parts != 0 {
            return Err(shape_err("chunk", format!("extent {n} not divisible into {parts}")));
        }
        let step = n / parts;
        (0..parts).map(|i| self.narrow(axis, i * step, step)).collect()
    }

    pub fn concat(parts: &[&Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let values: Vec<&Tensor<T>> = parts.iter().map(|v| v.value.as_ref()).collect();
        let value = Tensor::concat(&values, axis)?;
        let extents: Vec<usize> = parts.iter().map(|v| v.shape()[axis]).collect();
        Ok(first.tape.op(value, parts, move |g, need| {
            let mut start = 0;
            let mut out = Vec::with_capacity(extents.len());
            for (i, &e) in extents.iter().enumerate() {
                out.push(if need[i] { Some(g.narrow(axis, start, e)?) } else { None });
                start += e;
            }
            Ok(out)
        }))
    }

    pub fn conv2d(
        &self,
        w: &Var<'t, T>,
        bias: Option<&Var<'t, T>>,
        padding: Padding,
        groups: usize,
    ) -> Result<Var<'t, T>> {
        let value = conv::conv2d(&self.value, &w.value, bias.map(|b| b.value.as_ref()), padding, groups)?;
        let (x, wv) = (Rc::clone(&self.value), Rc::clone(&w.value));
        let has_bias = bias.is_some();
        let mut inputs = vec![self, w];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Ok(self.tape.op(value, &inputs, move |g, need| {
            let nb = has_bias && need[2];
            let grads = conv::conv2d_backward(&x, &wv, has_bias, g, padding, groups, [need[0], need[1], nb])?;
            let mut out = vec![grads.x, grads.w];
            if has_bias {
                out.push(grads.bias);
            }
            Ok(out)
        }))
    }

    /// Affine map along the last axis with weight `[O, I]`.
    pub fn linear(&self, w: &Var<'t, T>, bias: Option<&Var<'t, T>>) -> Result<Var<'t, T>> {
        let value = nn::linear(&self.value, &w.value, bias.map(|b| b.value.as_ref()))?;
        let (x, wv) = (Rc::clone(&self.value), Rc::clone(&w.value));
        let has_bias = bias.is_some();
        let mut inputs = vec![self, w];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Ok(self.tape.op(value, &inputs, move |g, need| {
            let (gx, gw, gb) = nn::linear_backward(&x, &wv, g)?;
            let mut out = vec![need[0].then_some(gx), need[1].then_some(gw)];
            if has_bias {
                out.push(need[2].then_some(gb));
            }
            Ok(out)
        }))
    }

    /// 1x1 convolution on `[B, C, H, W]` with a linear-style weight `[O, C]`.
    pub fn pointwise(&self, w: &Var<'t, T>, bias: Option<&Var<'t, T>>) -> Result<Var<'t, T>> {
        let ws = w.shape().to_vec();
        if ws.len() != 2 {
            return Err(shape_err("pointwise", format!("weight must be [O, C], got {ws:?}")));
        }
        let w4 = w.reshape(&[ws[0], ws[1], 1, 1])?;
        self.conv2d(&w4, bias, Padding::Same, 1)
    }

    /// Batched matrix product `[G, n, k] x [G, k, m]`.
    pub fn bmm(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let value = nn::bmm(&self.value, &other.value)?;
        let (a, b) = (Rc::clone(&self.value), Rc::clone(&other.value));
        Ok(self.tape.op(value, &[self, other], move |g, need| {
            let ga = if need[0] {
                Some(nn::bmm(g, &nn::transpose_last2(&b)?)?)
            } else {
                None
            };
            let gb = if need[1] {
                Some(nn::bmm(&nn::transpose_last2(&a)?, g)?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let y = nn::softmax(&self.value, axis)?;
        let saved = y.clone();
        Ok(self.unary(y, move |g| nn::softmax_backward(&saved, g, axis)))
    }

    pub fn layer_norm(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>, axis: usize, eps: T) -> Result<Var<'t, T>> {
        let (y, cache) = nn::layer_norm(&self.value, &gamma.value, &beta.value, axis, eps)?;
        let gv = Rc::clone(&gamma.value);
        Ok(self.tape.op(y, &[self, gamma, beta], move |g, need| {
            let (gx, gg, gb) = nn::layer_norm_backward(&cache, &gv, g, axis)?;
            Ok(vec![need[0].then_some(gx), need[1].then_some(gg), need[2].then_some(gb)])
        }))
    }

    pub fn avg_pool(&self, kh: usize, kw: usize) -> Result<Var<'t, T>> {
        let value = spatial::avg_pool2d_rect(&self.value, kh, kw)?;
        Ok(self.unary(value, move |g| spatial::avg_pool2d_rect_backward(g, kh, kw)))
    }

    pub fn upsample(&self, s: usize) -> Result<Var<'t, T>> {
        let value = spatial::upsample_nearest(&self.value, s)?;
        Ok(self.unary(value, move |g| spatial::upsample_nearest_backward(g, s)))
    }

    pub fn pixel_shuffle(&self, r: usize) -> Result<Var<'t, T>> {
        Ok(self.gather(&spatial::pixel_shuffle_map(self.shape(), r)?))
    }

    /// Unnormalized 2-D DFT over the last two axes, as `(re, im)`.
    pub fn dft2(&self) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let (re, im) = dft::dft2(&self.value)?;
        let zeros = Rc::new(Tensor::zeros(self.shape()));
        let z = Rc::clone(&zeros);
        let vre = self.unary(re, move |g| dft::dft2_backward(g, &z));
        let vim = self.unary(im, move |g| dft::dft2_backward(&zeros, g));
        Ok((vre, vim))
    }

    /// Takes the value of `hard` while passing gradients straight to `soft`.
    pub fn straight_through(hard: Tensor<T>, soft: &Var<'t, T>) -> Result<Var<'t, T>> {
        if hard.shape() != soft.shape() {
            return Err(shape_err(
                "straight_through",
                format!("hard {:?} vs soft {:?}", hard.shape(), soft.shape()),
            ));
        }
        let value = soft.tape.st_value(hard, &soft.value)?;
        Ok(soft.unary(value, |g| Ok(g.clone())))
    }
}
