//! Elementwise activations, softmax, layer norm and dense products.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{invalid, shape_err, Result};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Sigmoid,
    Softplus,
    Relu,
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::lit(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
            Activation::Relu => x.max(T::zero()),
        }
    }

    /// Derivative at `x`; relu uses 0 at the kink.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Activation::Softplus => sigmoid(x),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

pub fn activation<T: Scalar>(kind: Activation, x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

pub fn activation_backward<T: Scalar>(kind: Activation, x: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(gy, "activation_backward", |v, g| g * kind.derivative(v))
}

/// `(outer, extent, inner)` decomposition of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(shape_err(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// Max-subtracted softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = split_axis(x.shape(), axis, "softmax")?;
    if n == 0 {
        return Err(invalid("softmax", "empty axis"));
    }
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let mut m = src[at(0)];
            for k in 1..n {
                m = m.max(src[at(k)]);
            }
            let mut z = T::zero();
            for k in 0..n {
                let e = (src[at(k)] - m).exp();
                out[at(k)] = e;
                z += e;
            }
            for k in 0..n {
                out[at(k)] /= z;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Given the softmax output `y`, `gx = y * (gy - sum(gy * y))` along `axis`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, gy: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    y.same_shape(gy, "softmax_backward")?;
    let (outer, n, inner) = split_axis(y.shape(), axis, "softmax_backward")?;
    let (yd, gd) = (y.data(), gy.data());
    let mut out = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let mut dot = T::zero();
            for k in 0..n {
                dot += yd[at(k)] * gd[at(k)];
            }
            for k in 0..n {
                out[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), out)
}

/// Normalization statistics saved for the backward pass.
pub struct LayerNormCache<T> {
    pub xhat: Tensor<T>,
    pub rstd: Vec<T>,
}

/// Normalizes along `axis` to zero mean / unit variance (biased), then applies
/// `gamma`, `beta` of length `shape[axis]`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    axis: usize,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let (outer, n, inner) = split_axis(x.shape(), axis, "layer_norm")?;
    if gamma.shape() != [n] || beta.shape() != [n] {
        return Err(shape_err(
            "layer_norm",
            format!("affine params must be [{n}], got {:?} / {:?}", gamma.shape(), beta.shape()),
        ));
    }
    if eps <= T::zero() {
        return Err(invalid("layer_norm", "eps must be positive"));
    }
    let src = x.data();
    let (g, b) = (gamma.data(), beta.data());
    let mut out = vec![T::zero(); src.len()];
    let mut xhat = vec![T::zero(); src.len()];
    let mut rstd = Vec::with_capacity(outer * inner);
    let nf = T::lit(n as f64);
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let mut mean = T::zero();
            for k in 0..n {
                mean += src[at(k)];
            }
            mean /= nf;
            let mut var = T::zero();
            for k in 0..n {
                let d = src[at(k)] - mean;
                var += d * d;
            }
            var /= nf;
            let r = T::one() / (var + eps).sqrt();
            for k in 0..n {
                let xh = (src[at(k)] - mean) * r;
                xhat[at(k)] = xh;
                out[at(k)] = xh * g[k] + b[k];
            }
            rstd.push(r);
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        LayerNormCache {
            xhat: Tensor::new(x.shape().to_vec(), xhat)?,
            rstd,
        },
    ))
}

/// Returns `(gx, ggamma, gbeta)`.
pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    gy: &Tensor<T>,
    axis: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let shape = cache.xhat.shape().to_vec();
    let (outer, n, inner) = split_axis(&shape, axis, "layer_norm_backward")?;
    let (xh, gd, g) = (cache.xhat.data(), gy.data(), gamma.data());
    let mut gx = vec![T::zero(); xh.len()];
    let mut gg = vec![T::zero(); n];
    let mut gb = vec![T::zero(); n];
    let nf = T::lit(n as f64);
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let r = cache.rstd[o * inner + i];
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for k in 0..n {
                let gxh = gd[at(k)] * g[k];
                sum_g += gxh;
                sum_gx += gxh * xh[at(k)];
                gg[k] += gd[at(k)] * xh[at(k)];
                gb[k] += gd[at(k)];
            }
            for k in 0..n {
                let gxh = gd[at(k)] * g[k];
                gx[at(k)] = r / nf * (nf * gxh - sum_g - xh[at(k)] * sum_gx);
            }
        }
    }
    Ok((
        Tensor::new(shape, gx)?,
        Tensor::new(vec![n], gg)?,
        Tensor::new(vec![n], gb)?,
    ))
}

/// Affine map along the last axis: `y[..., o] = sum_i x[..., i] W[o, i] + b[o]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let [o, i] = w.shape()[..] else {
        return Err(shape_err("linear", format!("weight must be [O, I], got {:?}", w.shape())));
    };
    let last = *x.shape().last().unwrap_or(&0);
    if x.rank() == 0 || last != i {
        return Err(shape_err("linear", format!("input last axis {last} vs weight inner {i}")));
    }
    if let Some(b) = b {
        if b.shape() != [o] {
            return Err(shape_err("linear", format!("bias must be [{o}], got {:?}", b.shape())));
        }
    }
    let rows = x.numel() / i;
    let (xd, wd) = (x.data(), w.data());
    let mut out = Vec::with_capacity(rows * o);
    for r in 0..rows {
        let xr = &xd[r * i..][..i];
        for oc in 0..o {
            let wr = &wd[oc * i..][..i];
            let mut acc = b.map_or(T::zero(), |b| b.data()[oc]);
            for (&a, &bb) in xr.iter().zip(wr) {
                acc += a * bb;
            }
            out.push(acc);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = o;
    Tensor::new(shape, out)
}

/// Returns `(gx, gw, gb)` for [`linear`].
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    let rows = x.numel() / i;
    let (xd, wd, gd) = (x.data(), w.data(), gy.data());
    let mut gx = vec![T::zero(); xd.len()];
    let mut gw = vec![T::zero(); wd.len()];
    let mut gb = vec![T::zero(); o];
    for r in 0..rows {
        let xr = &xd[r * i..][..i];
        let gr = &gd[r * o..][..o];
        let gxr = &mut gx[r * i..][..i];
        for (oc, &g) in gr.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            gb[oc] += g;
            let wr = &wd[oc * i..][..i];
            let gwr = &mut gw[oc * i..][..i];
            for k in 0..i {
                gxr[k] += g * wr[k];
                gwr[k] += g * xr[k];
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(w.shape().to_vec(), gw)?,
        Tensor::new(vec![o], gb)?,
    ))
}

/// Plain 2-D matrix product `[n, k] x [k, m]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k) = match a.shape()[..] {
        [n, k] => (n, k),
        _ => return Err(shape_err("matmul", format!("lhs must be rank 2, got {:?}", a.shape()))),
    };
    let m = match b.shape()[..] {
        [k2, m] if k2 == k => m,
        _ => return Err(shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape()))),
    };
    let out = bmm(&a.reshape(&[1, n, k])?, &b.reshape(&[1, k, m])?)?;
    out.into_reshape(&[n, m])
}

/// Batched product `[G, n, k] x [G, k, m] -> [G, n, m]`.
pub fn bmm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (g, n, k, m) = match (a.shape(), b.shape()) {
        (&[g, n, k], &[g2, k2, m]) if g == g2 && k == k2 => (g, n, k, m),
        _ => return Err(shape_err("bmm", format!("{:?} x {:?}", a.shape(), b.shape()))),
    };
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); g * n * m];
    for gi in 0..g {
        let am = &ad[gi * n * k..][..n * k];
        let bm = &bd[gi * k * m..][..k * m];
        let om = &mut out[gi * n * m..][..n * m];
        for r in 0..n {
            let orow = &mut om[r * m..][..m];
            for (kk, &av) in am[r * k..][..k].iter().enumerate() {
                for (o, &bv) in orow.iter_mut().zip(&bm[kk * m..][..m]) {
                    *o += av * bv;
                }
            }
        }
    }
    Tensor::new(vec![g, n, m], out)
}

/// Swaps the last two axes.
pub fn transpose_last2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let r = x.rank();
    if r < 2 {
        return Err(shape_err("transpose", format!("need rank >= 2, got {:?}", x.shape())));
    }
    let mut axes: Vec<usize> = (0..r).collect();
    axes.swap(r - 2, r - 1);
    x.permute(&axes)
}
