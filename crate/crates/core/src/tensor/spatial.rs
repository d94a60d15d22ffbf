//! Resolution changes on `[B, C, H, W]` maps: block averaging, nearest
//! upsampling and sub-pixel (pixel shuffle) rearrangement.

use super::index::IndexMap;
use super::Tensor;
use crate::error::{invalid, shape_err, Result};
use crate::Scalar;

/// Mean over non-overlapping `kh x kw` blocks. Extents must divide exactly.
pub fn avg_pool2d_rect<T: Scalar>(x: &Tensor<T>, kh: usize, kw: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4("avg_pool2d")?;
    if kh == 0 || kw == 0 {
        return Err(invalid("avg_pool2d", "pool size must be >= 1"));
    }
    if h % kh != 0 || w % kw != 0 {
        return Err(shape_err(
            "avg_pool2d",
            format!("extent {h}x{w} not divisible by pool {kh}x{kw}"),
        ));
    }
    let (oh, ow) = (h / kh, w / kw);
    let n = T::lit((kh * kw) as f64);
    let src = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    // Accumulate deviations from the block's first element: the mean of a
    // constant block is then reproduced exactly.
    for p in 0..b * c {
        let plane = &src[p * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let anchor = plane[oy * kh * w + ox * kw];
                let mut acc = T::zero();
                for y in oy * kh..(oy + 1) * kh {
                    for &v in &plane[y * w + ox * kw..][..kw] {
                        acc += v - anchor;
                    }
                }
                out.push(anchor + acc / n);
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

pub fn avg_pool2d<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    avg_pool2d_rect(x, s, s)
}

/// Adjoint of [`avg_pool2d_rect`]: spreads each gradient evenly over its block.
pub fn avg_pool2d_rect_backward<T: Scalar>(gy: &Tensor<T>, kh: usize, kw: usize) -> Result<Tensor<T>> {
    let up = upsample_nearest_rect(gy, kh, kw)?;
    Ok(up.scale(T::one() / T::lit((kh * kw) as f64)))
}

/// Replicates every cell into a `sh x sw` block.
pub fn upsample_nearest_rect<T: Scalar>(x: &Tensor<T>, sh: usize, sw: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4("upsample_nearest")?;
    if sh == 0 || sw == 0 {
        return Err(invalid("upsample_nearest", "scale must be >= 1"));
    }
    let (oh, ow) = (h * sh, w * sw);
    let src = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for p in 0..b * c {
        let plane = &src[p * h * w..][..h * w];
        for y in 0..oh {
            let row = &plane[(y / sh) * w..][..w];
            for xx in 0..ow {
                out.push(row[xx / sw]);
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    upsample_nearest_rect(x, s, s)
}

/// Adjoint of nearest upsampling: block sums.
pub fn upsample_nearest_backward<T: Scalar>(gy: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = gy.dims4("upsample_nearest_backward")?;
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(shape_err("upsample_nearest_backward", format!("{h}x{w} not divisible by {s}")));
    }
    let (oh, ow) = (h / s, w / s);
    let src = gy.data();
    let mut out = vec![T::zero(); b * c * oh * ow];
    for p in 0..b * c {
        let plane = &src[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for y in 0..h {
            let drow = &mut dst[(y / s) * ow..][..ow];
            for (x, &v) in plane[y * w..][..w].iter().enumerate() {
                drow[x / s] += v;
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

/// `out[b, c, h*r+i, w*r+j] = in[b, c*r*r + i*r + j, h, w]`.
pub fn pixel_shuffle_map(shape: &[usize], r: usize) -> Result<IndexMap> {
    let [b, cr, h, w] = shape[..] else {
        return Err(shape_err("pixel_shuffle", format!("expected [B,C,H,W], got {shape:?}")));
    };
    if r == 0 || cr % (r * r) != 0 {
        return Err(shape_err(
            "pixel_shuffle",
            format!("channel count {cr} not divisible by r^2 = {}", r * r),
        ));
    }
    let c = cr / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut indices = Vec::with_capacity(b * cr * h * w);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let (hh, i) = (y / r, y % r);
                    let (ww, j) = (x / r, x % r);
                    let src_c = ci * r * r + i * r + j;
                    indices.push(((bi * cr + src_c) * h + hh) * w + ww);
                }
            }
        }
    }
    Ok(IndexMap {
        indices,
        shape: vec![b, c, oh, ow],
    })
}

pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let m = pixel_shuffle_map(x.shape(), r)?;
    Ok(x.gather(&m.indices, &m.shape))
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4("pixel_unshuffle")?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(shape_err("pixel_unshuffle", format!("extent {h}x{w} not divisible by {r}")));
    }
    let src_shape = [b, c * r * r, h / r, w / r];
    let m = pixel_shuffle_map(&src_shape, r)?.invert(&src_shape)?;
    Ok(x.gather(&m.indices, &m.shape))
}
