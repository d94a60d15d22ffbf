//! Y-channel PSNR/SSIM and bicubic resizing.
//!
//! Luma follows studio-swing BT.601 on RGB in `[0, 1]`, giving values in
//! `[16, 235]`; PSNR and SSIM on luma use a peak of 255. Luma is not rounded
//! to integers before scoring.

use crate::error::{invalid, shape_err, Result};
use crate::{Scalar, Tensor};

pub const Y_OFFSET: f64 = 16.0;
pub const Y_COEFFS: [f64; 3] = [65.481, 128.553, 24.966];

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// 8-bit RGB image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageU8 {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl ImageU8 {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(shape_err("image", format!("{} bytes for {height}x{width}x3", data.len())));
        }
        Ok(ImageU8 { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        ImageU8 { height, width, data }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// `[1, 3, H, W]` with values divided by 255.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (h, w) = (self.height, self.width);
        Tensor::from_fn(&[1, 3, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            T::lit(self.data[p * 3 + c] as f64 / 255.0)
        })
    }

    /// Inverse of [`ImageU8::to_tensor`]: clamps to `[0, 1]` and rounds to the nearest level.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (h, w) = rgb_dims(t)?;
        let plane = h * w;
        let mut data = vec![0u8; plane * 3];
        for c in 0..3 {
            for p in 0..plane {
                let v = t.data()[c * plane + p].as_f64();
                let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                data[p * 3 + c] = (v * 255.0).round() as u8;
            }
        }
        ImageU8::new(h, w, data)
    }
}

/// Accepts `[3, H, W]` or `[1, 3, H, W]`.
fn rgb_dims<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [3, h, w] | [1, 3, h, w] => Ok((*h, *w)),
        s => Err(shape_err("rgb", format!("expected [3, H, W] or [1, 3, H, W], got {s:?}"))),
    }
}

/// Luma `[H, W]` of an RGB tensor in `[0, 1]`.
pub fn rgb_to_y<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<f64>> {
    let (h, w) = rgb_dims(img)?;
    let plane = h * w;
    let d = img.data();
    Ok(Tensor::from_fn(&[h, w], |p| {
        Y_OFFSET
            + Y_COEFFS[0] * d[p].as_f64()
            + Y_COEFFS[1] * d[plane + p].as_f64()
            + Y_COEFFS[2] * d[2 * plane + p].as_f64()
    }))
}

fn crop2<T: Scalar>(t: &Tensor<T>, border: usize) -> Result<Tensor<T>> {
    let r = t.rank();
    if r < 2 {
        return Err(shape_err("metrics", "need at least two axes"));
    }
    let (h, w) = (t.shape()[r - 2], t.shape()[r - 1]);
    if 2 * border >= h || 2 * border >= w {
        return Err(invalid("metrics", format!("border {border} leaves nothing of {h}x{w}")));
    }
    t.narrow(r - 2, border, h - 2 * border)?.narrow(r - 1, border, w - 2 * border)
}

/// `10·log10(peak² / MSE)` after removing `border_crop` pixels from each
/// side of the last two axes. Identical inputs give `f64::INFINITY`.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64, border_crop: usize) -> Result<f64> {
    a.same_shape(b, "psnr")?;
    let (a, b) = (crop2(a, border_crop)?, crop2(b, border_crop)?);
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    let mse = se / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = (0..k).map(|j| taps[j] * x[y * w + xo + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..k).map(|i| taps[i] * rows[(yo + i) * ow + xo]).sum();
        }
    }
    out
}

/// Mean SSIM of two `[H, W]` planes over every full 11×11 Gaussian window
/// inside the cropped region.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64, border_crop: usize) -> Result<f64> {
    a.same_shape(b, "ssim")?;
    if a.rank() != 2 {
        return Err(shape_err("ssim", format!("expected [H, W], got {:?}", a.shape())));
    }
    let (a, b) = (crop2(a, border_crop)?, crop2(b, border_crop)?);
    let (h, w) = (a.shape()[0], a.shape()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid("ssim", format!("{h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let av = a.to_f64_vec();
    let bv = b.to_f64_vec();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let mu_a = filter_valid(&av, h, w, &taps);
    let mu_b = filter_valid(&bv, h, w, &taps);
    let e_aa = filter_valid(&prod(&av, &av), h, w, &taps);
    let e_bb = filter_valid(&prod(&bv, &bv), h, w, &taps);
    let e_ab = filter_valid(&prod(&av, &bv), h, w, &taps);
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / n as f64)
}

/// PSNR of the luma planes of two 8-bit images.
pub fn psnr_y(a: &ImageU8, b: &ImageU8, border_crop: usize) -> Result<f64> {
    psnr(&rgb_to_y::<f64>(&a.to_tensor())?, &rgb_to_y::<f64>(&b.to_tensor())?, 255.0, border_crop)
}

/// SSIM of the luma planes of two 8-bit images.
pub fn ssim_y(a: &ImageU8, b: &ImageU8, border_crop: usize) -> Result<f64> {
    ssim(&rgb_to_y::<f64>(&a.to_tensor())?, &rgb_to_y::<f64>(&b.to_tensor())?, 255.0, border_crop)
}

// ---------------------------------------------------------------------------
// Bicubic resampling

pub const CUBIC_A: f64 = -0.5;

/// Keys cubic convolution kernel with `a = -0.5`, support `[-2, 2]`.
pub fn cubic(x: f64) -> f64 {
    let a = CUBIC_A;
    let t = x.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Half-sample symmetric extension of an index into `0..n`.
fn mirror(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Source taps and normalized weights for every output position.
///
/// Output sample `o` sits at source coordinate `(o + 0.5) / scale - 0.5`.
/// When shrinking, the kernel is stretched by `1 / scale` (antialiasing).
fn contributions(n_in: usize, n_out: usize) -> Vec<(Vec<usize>, Vec<f64>)> {
    let scale = n_out as f64 / n_in as f64;
    let stretch = if scale < 1.0 { 1.0 / scale } else { 1.0 };
    let support = 2.0 * stretch;
    (0..n_out)
        .map(|o| {
            let center = (o as f64 + 0.5) / scale - 0.5;
            let lo = (center - support).floor() as i64;
            let hi = (center + support).ceil() as i64;
            let mut idx = Vec::new();
            let mut wts = Vec::new();
            for i in lo..=hi {
                let wgt = cubic((center - i as f64) / stretch);
                if wgt != 0.0 {
                    idx.push(mirror(i, n_in));
                    wts.push(wgt);
                }
            }
            let s: f64 = wts.iter().sum();
            (idx, wts.into_iter().map(|v| v / s).collect())
        })
        .collect()
}

/// Resamples one axis. Each output is written as the nearest tap plus a
/// weighted sum of differences to it, so constant signals pass unchanged
/// bit for bit.
fn resize_axis(x: &[f64], outer: usize, n_in: usize, inner: usize, n_out: usize) -> Vec<f64> {
    let plan = contributions(n_in, n_out);
    let mut out = vec![0.0; outer * n_out * inner];
    for o in 0..outer {
        for (j, (idx, wts)) in plan.iter().enumerate() {
            let anchor = idx[wts.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(k, _)| k)];
            for q in 0..inner {
                let at = |i: usize| x[(o * n_in + i) * inner + q];
                let base = at(anchor);
                let delta: f64 = idx.iter().zip(wts).map(|(&i, &wt)| wt * (at(i) - base)).sum();
                out[(o * n_out + j) * inner + q] = base + delta;
            }
        }
    }
    out
}

/// Bicubic resize of the last two axes to `out_h × out_w`.
pub fn resize<T: Scalar>(img: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let r = img.rank();
    if r < 2 {
        return Err(shape_err("resize", "need at least two axes"));
    }
    let (h, w) = (img.shape()[r - 2], img.shape()[r - 1]);
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(invalid("resize", "empty extent"));
    }
    let outer = img.numel() / (h * w);
    let x = img.to_f64_vec();
    let x = if out_h == h { x } else { resize_axis(&x, outer, h, w, out_h) };
    let x = if out_w == w { x } else { resize_axis(&x, outer * out_h, w, 1, out_w) };
    let mut shape = img.shape().to_vec();
    shape[r - 2] = out_h;
    shape[r - 1] = out_w;
    Tensor::new(shape, x.into_iter().map(T::lit).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Down,
    Up,
}

/// Integer-factor bicubic resize of the last two axes. Downscaling needs
/// extents divisible by `scale`.
pub fn bicubic_resize<T: Scalar>(img: &Tensor<T>, scale: usize, dir: Direction) -> Result<Tensor<T>> {
    if scale == 0 {
        return Err(invalid("resize", "scale must be positive"));
    }
    let r = img.rank();
    if r < 2 {
        return Err(shape_err("resize", "need at least two axes"));
    }
    let (h, w) = (img.shape()[r - 2], img.shape()[r - 1]);
    match dir {
        Direction::Up => resize(img, h * scale, w * scale),
        Direction::Down => {
            if h % scale != 0 || w % scale != 0 {
                return Err(invalid("resize", format!("{h}x{w} is not divisible by {scale}")));
            }
            resize(img, h / scale, w / scale)
        }
    }
}
