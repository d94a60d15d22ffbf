//! Unnormalized 2-D discrete Fourier transform over the last two axes.
//!
//! Direct separable evaluation, `O(HW(H+W))` per plane, with twiddles taken
//! from an exact `k mod N` table so large indices do not lose phase accuracy.

use rayon::prelude::*;

use super::Tensor;
use crate::error::{shape_err, Result};
use crate::Scalar;

struct Twiddle<T> {
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> Twiddle<T> {
    fn new(n: usize) -> Self {
        let step = std::f64::consts::TAU / n as f64;
        Twiddle {
            cos: (0..n).map(|k| T::lit((step * k as f64).cos())).collect(),
            sin: (0..n).map(|k| T::lit((step * k as f64).sin())).collect(),
        }
    }
}

/// In-place 1-D transform of `len` complex values spaced `stride` apart.
/// `sign` is -1 for the forward kernel `e^{-i...}`, +1 for its adjoint.
fn dft_line<T: Scalar>(
    re: &mut [T],
    im: &mut [T],
    base: usize,
    stride: usize,
    tw: &Twiddle<T>,
    sign: T,
    scratch: &mut Vec<(T, T)>,
) {
    let n = tw.cos.len();
    scratch.clear();
    for k in 0..n {
        let (mut ar, mut ai) = (T::zero(), T::zero());
        for j in 0..n {
            let idx = (k * j) % n;
            let (c, s) = (tw.cos[idx], sign * tw.sin[idx]);
            let (xr, xi) = (re[base + j * stride], im[base + j * stride]);
            ar += xr * c - xi * s;
            ai += xr * s + xi * c;
        }
        scratch.push((ar, ai));
    }
    for (k, &(ar, ai)) in scratch.iter().enumerate() {
        re[base + k * stride] = ar;
        im[base + k * stride] = ai;
    }
}

fn plane_dims<T: Scalar>(x: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    let r = x.shape().len();
    if r < 2 {
        return Err(shape_err(op, format!("need at least 2 axes, got {:?}", x.shape())));
    }
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let planes = if h * w == 0 { 0 } else { x.numel() / (h * w) };
    Ok((planes, h, w))
}

/// Complex 2-D transform with kernel `e^{sign * 2 pi i (uy/H + vx/W)}`.
pub fn dft2_complex<T: Scalar>(re: &Tensor<T>, im: &Tensor<T>, sign: T) -> Result<(Tensor<T>, Tensor<T>)> {
    re.same_shape(im, "dft2")?;
    let (_, h, w) = plane_dims(re, "dft2")?;
    let (th, tw) = (Twiddle::<T>::new(h), Twiddle::<T>::new(w));
    let mut out_re = re.data().to_vec();
    let mut out_im = im.data().to_vec();
    if h * w > 0 {
        out_re
            .par_chunks_mut(h * w)
            .zip(out_im.par_chunks_mut(h * w))
            .for_each(|(pr, pi)| {
                let mut scratch = Vec::new();
                for y in 0..h {
                    dft_line(pr, pi, y * w, 1, &tw, sign, &mut scratch);
                }
                for x in 0..w {
                    dft_line(pr, pi, x, w, &th, sign, &mut scratch);
                }
            });
    }
    Ok((
        Tensor::new(re.shape().to_vec(), out_re)?,
        Tensor::new(re.shape().to_vec(), out_im)?,
    ))
}

/// Forward transform of a real input: `X[u,v] = sum x[y,x] e^{-2 pi i (uy/H + vx/W)}`.
pub fn dft2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    dft2_complex(x, &Tensor::zeros(x.shape()), -T::one())
}

/// Gradient of a real input given gradients of the real and imaginary outputs.
pub fn dft2_backward<T: Scalar>(g_re: &Tensor<T>, g_im: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(dft2_complex(g_re, g_im, T::one())?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    #[test]
    fn constant_image_has_only_dc() {
        let x = Tensor::<f64>::full(&[1, 1, 4, 6], 0.7);
        let (re, im) = dft2(&x).unwrap();
        assert!((re.data()[0] - 0.7 * 24.0).abs() < 1e-6);
        for k in 1..24 {
            assert!(re.data()[k].abs() < 1e-6 && im.data()[k].abs() < 1e-6);
        }
        assert!(im.data()[0].abs() < 1e-6);
    }

    #[test]
    fn impulse_has_flat_magnitude() {
        let mut x = Tensor::<f64>::zeros(&[1, 1, 5, 7]);
        x.set(&[0, 0, 2, 3], 1.0);
        let (re, im) = dft2(&x).unwrap();
        for (a, b) in re.data().iter().zip(im.data()) {
            assert!(((a * a + b * b).sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn parseval() {
        let mut rng = Rng::new(1);
        let x = Tensor::<f64>::from_fn(&[2, 3, 6, 8], |_| rng.uniform_range(-1.0, 1.0));
        let (re, im) = dft2(&x).unwrap();
        let e: f64 = x.data().iter().map(|v| v * v).sum();
        let f: f64 = re.data().iter().zip(im.data()).map(|(a, b)| a * a + b * b).sum::<f64>() / 48.0;
        assert!((e - f).abs() <= 1e-6 * e);
    }

    #[test]
    fn matches_direct_double_sum() {
        let mut rng = Rng::new(3);
        let (h, w) = (3, 5);
        let x = Tensor::<f64>::from_fn(&[1, 1, h, w], |_| rng.uniform());
        let (re, im) = dft2(&x).unwrap();
        for u in 0..h {
            for v in 0..w {
                let (mut ar, mut ai) = (0.0, 0.0);
                for y in 0..h {
                    for xx in 0..w {
                        let t = std::f64::consts::TAU * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                        ar += x.at(&[0, 0, y, xx]) * t.cos();
                        ai -= x.at(&[0, 0, y, xx]) * t.sin();
                    }
                }
                assert!((re.at(&[0, 0, u, v]) - ar).abs() < 1e-12);
                assert!((im.at(&[0, 0, u, v]) - ai).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_adjoint() {
        // <dft(x), g> == <x, dft^T g> for the real-linear map x -> (re, im).
        let mut rng = Rng::new(8);
        let x = Tensor::<f64>::from_fn(&[1, 2, 4, 3], |_| rng.uniform_range(-1.0, 1.0));
        let gr = Tensor::<f64>::from_fn(&[1, 2, 4, 3], |_| rng.uniform_range(-1.0, 1.0));
        let gi = Tensor::<f64>::from_fn(&[1, 2, 4, 3], |_| rng.uniform_range(-1.0, 1.0));
        let (re, im) = dft2(&x).unwrap();
        let lhs: f64 = re.mul(&gr).unwrap().sum() + im.mul(&gi).unwrap().sum();
        let rhs = x.mul(&dft2_backward(&gr, &gi).unwrap()).unwrap().sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
