//! Direct 2-D convolution, cross-correlation convention (the kernel is not
//! flipped): `y[b,o,i,j] = bias[o] + sum_{c,u,v} w[o,c,u,v] * x[b, g*Cg + c, i+u-ph, j+v-pw]`.
//!
//! Out-of-range taps read zero. Every output plane is produced by one task with
//! a fixed accumulation order, so the rayon path is bit-identical to a serial run.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{shape_err, Result};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero fill of `k/2` on each side; odd kernels keep `H x W`.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub groups: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn cin_g(&self) -> usize {
        self.c / self.groups
    }

    pub fn cout_g(&self) -> usize {
        self.o / self.groups
    }

    /// Output rows/cols touched by tap `(u, v)` and the matching input offset.
    #[inline]
    fn tap_range(&self, u: usize, v: usize) -> (usize, usize, usize, usize) {
        // input row = out row + u - ph
        let y0 = self.ph.saturating_sub(u);
        let y1 = (self.h + self.ph).saturating_sub(u).min(self.oh);
        let x0 = self.pw.saturating_sub(v);
        let x1 = (self.w + self.pw).saturating_sub(v).min(self.ow);
        (y0, y1.max(y0), x0, x1.max(x0))
    }
}

pub(crate) fn conv_geom<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: Padding,
    groups: usize,
) -> Result<ConvGeom> {
    let (b, c, h, wd) = x.dims4("conv2d")?;
    let [o, cg, kh, kw] = w.shape()[..] else {
        return Err(shape_err("conv2d", format!("weight must be [O,C/groups,kh,kw], got {:?}", w.shape())));
    };
    if groups == 0 || c % groups != 0 || o % groups != 0 {
        return Err(shape_err(
            "conv2d",
            format!("channels in={c} out={o} not divisible by groups={groups}"),
        ));
    }
    if cg != c / groups {
        return Err(shape_err(
            "conv2d",
            format!("weight axis 1 is {cg}, input channels per group is {}", c / groups),
        ));
    }
    if let Some(bias) = bias {
        if bias.shape() != [o] {
            return Err(shape_err("conv2d", format!("bias must be [{o}], got {:?}", bias.shape())));
        }
    }
    let (ph, pw, oh, ow) = match padding {
        Padding::Same => {
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(shape_err("conv2d", format!("same padding needs odd kernel, got {kh}x{kw}")));
            }
            (kh / 2, kw / 2, h, wd)
        }
        Padding::Valid => {
            if kh > h || kw > wd {
                return Err(shape_err("conv2d", format!("kernel {kh}x{kw} larger than input {h}x{wd}")));
            }
            (0, 0, h - kh + 1, wd - kw + 1)
        }
    };
    Ok(ConvGeom {
        b,
        c,
        h,
        w: wd,
        o,
        kh,
        kw,
        groups,
        ph,
        pw,
        oh,
        ow,
    })
}

pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: Padding,
    groups: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom(x, w, bias, padding, groups)?;
    let plane = g.oh * g.ow;
    let mut out = vec![T::zero(); g.b * g.o * plane];
    let xd = x.data();
    let wdat = w.data();
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    out.par_chunks_mut(plane).enumerate().for_each(|(bo, dst)| {
        let (bi, oc) = (bo / g.o, bo % g.o);
        let init = bias.map_or(T::zero(), |b| b.data()[oc]);
        dst.iter_mut().for_each(|v| *v = init);
        let grp = oc / cout_g;
        for ci in 0..cin_g {
            let cin = grp * cin_g + ci;
            let src = &xd[(bi * g.c + cin) * g.h * g.w..][..g.h * g.w];
            for u in 0..g.kh {
                for v in 0..g.kw {
                    let wv = wdat[((oc * cin_g + ci) * g.kh + u) * g.kw + v];
                    if wv == T::zero() {
                        continue;
                    }
                    let (y0, y1, x0, x1) = g.tap_range(u, v);
                    for y in y0..y1 {
                        let sy = y + u - g.ph;
                        let srow = &src[sy * g.w + x0 + v - g.pw..][..x1 - x0];
                        let drow = &mut dst[y * g.ow + x0..][..x1 - x0];
                        for (d, &s) in drow.iter_mut().zip(srow) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![g.b, g.o, g.oh, g.ow], out)
}

pub struct ConvGrads<T> {
    pub x: Option<Tensor<T>>,
    pub w: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    gy: &Tensor<T>,
    padding: Padding,
    groups: usize,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let g = conv_geom(x, w, None, padding, groups)?;
    if gy.shape() != [g.b, g.o, g.oh, g.ow] {
        return Err(shape_err("conv2d_backward", format!("grad shape {:?}", gy.shape())));
    }
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let gyd = gy.data();
    let xd = x.data();
    let wdat = w.data();
    let plane_out = g.oh * g.ow;
    let plane_in = g.h * g.w;

    let gx = need[0].then(|| {
        let mut gx = vec![T::zero(); g.b * g.c * plane_in];
        gx.par_chunks_mut(plane_in).enumerate().for_each(|(bc, dst)| {
            let (bi, cin) = (bc / g.c, bc % g.c);
            let grp = cin / cin_g;
            let ci = cin % cin_g;
            for oo in 0..cout_g {
                let oc = grp * cout_g + oo;
                let src = &gyd[(bi * g.o + oc) * plane_out..][..plane_out];
                for u in 0..g.kh {
                    for v in 0..g.kw {
                        let wv = wdat[((oc * cin_g + ci) * g.kh + u) * g.kw + v];
                        if wv == T::zero() {
                            continue;
                        }
                        let (y0, y1, x0, x1) = g.tap_range(u, v);
                        for y in y0..y1 {
                            let sy = y + u - g.ph;
                            let grow = &src[y * g.ow + x0..][..x1 - x0];
                            let drow = &mut dst[sy * g.w + x0 + v - g.pw..][..x1 - x0];
                            for (d, &s) in drow.iter_mut().zip(grow) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        });
        Tensor::new(x.shape().to_vec(), gx)
    });

    let gw = need[1].then(|| {
        let ksz = cin_g * g.kh * g.kw;
        let mut gw = vec![T::zero(); g.o * ksz];
        gw.par_chunks_mut(ksz).enumerate().for_each(|(oc, dst)| {
            let grp = oc / cout_g;
            for ci in 0..cin_g {
                let cin = grp * cin_g + ci;
                for u in 0..g.kh {
                    for v in 0..g.kw {
                        let (y0, y1, x0, x1) = g.tap_range(u, v);
                        let mut acc = T::zero();
                        for bi in 0..g.b {
                            let gsrc = &gyd[(bi * g.o + oc) * plane_out..][..plane_out];
                            let xsrc = &xd[(bi * g.c + cin) * plane_in..][..plane_in];
                            for y in y0..y1 {
                                let sy = y + u - g.ph;
                                let grow = &gsrc[y * g.ow + x0..][..x1 - x0];
                                let xrow = &xsrc[sy * g.w + x0 + v - g.pw..][..x1 - x0];
                                for (&a, &b) in grow.iter().zip(xrow) {
                                    acc += a * b;
                                }
                            }
                        }
                        dst[(ci * g.kh + u) * g.kw + v] = acc;
                    }
                }
            }
        });
        Tensor::new(w.shape().to_vec(), gw)
    });

    let gb = (has_bias && need[2]).then(|| {
        let mut gb = vec![T::zero(); g.o];
        for bi in 0..g.b {
            for (oc, acc) in gb.iter_mut().enumerate() {
                for &v in &gyd[(bi * g.o + oc) * plane_out..][..plane_out] {
                    *acc += v;
                }
            }
        }
        Tensor::new(vec![g.o], gb)
    });

    Ok(ConvGrads {
        x: gx.transpose()?,
        w: gw.transpose()?,
        bias: gb.transpose()?,
    })
}

/// Multiply-accumulate count of one convolution.
pub fn conv_macs(h_out: usize, w_out: usize, c_in: usize, c_out: usize, k: usize, groups: usize) -> u64 {
    (h_out * w_out) as u64 * (c_in / groups) as u64 * c_out as u64 * (k * k) as u64
}
