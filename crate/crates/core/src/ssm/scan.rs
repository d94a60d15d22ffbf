//! Zero-order-hold discretization and the two scan engines.
//!
//! Layout: a batch of `B` sequences of length `L`, `C` channels, state size
//! `d`. Per-token tensors are `[B, L, C]` (`x`, `dt`) or `[B, L, d]` (`b`,
//! `c`); the recurrence runs over `B*C*d` independent lanes
//! `h_t = abar_t * h_{t-1} + bbar_t * x_t`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScanMode {
    /// Strict left-to-right loop; the reference.
    #[default]
    Recurrent,
    /// Work-efficient up-sweep/down-sweep over affine maps, lanes in parallel.
    Parallel,
}

const SMALL_DA: f64 = 1e-8;

/// `(abar, f)` with `bbar = f * B`: `abar = exp(dt a)`, `f = expm1(dt a) / a`.
#[inline]
fn zoh<T: Scalar>(dt: T, a: T) -> (T, T) {
    let z = dt * a;
    let f = if z.abs().as_f64() < SMALL_DA { dt } else { z.exp_m1() / a };
    (z.exp(), f)
}

/// `(z e^z - expm1 z) / z^2`, so that `df/da = dt^2 * phi(dt a)`.
#[inline]
fn phi<T: Scalar>(z: T) -> T {
    if z.abs().as_f64() < 1e-3 {
        T::lit(0.5) + z * (T::lit(1.0 / 3.0) + z * (T::lit(0.125) + z * T::lit(1.0 / 30.0)))
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// Per-channel diagonal discretization: `dt [L, C]`, `a [C, d]`, `b [L, d]`
/// to `(abar, bbar)`, both `[L, C, d]`.
pub fn discretize<T: Scalar>(dt: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (l, c) = match dt.shape() {
        &[l, c] => (l, c),
        s => return Err(shape_err("discretize", format!("dt must be [L, C], got {s:?}"))),
    };
    let d = match (a.shape(), b.shape()) {
        (&[ca, d], &[lb, db]) if ca == c && lb == l && db == d => d,
        (sa, sb) => return Err(shape_err("discretize", format!("a {sa:?}, b {sb:?} for dt [{l}, {c}]"))),
    };
    if dt.data().iter().any(|&v| !(v > T::zero())) {
        return Err(invalid("discretize", "dt must be strictly positive"));
    }
    let mut abar = Vec::with_capacity(l * c * d);
    let mut bbar = Vec::with_capacity(l * c * d);
    for t in 0..l {
        for ch in 0..c {
            let step = dt.data()[t * c + ch];
            for i in 0..d {
                let (ab, f) = zoh(step, a.data()[ch * d + i]);
                abar.push(ab);
                bbar.push(f * b.data()[t * d + i]);
            }
        }
    }
    Ok((Tensor::new(vec![l, c, d], abar)?, Tensor::new(vec![l, c, d], bbar)?))
}

/// Inclusive scan of `h_t = a_t h_{t-1} + u_t` over one lane, `h_{-1} = 0`.
pub fn affine_scan_recurrent<T: Scalar>(a: &[T], u: &[T], out: &mut [T]) {
    let mut h = T::zero();
    for t in 0..a.len() {
        h = a[t] * h + u[t];
        out[t] = h;
    }
}

/// `then . first` for affine maps `h -> a h + b`.
#[inline]
fn combine<T: Scalar>(first: (T, T), then: (T, T)) -> (T, T) {
    (then.0 * first.0, then.0 * first.1 + then.1)
}

/// Blelloch scan over the affine monoid, padded to a power of two with the
/// identity `(1, 0)`. `work` is reused scratch.
pub fn affine_scan_blelloch<T: Scalar>(a: &[T], u: &[T], out: &mut [T], work: &mut Vec<(T, T)>) {
    let len = a.len();
    if len == 0 {
        return;
    }
    let n = len.next_power_of_two();
    work.clear();
    work.extend(a.iter().zip(u).map(|(&x, &y)| (x, y)));
    work.resize(n, (T::one(), T::zero()));
    let mut stride = 1;
    while stride < n {
        let mut k = 0;
        while k < n {
            let (l, r) = (k + stride - 1, k + 2 * stride - 1);
            work[r] = combine(work[l], work[r]);
            k += 2 * stride;
        }
        stride *= 2;
    }
    work[n - 1] = (T::one(), T::zero());
    stride = n / 2;
    while stride >= 1 {
        let mut k = 0;
        while k < n {
            let (l, r) = (k + stride - 1, k + 2 * stride - 1);
            let left = work[l];
            work[l] = work[r];
            work[r] = combine(work[r], left);
            k += 2 * stride;
        }
        stride /= 2;
    }
    // work[t] is the exclusive prefix applied to h = 0, i.e. h_{t-1} = work[t].1.
    for t in 0..len {
        out[t] = a[t] * work[t].1 + u[t];
    }
}

/// Runs the lane recurrences. `a`, `u` are `[B, L, lanes]`; returns `h` in the same layout.
pub(crate) fn scan_lanes<T: Scalar>(a: &[T], u: &[T], batch: usize, len: usize, lanes: usize, mode: ScanMode) -> Vec<T> {
    let mut h = vec![T::zero(); a.len()];
    match mode {
        ScanMode::Recurrent => {
            for bi in 0..batch {
                let base = bi * len * lanes;
                let mut state = vec![T::zero(); lanes];
                for t in 0..len {
                    let off = base + t * lanes;
                    for k in 0..lanes {
                        state[k] = a[off + k] * state[k] + u[off + k];
                        h[off + k] = state[k];
                    }
                }
            }
        }
        ScanMode::Parallel => {
            let results: Vec<Vec<T>> = (0..batch * lanes)
                .into_par_iter()
                .map_init(Vec::new, |work, q| {
                    let (bi, k) = (q / lanes, q % lanes);
                    let base = bi * len * lanes + k;
                    let la: Vec<T> = (0..len).map(|t| a[base + t * lanes]).collect();
                    let lu: Vec<T> = (0..len).map(|t| u[base + t * lanes]).collect();
                    let mut out = vec![T::zero(); len];
                    affine_scan_blelloch(&la, &lu, &mut out, work);
                    out
                })
                .collect();
            for (q, lane) in results.into_iter().enumerate() {
                let (bi, k) = (q / lanes, q % lanes);
                let base = bi * len * lanes + k;
                for (t, v) in lane.into_iter().enumerate() {
                    h[base + t * lanes] = v;
                }
            }
        }
    }
    h
}

/// Shapes of one selective-scan call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ScanDims {
    pub b: usize,
    pub l: usize,
    pub c: usize,
    pub d: usize,
}

pub(crate) fn scan_dims<T: Scalar>(
    x: &Tensor<T>,
    dt: &Tensor<T>,
    a: &Tensor<T>,
    bm: &Tensor<T>,
    cm: &Tensor<T>,
    dskip: &Tensor<T>,
) -> Result<ScanDims> {
    let (b, l, c) = match x.shape() {
        &[b, l, c] => (b, l, c),
        s => return Err(shape_err("selective_scan", format!("x must be [B, L, C], got {s:?}"))),
    };
    let d = match a.shape() {
        &[ca, d] if ca == c => d,
        s => return Err(shape_err("selective_scan", format!("A must be [{c}, d], got {s:?}"))),
    };
    if dt.shape() != x.shape() {
        return Err(shape_err("selective_scan", format!("dt {:?} vs x {:?}", dt.shape(), x.shape())));
    }
    for (name, m) in [("B", bm), ("C", cm)] {
        if m.shape() != [b, l, d] {
            return Err(shape_err(
                "selective_scan",
                format!("{name} must be [{b}, {l}, {d}], got {:?}", m.shape()),
            ));
        }
    }
    if dskip.shape() != [c] {
        return Err(shape_err("selective_scan", format!("D must be [{c}], got {:?}", dskip.shape())));
    }
    if l == 0 {
        return Err(invalid("selective_scan", "sequence length must be >= 1"));
    }
    Ok(ScanDims { b, l, c, d })
}

/// Saved state of a forward selective scan.
pub(crate) struct ScanCache<T> {
    pub dims: ScanDims,
    pub abar: Vec<T>,
    pub f: Vec<T>,
    pub h: Vec<T>,
}

/// `y = C_t h_t + D x_t` with `h_t = abar_t h_{t-1} + f_t B_t x_t` per channel.
pub(crate) fn selective_scan_forward<T: Scalar>(
    x: &Tensor<T>,
    dt: &Tensor<T>,
    a: &Tensor<T>,
    bm: &Tensor<T>,
    cm: &Tensor<T>,
    dskip: &Tensor<T>,
    mode: ScanMode,
) -> Result<(Tensor<T>, ScanCache<T>)> {
    let dims = scan_dims(x, dt, a, bm, cm, dskip)?;
    let ScanDims { b, l, c, d } = dims;
    if dt.data().iter().any(|&v| !(v > T::zero())) {
        return Err(invalid("selective_scan", "dt must be strictly positive"));
    }
    let lanes = c * d;
    let n = b * l * lanes;
    let mut abar = Vec::with_capacity(n);
    let mut f = Vec::with_capacity(n);
    let mut u = Vec::with_capacity(n);
    let (xd, dtd, ad, bd) = (x.data(), dt.data(), a.data(), bm.data());
    for bt in 0..b * l {
        for ch in 0..c {
            let (xv, step) = (xd[bt * c + ch], dtd[bt * c + ch]);
            for i in 0..d {
                let (ab, fv) = zoh(step, ad[ch * d + i]);
                abar.push(ab);
                f.push(fv);
                u.push(fv * bd[bt * d + i] * xv);
            }
        }
    }
    let h = scan_lanes(&abar, &u, b, l, lanes, mode);
    let cd = cm.data();
    let mut y = Vec::with_capacity(b * l * c);
    for bt in 0..b * l {
        let crow = &cd[bt * d..][..d];
        for ch in 0..c {
            let hrow = &h[(bt * c + ch) * d..][..d];
            let mut acc = T::zero();
            for i in 0..d {
                acc += crow[i] * hrow[i];
            }
            y.push(acc + dskip.data()[ch] * xd[bt * c + ch]);
        }
    }
    Ok((Tensor::new(vec![b, l, c], y)?, ScanCache { dims, abar, f, h }))
}

pub(crate) struct ScanGrads<T> {
    pub x: Tensor<T>,
    pub dt: Tensor<T>,
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub c: Tensor<T>,
    pub d: Tensor<T>,
}

/// Reverse-mode rule. The adjoint `lambda_t = dL/dh_t` obeys
/// `lambda_t = C_t gy_t + abar_{t+1} lambda_{t+1}`, which is the same affine
/// recurrence run backwards, so it reuses the forward engine.
#[allow(clippy::too_many_arguments)]
pub(crate) fn selective_scan_backward<T: Scalar>(
    cache: &ScanCache<T>,
    x: &Tensor<T>,
    dt: &Tensor<T>,
    a: &Tensor<T>,
    bm: &Tensor<T>,
    cm: &Tensor<T>,
    dskip: &Tensor<T>,
    gy: &Tensor<T>,
    mode: ScanMode,
) -> Result<ScanGrads<T>> {
    let ScanDims { b, l, c, d } = cache.dims;
    let lanes = c * d;
    let (xd, dtd, ad, bd, cd, gd) = (x.data(), dt.data(), a.data(), bm.data(), cm.data(), gy.data());

    // Reversed-time inputs: a'_s = abar_{t+1}, u'_s = C_t gy_t for t = L-1-s.
    let mut ra = vec![T::zero(); b * l * lanes];
    let mut ru = vec![T::zero(); b * l * lanes];
    for bi in 0..b {
        for s in 0..l {
            let t = l - 1 - s;
            let dst = (bi * l + s) * lanes;
            for ch in 0..c {
                let g = gd[(bi * l + t) * c + ch];
                for i in 0..d {
                    let k = ch * d + i;
                    ra[dst + k] = if t + 1 < l {
                        cache.abar[(bi * l + t + 1) * lanes + k]
                    } else {
                        T::zero()
                    };
                    ru[dst + k] = g * cd[(bi * l + t) * d + i];
                }
            }
        }
    }
    let rl = scan_lanes(&ra, &ru, b, l, lanes, mode);

    let mut gx = vec![T::zero(); b * l * c];
    let mut gdt = vec![T::zero(); b * l * c];
    let mut ga = vec![T::zero(); c * d];
    let mut gb = vec![T::zero(); b * l * d];
    let mut gc = vec![T::zero(); b * l * d];
    let mut gdd = vec![T::zero(); c];
    for bi in 0..b {
        for t in 0..l {
            let bt = bi * l + t;
            let lam_base = (bi * l + (l - 1 - t)) * lanes;
            for ch in 0..c {
                let xi = bt * c + ch;
                let (xv, step, g) = (xd[xi], dtd[xi], gd[xi]);
                gdd[ch] += g * xv;
                let mut gxv = g * dskip.data()[ch];
                let mut gdtv = T::zero();
                for i in 0..d {
                    let k = ch * d + i;
                    let li = bt * lanes + k;
                    let lam = rl[lam_base + k];
                    let h = cache.h[li];
                    gc[bt * d + i] += g * h;
                    let hprev = if t > 0 { cache.h[li - lanes] } else { T::zero() };
                    let (abar, f) = (cache.abar[li], cache.f[li]);
                    let bv = bd[bt * d + i];
                    let av = ad[k];
                    // u = f * B * x
                    gxv += lam * f * bv;
                    let g_f = lam * bv * xv;
                    gb[bt * d + i] += lam * f * xv;
                    let g_abar = lam * hprev;
                    let z = step * av;
                    // abar = exp(z); f = expm1(z)/a
                    gdtv += g_abar * abar * av + g_f * z.exp();
                    ga[k] += g_abar * abar * step + g_f * step * step * phi(z);
                }
                gx[xi] = gxv;
                gdt[xi] = gdtv;
            }
        }
    }
    Ok(ScanGrads {
        x: Tensor::new(vec![b, l, c], gx)?,
        dt: Tensor::new(vec![b, l, c], gdt)?,
        a: Tensor::new(vec![c, d], ga)?,
        b: Tensor::new(vec![b, l, d], gb)?,
        c: Tensor::new(vec![b, l, d], gc)?,
        d: Tensor::new(vec![c], gdd)?,
    })
}

/// Exact operation counts of one scan call, linear in `L` with no constant term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ScanFlops {
    /// Input projections producing `B`, `C` and `dt`.
    pub projections: u64,
    pub discretize: u64,
    pub recurrence: u64,
    pub readout: u64,
}

impl ScanFlops {
    pub fn total(&self) -> u64 {
        self.projections + self.discretize + self.recurrence + self.readout
    }
}

/// Operation counts for a recurrent scan of `len` tokens.
///
/// Projections: two `C -> d` maps and one `C -> C` map plus bias and
/// softplus, at 2 flops per multiply-add. Discretization: `exp`, `expm1`,
/// division and two products per lane element, counted as 5. Recurrence:
/// one multiply-add per lane element. Readout: `d` multiply-adds plus the
/// skip term per channel.
pub fn scan_flops(len: usize, channels: usize, d_state: usize) -> ScanFlops {
    let (l, c, d) = (len as u64, channels as u64, d_state as u64);
    ScanFlops {
        projections: l * (2 * 2 * c * d + 2 * c * c + 2 * c),
        discretize: l * c * d * 5,
        recurrence: l * c * d * 2,
        readout: l * c * (2 * d + 2),
    }
}
