//! Soft k-means superpixels restricted to the 3×3 neighboring grid cells.
//!
//! Pixels are tokens `x [N, C]` in raster order of an `h × w` map. The map
//! is tiled into a `gh × gw` grid of equal cells; cell `j` seeds superpixel
//! `j`, and each pixel only ever compares against the superpixels of the 9
//! cells around its home cell. Similarities are stored as `[N, 9]` slots;
//! slot `k` is cell offset `(k / 3 - 1, k % 3 - 1)`, so slot order follows
//! superpixel index order and argmax ties resolve to the lowest index.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::{Rng, Scalar, Tensor};

pub const SLOTS: usize = 9;
/// Candidate slot with no superpixel (outside the grid).
pub const ABSENT: u32 = u32::MAX;
const NEG_FILL: f64 = -1e30;
const Z_MIN: f64 = 1e-12;
const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuperpixelConfig {
    /// Clustering iterations `T`.
    pub iters: usize,
    /// Gumbel-softmax temperature.
    pub tau: f64,
}

impl Default for SuperpixelConfig {
    fn default() -> Self {
        SuperpixelConfig { iters: 5, tau: 1.0 }
    }
}

/// How hard masks are drawn from the soft association.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSampling {
    /// Gumbel-max with a straight-through softmax gradient.
    Gumbel,
    /// Plain argmax, no noise.
    Argmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SuperpixelGrid {
    pub h: usize,
    pub w: usize,
    pub gh: usize,
    pub gw: usize,
}

/// Most square factorization `gh × gw = m` with `gh <= gw`.
pub fn grid_shape(m: usize) -> (usize, usize) {
    let m = m.max(1);
    let mut gh = (m as f64).sqrt() as usize;
    while gh > 1 && m % gh != 0 {
        gh -= 1;
    }
    let gh = gh.max(1);
    (gh, m / gh)
}

impl SuperpixelGrid {
    pub fn new(h: usize, w: usize, gh: usize, gw: usize) -> Result<Self> {
        if gh == 0 || gw == 0 || h == 0 || w == 0 || h % gh != 0 || w % gw != 0 {
            return Err(invalid(
                "superpixel grid",
                format!("{h}x{w} map cannot be tiled by a {gh}x{gw} grid"),
            ));
        }
        Ok(SuperpixelGrid { h, w, gh, gw })
    }

    /// Grid of `m` cells over an `h × w` map, preferring square cells.
    pub fn for_count(h: usize, w: usize, m: usize) -> Result<Self> {
        let (sh, sw) = grid_shape(m);
        if m > 0 && h % sh == 0 && w % sw == 0 {
            return SuperpixelGrid::new(h, w, sh, sw);
        }
        let best = (1..=m)
            .filter(|gh| m % gh == 0 && h % gh == 0 && w % (m / gh) == 0)
            .min_by(|&a, &b| {
                let skew = |gh: usize| ((h / gh) as f64 / (w / (m / gh)) as f64).ln().abs();
                skew(a).total_cmp(&skew(b))
            })
            .ok_or_else(|| invalid("superpixel grid", format!("{m} superpixels do not tile a {h}x{w} map")))?;
        SuperpixelGrid::new(h, w, best, m / best)
    }

    pub fn cell_h(&self) -> usize {
        self.h / self.gh
    }

    pub fn cell_w(&self) -> usize {
        self.w / self.gw
    }

    pub fn m(&self) -> usize {
        self.gh * self.gw
    }

    pub fn n(&self) -> usize {
        self.h * self.w
    }

    pub fn home(&self, pixel: usize) -> usize {
        let (y, x) = (pixel / self.w, pixel % self.w);
        (y / self.cell_h()) * self.gw + x / self.cell_w()
    }
}

/// Candidate superpixels of every pixel, `[N × 9]` with [`ABSENT`] holes.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighborhood {
    grid: SuperpixelGrid,
    slots: Rc<[u32]>,
}

impl Neighborhood {
    pub fn new(grid: SuperpixelGrid) -> Self {
        let mut slots = Vec::with_capacity(grid.n() * SLOTS);
        for p in 0..grid.n() {
            let home = grid.home(p);
            let (cy, cx) = ((home / grid.gw) as isize, (home % grid.gw) as isize);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (y, x) = (cy + dy, cx + dx);
                    let inside = y >= 0 && x >= 0 && (y as usize) < grid.gh && (x as usize) < grid.gw;
                    slots.push(if inside { (y as usize * grid.gw + x as usize) as u32 } else { ABSENT });
                }
            }
        }
        Neighborhood {
            grid,
            slots: slots.into(),
        }
    }

    pub fn grid(&self) -> &SuperpixelGrid {
        &self.grid
    }

    pub fn candidates(&self, pixel: usize) -> &[u32] {
        &self.slots[pixel * SLOTS..(pixel + 1) * SLOTS]
    }

    pub fn slots(&self) -> &[u32] {
        &self.slots
    }

    fn slot_tensor<T: Scalar>(&self, present: f64, absent: f64) -> Tensor<T> {
        Tensor::from_fn(&[self.grid.n(), SLOTS], |i| {
            T::lit(if self.slots[i] == ABSENT { absent } else { present })
        })
    }
}

fn token_dims(op: &'static str, shape: &[usize], n: usize) -> Result<(usize, usize)> {
    match *shape {
        [b, nn, c] if nn == n => Ok((b, c)),
        _ => Err(shape_err(op, format!("expected [B, {n}, C], got {shape:?}"))),
    }
}

/// Cell means `[B, M, C]` of pixel tokens `x [B, N, C]`.
pub fn init_var<'t, T: Scalar>(x: &Var<'t, T>, grid: &SuperpixelGrid) -> Result<Var<'t, T>> {
    let (b, c) = token_dims("init_superpixels", x.shape(), grid.n())?;
    let (ch, cw, m) = (grid.cell_h(), grid.cell_w(), grid.m());
    let mut idx = Vec::with_capacity(b * grid.n() * c);
    for bi in 0..b {
        for j in 0..m {
            let (y0, x0) = ((j / grid.gw) * ch, (j % grid.gw) * cw);
            for y in y0..y0 + ch {
                for xx in x0..x0 + cw {
                    let base = (bi * grid.n() + y * grid.w + xx) * c;
                    idx.extend(base..base + c);
                }
            }
        }
    }
    let cells = x.gather(&crate::tensor::index::IndexMap {
        indices: idx,
        shape: vec![b, m, ch * cw, c],
    });
    cells.mean_axis(2)
}

/// Squared feature distance to each candidate superpixel, `[B, N, 9]`; 0 in absent slots.
pub fn neighbor_sq_dist<'t, T: Scalar>(x: &Var<'t, T>, s: &Var<'t, T>, nb: &Neighborhood) -> Result<Var<'t, T>> {
    let n = nb.grid.n();
    let (b, c) = token_dims("similarity", x.shape(), n)?;
    let m = nb.grid.m();
    if s.shape() != [b, m, c] {
        return Err(shape_err("similarity", format!("superpixels {:?}, expected [{b}, {m}, {c}]", s.shape())));
    }
    let slots = Rc::clone(&nb.slots);
    let (xv, sv) = (Rc::clone(&x.value), Rc::clone(&s.value));
    let mut out = Tensor::zeros(&[b, n, SLOTS]);
    {
        let (xd, sd, od) = (xv.data(), sv.data(), out.data_mut());
        for bi in 0..b {
            for i in 0..n {
                let xi = &xd[(bi * n + i) * c..][..c];
                for k in 0..SLOTS {
                    let j = slots[i * SLOTS + k];
                    if j != ABSENT {
                        let sj = &sd[(bi * m + j as usize) * c..][..c];
                        od[(bi * n + i) * SLOTS + k] = xi.iter().zip(sj).map(|(&a, &b)| (a - b) * (a - b)).sum();
                    }
                }
            }
        }
    }
    Ok(x.tape().op(out, &[x, s], move |g, need| {
        let (xd, sd, gd) = (xv.data(), sv.data(), g.data());
        let mut gx = Tensor::zeros(xv.shape());
        let mut gs = Tensor::zeros(sv.shape());
        for bi in 0..b {
            for i in 0..n {
                for k in 0..SLOTS {
                    let j = slots[i * SLOTS + k];
                    if j == ABSENT {
                        continue;
                    }
                    let coef = T::lit(2.0) * gd[(bi * n + i) * SLOTS + k];
                    let (xo, so) = ((bi * n + i) * c, (bi * m + j as usize) * c);
                    for ci in 0..c {
                        let d = coef * (xd[xo + ci] - sd[so + ci]);
                        gx.data_mut()[xo + ci] += d;
                        gs.data_mut()[so + ci] -= d;
                    }
                }
            }
        }
        Ok(vec![need[0].then_some(gx), need[1].then_some(gs)])
    }))
}

/// Similarity-weighted centroids. A superpixel whose column of weights is
/// entirely zero keeps `s_prev`.
pub fn centroid_update<'t, T: Scalar>(
    x: &Var<'t, T>,
    sim: &Var<'t, T>,
    s_prev: &Var<'t, T>,
    nb: &Neighborhood,
) -> Result<Var<'t, T>> {
    let n = nb.grid.n();
    let m = nb.grid.m();
    let (b, c) = token_dims("update_superpixels", x.shape(), n)?;
    if sim.shape() != [b, n, SLOTS] || s_prev.shape() != [b, m, c] {
        return Err(shape_err(
            "update_superpixels",
            format!("sim {:?}, s_prev {:?} for x {:?}", sim.shape(), s_prev.shape(), x.shape()),
        ));
    }
    let slots = Rc::clone(&nb.slots);
    let (xd, wd, pd) = (x.value().data(), sim.value().data(), s_prev.value().data());
    let mut num = vec![T::zero(); b * m * c];
    let mut z = vec![T::zero(); b * m];
    for bi in 0..b {
        for i in 0..n {
            for k in 0..SLOTS {
                let j = slots[i * SLOTS + k];
                if j == ABSENT {
                    continue;
                }
                let wgt = wd[(bi * n + i) * SLOTS + k];
                let jo = bi * m + j as usize;
                z[jo] += wgt;
                for ci in 0..c {
                    num[jo * c + ci] += wgt * xd[(bi * n + i) * c + ci];
                }
            }
        }
    }
    let zmin = T::lit(Z_MIN);
    let mut out = Tensor::zeros(&[b, m, c]);
    for jo in 0..b * m {
        for ci in 0..c {
            out.data_mut()[jo * c + ci] = if z[jo] == T::zero() {
                pd[jo * c + ci]
            } else {
                num[jo * c + ci] / z[jo].max(zmin)
            };
        }
    }
    let (xv, wv) = (Rc::clone(&x.value), Rc::clone(&sim.value));
    let sv = Rc::new(out.clone());
    Ok(x.tape().op(out, &[x, sim, s_prev], move |g, need| {
        let gd = g.data();
        let mut gnum = vec![T::zero(); b * m * c];
        let mut gz = vec![T::zero(); b * m];
        let mut gprev = Tensor::zeros(&[b, m, c]);
        for jo in 0..b * m {
            if z[jo] == T::zero() {
                gprev.data_mut()[jo * c..(jo + 1) * c].copy_from_slice(&gd[jo * c..(jo + 1) * c]);
                continue;
            }
            let zc = z[jo].max(zmin);
            let mut acc = T::zero();
            for ci in 0..c {
                gnum[jo * c + ci] = gd[jo * c + ci] / zc;
                acc += gd[jo * c + ci] * sv.data()[jo * c + ci];
            }
            if z[jo] >= zmin {
                gz[jo] = -acc / zc;
            }
        }
        let (xd, wd) = (xv.data(), wv.data());
        let mut gx = Tensor::zeros(xv.shape());
        let mut gw = Tensor::zeros(wv.shape());
        for bi in 0..b {
            for i in 0..n {
                for k in 0..SLOTS {
                    let j = slots[i * SLOTS + k];
                    if j == ABSENT {
                        continue;
                    }
                    let jo = bi * m + j as usize;
                    let xo = (bi * n + i) * c;
                    let wgt = wd[(bi * n + i) * SLOTS + k];
                    let mut acc = gz[jo];
                    for ci in 0..c {
                        acc += gnum[jo * c + ci] * xd[xo + ci];
                        gx.data_mut()[xo + ci] += wgt * gnum[jo * c + ci];
                    }
                    gw.data_mut()[(bi * n + i) * SLOTS + k] = acc;
                }
            }
        }
        Ok(vec![need[0].then_some(gx), need[1].then_some(gw), need[2].then_some(gprev)])
    }))
}

/// `out[i] = Σ_k weights[i, k] · tokens[candidate(i, k)]`, `[B, N, C]`.
pub fn scatter_var<'t, T: Scalar>(weights: &Var<'t, T>, tokens: &Var<'t, T>, nb: &Neighborhood) -> Result<Var<'t, T>> {
    let n = nb.grid.n();
    let m = nb.grid.m();
    let (b, c) = token_dims("scatter", tokens.shape(), m)?;
    if weights.shape() != [b, n, SLOTS] {
        return Err(shape_err("scatter", format!("weights {:?}, expected [{b}, {n}, {SLOTS}]", weights.shape())));
    }
    let slots = Rc::clone(&nb.slots);
    let (wv, tv) = (Rc::clone(&weights.value), Rc::clone(&tokens.value));
    let mut out = Tensor::zeros(&[b, n, c]);
    {
        let (wd, td, od) = (wv.data(), tv.data(), out.data_mut());
        for bi in 0..b {
            for i in 0..n {
                let o = &mut od[(bi * n + i) * c..][..c];
                for k in 0..SLOTS {
                    let j = slots[i * SLOTS + k];
                    if j == ABSENT {
                        continue;
                    }
                    let wgt = wd[(bi * n + i) * SLOTS + k];
                    let t = &td[(bi * m + j as usize) * c..][..c];
                    for (oc, &tc) in o.iter_mut().zip(t) {
                        *oc += wgt * tc;
                    }
                }
            }
        }
    }
    Ok(weights.tape().op(out, &[weights, tokens], move |g, need| {
        let (wd, td, gd) = (wv.data(), tv.data(), g.data());
        let mut gw = Tensor::zeros(wv.shape());
        let mut gt = Tensor::zeros(tv.shape());
        for bi in 0..b {
            for i in 0..n {
                let gi = &gd[(bi * n + i) * c..][..c];
                for k in 0..SLOTS {
                    let j = slots[i * SLOTS + k];
                    if j == ABSENT {
                        continue;
                    }
                    let to = (bi * m + j as usize) * c;
                    let wgt = wd[(bi * n + i) * SLOTS + k];
                    let mut acc = T::zero();
                    for ci in 0..c {
                        acc += gi[ci] * td[to + ci];
                        gt.data_mut()[to + ci] += wgt * gi[ci];
                    }
                    gw.data_mut()[(bi * n + i) * SLOTS + k] = acc;
                }
            }
        }
        Ok(vec![need[0].then_some(gw), need[1].then_some(gt)])
    }))
}

/// Result of [`sample_var`]; all batched.
pub struct SampleVars<'t, T: Scalar> {
    /// Superpixel features `[B, M, C]`.
    pub s: Var<'t, T>,
    /// Similarities of the last iteration `[B, N, 9]`, zero in absent slots.
    pub sim: Var<'t, T>,
    /// Row-normalized similarities `[B, N, 9]`.
    pub assoc: Var<'t, T>,
}

/// Differentiable clustering of pixel tokens `x [B, N, C]`.
pub fn sample_var<'t, T: Scalar>(x: &Var<'t, T>, nb: &Neighborhood, iters: usize) -> Result<SampleVars<'t, T>> {
    if iters == 0 {
        return Err(invalid("sample", "at least one iteration is required"));
    }
    let tape = x.tape();
    let valid = tape.constant(nb.slot_tensor::<T>(1.0, 0.0));
    let mut s = init_var(x, &nb.grid)?;
    let mut d2 = None;
    let mut sim = None;
    for _ in 0..iters {
        let d = neighbor_sq_dist(x, &s, nb)?;
        let w = d.neg().exp().mul(&valid)?;
        s = centroid_update(x, &w, &s, nb)?;
        d2 = Some(d);
        sim = Some(w);
    }
    let (d2, sim) = (d2.unwrap(), sim.unwrap());
    let fill = tape.constant(nb.slot_tensor::<T>(0.0, NEG_FILL));
    let assoc = d2.neg().add(&fill)?.softmax(2)?;
    Ok(SampleVars { s, sim, assoc })
}

/// First maximal present slot of every row of `[.., 9]` values.
pub fn argmax_slots<T: Scalar>(values: &Tensor<T>, nb: &Neighborhood) -> Vec<usize> {
    let n = nb.grid.n();
    values
        .data()
        .chunks(SLOTS)
        .enumerate()
        .map(|(r, row)| {
            let cand = nb.candidates(r % n);
            let mut best: Option<usize> = None;
            for k in 0..SLOTS {
                if cand[k] != ABSENT && best.map_or(true, |b| row[k] > row[b]) {
                    best = Some(k);
                }
            }
            best.unwrap_or(SLOTS / 2)
        })
        .collect()
}

fn one_hot<T: Scalar>(shape: &[usize], picks: &[usize]) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    for (r, &k) in picks.iter().enumerate() {
        t.data_mut()[r * SLOTS + k] = T::one();
    }
    t
}

/// One-hot mask rows `[B, N, 9]` drawn from `assoc`.
pub fn gumbel_one_hot<'t, T: Scalar>(
    assoc: &Var<'t, T>,
    nb: &Neighborhood,
    tau: f64,
    sampling: MaskSampling,
    rng: &mut Rng,
) -> Result<Var<'t, T>> {
    if !(tau > 0.0) {
        return Err(invalid("gumbel_one_hot", format!("temperature must be positive, got {tau}")));
    }
    match sampling {
        MaskSampling::Argmax => {
            let hard = one_hot(assoc.shape(), &argmax_slots(assoc.value(), nb));
            Var::straight_through(hard, assoc)
        }
        MaskSampling::Gumbel => {
            let noise = Tensor::from_fn(assoc.shape(), |_| T::lit(rng.gumbel()));
            relaxed_one_hot(assoc, &noise, nb, tau)
        }
    }
}

/// Hard one-hot of `softmax((ln(assoc + eps) + noise) / tau)` with its
/// softmax as the straight-through gradient path.
pub(crate) fn relaxed_one_hot<'t, T: Scalar>(
    assoc: &Var<'t, T>,
    noise: &Tensor<T>,
    nb: &Neighborhood,
    tau: f64,
) -> Result<Var<'t, T>> {
    let n = nb.grid.n();
    let noise = Tensor::from_fn(assoc.shape(), |i| {
        let slot = (i / SLOTS) % n * SLOTS + i % SLOTS;
        if nb.slots[slot] == ABSENT {
            T::lit(NEG_FILL)
        } else {
            noise.data()[i]
        }
    });
    let logits = assoc.add_scalar(T::lit(LOG_EPS)).ln().add(&assoc.tape().constant(noise))?;
    let soft = logits.scale(T::lit(1.0 / tau)).softmax(2)?;
    let hard = one_hot(soft.shape(), &argmax_slots(soft.value(), nb));
    Var::straight_through(hard, &soft)
}

/// Single-map decomposition returned by [`sample`].
#[derive(Clone, Debug)]
pub struct Decomposition<T: Scalar> {
    /// `[M, C]`.
    pub s: Tensor<T>,
    /// `[N, 9]`.
    pub sim: Tensor<T>,
    /// `[N, 9]`, rows sum to 1.
    pub assoc: Tensor<T>,
    /// Hard assignment: superpixel index per pixel.
    pub mask: Vec<u32>,
    pub neighborhood: Neighborhood,
}

fn hwc_tokens<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(shape_err("superpixel", format!("expected [h, w, C], got {:?}", x.shape()))),
    }
}

/// Cell means `[M, C]` of `x [h, w, C]`.
pub fn init_superpixels<T: Scalar>(x: &Tensor<T>, grid: &SuperpixelGrid) -> Result<Tensor<T>> {
    let (h, w, c) = hwc_tokens(x)?;
    if (h, w) != (grid.h, grid.w) {
        return Err(shape_err("init_superpixels", format!("{h}x{w} map vs {}x{} grid", grid.h, grid.w)));
    }
    let tape = Tape::no_grad();
    let s = init_var(&tape.constant(x.reshape(&[1, h * w, c])?), grid)?;
    s.value().reshape(&[grid.m(), c])
}

/// `exp(-‖x_i − s_j‖²)` for the candidates of each pixel; absent slots hold 0.
pub fn similarity_step<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>, nb: &Neighborhood) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    let xv = tape.constant(x.reshape(&[1, nb.grid.n(), *x.shape().last().unwrap_or(&0)])?);
    let sv = tape.constant(s.reshape(&[1, nb.grid.m(), xv.shape()[2]])?);
    let valid = tape.constant(nb.slot_tensor::<T>(1.0, 0.0));
    let w = neighbor_sq_dist(&xv, &sv, nb)?.neg().exp().mul(&valid)?;
    w.value().reshape(&[nb.grid.n(), SLOTS])
}

pub fn update_superpixels<T: Scalar>(
    x: &Tensor<T>,
    sim: &Tensor<T>,
    s_prev: &Tensor<T>,
    nb: &Neighborhood,
) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    let c = *x.shape().last().unwrap_or(&0);
    let (n, m) = (nb.grid.n(), nb.grid.m());
    let s = centroid_update(
        &tape.constant(x.reshape(&[1, n, c])?),
        &tape.constant(sim.reshape(&[1, n, SLOTS])?),
        &tape.constant(s_prev.reshape(&[1, m, c])?),
        nb,
    )?;
    s.value().reshape(&[m, c])
}

/// Clusters `x [h, w, C]` into `m` superpixels with `iters` iterations.
pub fn sample<T: Scalar>(x: &Tensor<T>, m: usize, iters: usize) -> Result<Decomposition<T>> {
    let (h, w, c) = hwc_tokens(x)?;
    let nb = Neighborhood::new(SuperpixelGrid::for_count(h, w, m)?);
    let tape = Tape::no_grad();
    let out = sample_var(&tape.constant(x.reshape(&[1, h * w, c])?), &nb, iters)?;
    let assoc = out.assoc.value().reshape(&[h * w, SLOTS])?;
    let mask = argmax_slots(&assoc, &nb)
        .into_iter()
        .enumerate()
        .map(|(i, k)| nb.candidates(i)[k])
        .collect();
    Ok(Decomposition {
        s: out.s.value().reshape(&[nb.grid.m(), c])?,
        sim: out.sim.value().reshape(&[h * w, SLOTS])?,
        assoc,
        mask,
        neighborhood: nb,
    })
}

/// Hard scatter: pixel `i` receives `tokens[mask[i]]`.
pub fn scatter<T: Scalar>(mask: &[u32], tokens: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, c) = match *tokens.shape() {
        [m, c] => (m, c),
        _ => return Err(shape_err("scatter", format!("tokens must be [M, C], got {:?}", tokens.shape()))),
    };
    let mut out = Vec::with_capacity(mask.len() * c);
    for (i, &j) in mask.iter().enumerate() {
        if j as usize >= m {
            return Err(invalid("scatter", format!("pixel {i} points at superpixel {j} of {m}")));
        }
        out.extend_from_slice(&tokens.data()[j as usize * c..][..c]);
    }
    Tensor::new(&[mask.len(), c], out)
}

/// Soft scatter of `[N, 9]` slot weights.
pub fn scatter_soft<T: Scalar>(weights: &Tensor<T>, tokens: &Tensor<T>, nb: &Neighborhood) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    let (n, m) = (nb.grid.n(), nb.grid.m());
    let c = *tokens.shape().last().unwrap_or(&0);
    let out = scatter_var(
        &tape.constant(weights.reshape(&[1, n, SLOTS])?),
        &tape.constant(tokens.reshape(&[1, m, c])?),
        nb,
    )?;
    out.value().reshape(&[n, c])
}

/// `Σ_i min_j ‖x_i − s_j‖²` over each pixel's candidates.
pub fn assignment_energy<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>, nb: &Neighborhood) -> Result<f64> {
    let c = *x.shape().last().unwrap_or(&0);
    let tape = Tape::no_grad();
    let d2 = neighbor_sq_dist(
        &tape.constant(x.reshape(&[1, nb.grid.n(), c])?),
        &tape.constant(s.reshape(&[1, nb.grid.m(), c])?),
        nb,
    )?;
    let neg = d2.value().map(|v| -v);
    Ok(argmax_slots(&neg, nb)
        .iter()
        .enumerate()
        .map(|(i, &k)| d2.value().data()[i * SLOTS + k].as_f64())
        .sum())
}

/// Hard assignment energy after initialization and after each of `iters` updates.
pub fn energy_trace<T: Scalar>(x: &Tensor<T>, m: usize, iters: usize) -> Result<Vec<f64>> {
    let (h, w, c) = hwc_tokens(x)?;
    let nb = Neighborhood::new(SuperpixelGrid::for_count(h, w, m)?);
    let xt = x.reshape(&[h * w, c])?;
    let mut s = init_superpixels(x, &nb.grid)?;
    let mut trace = vec![assignment_energy(&xt, &s, &nb)?];
    for _ in 0..iters {
        let sim = similarity_step(&xt, &s, &nb)?;
        s = update_superpixels(&xt, &sim, &s, &nb)?;
        trace.push(assignment_energy(&xt, &s, &nb)?);
    }
    Ok(trace)
}

pub mod overlay;
