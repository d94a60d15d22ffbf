//! Selective state space layer over token sequences.
//!
//! Per token, `B_t = W_B x_t`, `C_t = W_C x_t` and
//! `dt_t = softplus(W_dt x_t + b_dt)`; each channel then runs a diagonal
//! ZOH-discretized recurrence and reads out `y_t = C_t h_t + D x_t`.

mod scan;

use std::rc::Rc;

use serde::{Deserialize, Serialize};

pub use scan::{
    affine_scan_blelloch, affine_scan_recurrent, discretize, scan_flops, ScanFlops, ScanMode,
};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Activation;
use crate::{Rng, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[default]
    Forward,
    /// Average of a forward pass and a pass over the reversed sequence.
    Bidirectional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsmConfig {
    pub d_state: usize,
    pub mode: ScanMode,
    pub direction: Direction,
}

impl Default for SsmConfig {
    fn default() -> Self {
        SsmConfig {
            d_state: 16,
            mode: ScanMode::Recurrent,
            direction: Direction::Forward,
        }
    }
}

/// Range of the initial step size `softplus(b_dt)`, sampled log-uniformly.
pub const DT_INIT_MIN: f64 = 1e-2;
pub const DT_INIT_MAX: f64 = 1e-1;

/// Parameter names relative to the layer prefix, in canonical order.
pub const PARAM_NAMES: [&str; 6] = ["a", "d", "proj_b", "proj_c", "proj_dt.bias", "proj_dt.weight"];

#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams<T: Scalar> {
    /// Diagonal state matrix `[C, d]`, negative.
    pub a: Tensor<T>,
    /// Skip gains `[C]`.
    pub d: Tensor<T>,
    /// `[d, C]`.
    pub proj_b: Tensor<T>,
    /// `[d, C]`.
    pub proj_c: Tensor<T>,
    /// `[C, C]`.
    pub proj_dt: Tensor<T>,
    /// `[C]`.
    pub dt_bias: Tensor<T>,
}

pub(crate) fn trunc_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let std = 0.02f64.min(1.0 / (fan_in.max(1) as f64).sqrt());
    Tensor::from_fn(shape, |_| T::lit(rng.truncated_normal(std)))
}

/// `softplus^{-1}(y) = ln(expm1(y))`.
pub fn inverse_softplus(y: f64) -> f64 {
    y.exp_m1().ln()
}

impl<T: Scalar> SsmParams<T> {
    /// `A[c, i] = -(i + 1)`, `D = 1`, projections truncated-normal, and
    /// `b_dt` so that the initial step size lies in `[DT_INIT_MIN, DT_INIT_MAX]`.
    pub fn init(channels: usize, d_state: usize, rng: &mut Rng) -> Self {
        let (lo, hi) = (DT_INIT_MIN.ln(), DT_INIT_MAX.ln());
        SsmParams {
            a: Tensor::from_fn(&[channels, d_state], |k| T::lit(-((k % d_state) as f64 + 1.0))),
            d: Tensor::ones(&[channels]),
            proj_b: trunc_normal(&[d_state, channels], channels, rng),
            proj_c: trunc_normal(&[d_state, channels], channels, rng),
            proj_dt: trunc_normal(&[channels, channels], channels, rng),
            dt_bias: Tensor::from_fn(&[channels], |_| {
                T::lit(inverse_softplus(rng.uniform_range(lo, hi).exp()))
            }),
        }
    }

    pub fn channels(&self) -> usize {
        self.d.numel()
    }

    pub fn d_state(&self) -> usize {
        self.a.shape().get(1).copied().unwrap_or(0)
    }

    /// Tensors paired with [`PARAM_NAMES`].
    pub fn tensors(&self) -> [&Tensor<T>; 6] {
        [&self.a, &self.d, &self.proj_b, &self.proj_c, &self.dt_bias, &self.proj_dt]
    }

    pub fn from_tensors(mut get: impl FnMut(&str) -> Result<Tensor<T>>) -> Result<Self> {
        Ok(SsmParams {
            a: get("a")?,
            d: get("d")?,
            proj_b: get("proj_b")?,
            proj_c: get("proj_c")?,
            dt_bias: get("proj_dt.bias")?,
            proj_dt: get("proj_dt.weight")?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn vars<'t>(&self, tape: &'t Tape<T>) -> SsmVars<'t, T> {
        SsmVars {
            a: tape.constant(self.a.clone()),
            d: tape.constant(self.d.clone()),
            proj_b: tape.constant(self.proj_b.clone()),
            proj_c: tape.constant(self.proj_c.clone()),
            proj_dt: tape.constant(self.proj_dt.clone()),
            dt_bias: tape.constant(self.dt_bias.clone()),
        }
    }
}

/// The layer's parameters bound to a tape.
#[derive(Clone)]
pub struct SsmVars<'t, T: Scalar> {
    pub a: Var<'t, T>,
    pub d: Var<'t, T>,
    pub proj_b: Var<'t, T>,
    pub proj_c: Var<'t, T>,
    pub proj_dt: Var<'t, T>,
    pub dt_bias: Var<'t, T>,
}

/// Fused differentiable scan: `x, dt [B, L, C]`, `a [C, d]`, `b, c [B, L, d]`, `d [C]`.
pub fn selective_scan<'t, T: Scalar>(
    x: &Var<'t, T>,
    dt: &Var<'t, T>,
    a: &Var<'t, T>,
    b: &Var<'t, T>,
    c: &Var<'t, T>,
    d: &Var<'t, T>,
    mode: ScanMode,
) -> Result<Var<'t, T>> {
    let (y, cache) = scan::selective_scan_forward(x.value(), dt.value(), a.value(), b.value(), c.value(), d.value(), mode)?;
    let saved: [Rc<Tensor<T>>; 6] = [x, dt, a, b, c, d].map(|v| Rc::clone(&v.value));
    Ok(x.tape().op(y, &[x, dt, a, b, c, d], move |g, need| {
        let gr = scan::selective_scan_backward(&cache, &saved[0], &saved[1], &saved[2], &saved[3], &saved[4], &saved[5], g, mode)?;
        let all = [gr.x, gr.dt, gr.a, gr.b, gr.c, gr.d];
        Ok(all.into_iter().zip(need).map(|(t, &n)| n.then_some(t)).collect())
    }))
}

fn reverse_time<'t, T: Scalar>(x: &Var<'t, T>) -> Var<'t, T> {
    let s = x.shape();
    let (b, l, c) = (s[0], s[1], s[2]);
    let mut idx = Vec::with_capacity(b * l * c);
    for bi in 0..b {
        for t in 0..l {
            let src = (bi * l + (l - 1 - t)) * c;
            idx.extend(src..src + c);
        }
    }
    x.gather(&crate::tensor::index::IndexMap {
        indices: idx,
        shape: s.to_vec(),
    })
}

fn scan_once<'t, T: Scalar>(x: &Var<'t, T>, p: &SsmVars<'t, T>, mode: ScanMode) -> Result<Var<'t, T>> {
    let b = x.linear(&p.proj_b, None)?;
    let c = x.linear(&p.proj_c, None)?;
    let dt = x.linear(&p.proj_dt, Some(&p.dt_bias))?.act(Activation::Softplus);
    selective_scan(x, &dt, &p.a, &b, &c, &p.d, mode)
}

/// SSM over token sequences `x [B, L, C]` (or `[L, C]`).
pub fn ssm_block<'t, T: Scalar>(x: &Var<'t, T>, p: &SsmVars<'t, T>, cfg: &SsmConfig) -> Result<Var<'t, T>> {
    let unbatched = x.shape().len() == 2;
    let xb = match x.shape() {
        &[l, c] => x.reshape(&[1, l, c])?,
        &[_, _, _] => x.clone(),
        s => return Err(shape_err("ssm_block", format!("tokens must be [L, C] or [B, L, C], got {s:?}"))),
    };
    let mut y = scan_once(&xb, p, cfg.mode)?;
    if cfg.direction == Direction::Bidirectional {
        let back = reverse_time(&scan_once(&reverse_time(&xb), p, cfg.mode)?);
        y = y.add(&back)?.scale(T::lit(0.5));
    }
    if unbatched {
        y.reshape(x.shape())
    } else {
        Ok(y)
    }
}

fn run_plain<T: Scalar>(params: &SsmParams<T>, x: &Tensor<T>, cfg: SsmConfig) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    let xv = tape.constant(x.clone());
    let y = ssm_block(&xv, &params.vars(&tape), &cfg)?;
    Ok(y.value().clone())
}

/// Reference left-to-right evaluation of the layer on `x [L, C]`.
pub fn scan_recurrent<T: Scalar>(params: &SsmParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    run_plain(params, x, SsmConfig { d_state: params.d_state(), mode: ScanMode::Recurrent, direction: Direction::Forward })
}

/// Same contract as [`scan_recurrent`], evaluated as a parallel prefix scan.
pub fn scan_parallel<T: Scalar>(params: &SsmParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    run_plain(params, x, SsmConfig { d_state: params.d_state(), mode: ScanMode::Parallel, direction: Direction::Forward })
}
