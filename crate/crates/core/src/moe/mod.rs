//! Mixture of superpixel state space experts.
//!
//! The entry 1x1 conv splits the input into `x₁` (expert input) and `x₂`
//! (gate). A router maps the spatial mean of `x₂` to one weight vector per
//! sample. Each expert is an SP-SSM at its own pooling scale, gated by
//! `SiLU(x₂)`. Training evaluates every expert; inference runs only the
//! top-k experts of each sample with renormalized weights.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{invalid, shape_err, Result};
use crate::layers::{self, conv_params, init_conv, init_linear, init_norm, linear_params};
use crate::params::{join, Scope, WeightTree};
use crate::pass::{Ctx, Routing};
use crate::spssm::{self, SpSsmConfig};
use crate::{Rng, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgmeConfig {
    /// Experts active per sample at inference.
    pub k: usize,
    /// Pooling factor of each expert; its length is the expert count.
    pub scales: Vec<usize>,
    /// Superpixel count of each expert.
    pub superpixels: Vec<usize>,
    /// Width of the entry projection relative to `C`; `x₁` and `x₂` each get half.
    pub expand: usize,
    /// GatedFFN hidden ratio.
    pub ffn_ratio: usize,
    /// Shared SP-SSM settings; `scale` and `superpixels` come from the lists above.
    pub expert: SpSsmConfig,
}

impl Default for SgmeConfig {
    fn default() -> Self {
        SgmeConfig {
            k: 1,
            scales: vec![1, 2, 4],
            superpixels: vec![64, 64, 64],
            expand: 2,
            ffn_ratio: 2,
            expert: SpSsmConfig::default(),
        }
    }
}

impl SgmeConfig {
    pub fn n(&self) -> usize {
        self.scales.len()
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        let n = self.n();
        if n == 0 || self.superpixels.len() != n {
            return Err(invalid("sgme", format!("{n} scales but {} superpixel counts", self.superpixels.len())));
        }
        if self.k == 0 || self.k > n {
            return Err(invalid("sgme", format!("k = {} outside 1..={n}", self.k)));
        }
        if self.expand == 0 || (self.expand * channels) % 2 != 0 {
            return Err(invalid("sgme", "expand * C must be a positive even width"));
        }
        if self.ffn_ratio == 0 {
            return Err(invalid("sgme", "ffn ratio must be at least 1"));
        }
        for i in 0..n {
            self.expert_config(i).validate()?;
        }
        Ok(())
    }

    /// Width of `x₁` and `x₂`.
    pub fn hidden(&self, channels: usize) -> usize {
        self.expand * channels / 2
    }

    pub fn expert_config(&self, i: usize) -> SpSsmConfig {
        SpSsmConfig {
            scale: self.scales[i],
            superpixels: self.superpixels[i],
            ..self.expert
        }
    }
}

// ---------------------------------------------------------------------------
// GatedFFN

pub fn init_gated_ffn<T: Scalar>(tree: &mut WeightTree<T>, prefix: &str, channels: usize, ratio: usize, rng: &mut Rng) -> Result<()> {
    let h = ratio * channels;
    init_linear(tree, &join(prefix, "proj_in"), 2 * h, channels, rng)?;
    init_conv(tree, &join(prefix, "dw"), h, 1, 3, rng)?;
    init_linear(tree, &join(prefix, "proj_out"), channels, h, rng)
}

pub fn gated_ffn_params(channels: usize, ratio: usize) -> usize {
    let h = ratio * channels;
    linear_params(2 * h, channels) + conv_params(h, 1, 3) + linear_params(channels, h)
}

/// `proj_out(SiLU(gate) ⊙ dw3x3(value))` where `[gate, value] = proj_in(x)`.
pub fn gated_ffn<'t, T: Scalar>(x: &Var<'t, T>, scope: &Scope<'_, 't, T>) -> Result<Var<'t, T>> {
    let hid = layers::pointwise(x, &scope.sub("proj_in"))?;
    let h = hid.shape()[1] / 2;
    let parts = hid.chunk(2, 1)?;
    let value = layers::conv(&parts[1], &scope.sub("dw"), h)?;
    layers::pointwise(&parts[0].silu().mul(&value)?, &scope.sub("proj_out"))
}

// ---------------------------------------------------------------------------
// Router and experts

/// Per-sample routing weights `softmax(W · mean_hw(x₂) + b)`, `[B, n]`.
pub fn route<'t, T: Scalar>(x2: &Var<'t, T>, scope: &Scope<'_, 't, T>) -> Result<Var<'t, T>> {
    let (b, c, h, w) = x2.value().dims4("route")?;
    let pooled = x2.reshape(&[b, c, h * w])?.mean_axis(2)?;
    layers::linear(&pooled, scope)?.softmax(1)
}

/// `SP-SSM(x₁) ⊙ SiLU(x₂)`.
pub fn expert_forward<'t, T: Scalar>(
    x1: &Var<'t, T>,
    x2: &Var<'t, T>,
    cfg: &SpSsmConfig,
    scope: &Scope<'_, 't, T>,
    ctx: &mut Ctx,
) -> Result<Var<'t, T>> {
    if x1.shape() != x2.shape() {
        return Err(shape_err("expert", format!("{:?} vs {:?}", x1.shape(), x2.shape())));
    }
    spssm::sp_ssm_forward(x1, cfg, scope, ctx)?.mul(&x2.silu())
}

/// Indices of the `k` largest weights (ties to the lower index), ascending.
pub fn top_k(weights: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut chosen = order[..k.min(order.len())].to_vec();
    chosen.sort_unstable();
    chosen
}

pub fn init_moe<T: Scalar>(tree: &mut WeightTree<T>, prefix: &str, channels: usize, cfg: &SgmeConfig, rng: &mut Rng) -> Result<()> {
    cfg.validate(channels)?;
    let e = cfg.hidden(channels);
    init_linear(tree, &join(prefix, "entry"), 2 * e, channels, rng)?;
    init_linear(tree, &join(prefix, "router"), cfg.n(), e, rng)?;
    for i in 0..cfg.n() {
        spssm::init(tree, &join(prefix, &format!("experts.{i}")), e, &cfg.expert_config(i), rng)?;
    }
    init_linear(tree, &join(prefix, "exit"), channels, e, rng)
}

pub fn moe_params(channels: usize, cfg: &SgmeConfig) -> usize {
    let e = cfg.hidden(channels);
    let experts: usize = (0..cfg.n()).map(|i| spssm::param_count(e, &cfg.expert_config(i))).sum();
    linear_params(2 * e, channels) + linear_params(cfg.n(), e) + experts + linear_params(channels, e)
}

/// `[B, C, H, W] -> [B, C, H, W]`. Expert executions are counted in `ctx.usage`
/// under the scope's prefix, one per sample and expert run.
pub fn mss_moe_forward<'t, T: Scalar>(
    x: &Var<'t, T>,
    cfg: &SgmeConfig,
    scope: &Scope<'_, 't, T>,
    ctx: &mut Ctx,
) -> Result<Var<'t, T>> {
    let (b, c, _, _) = x.value().dims4("mss-moe")?;
    cfg.validate(c)?;
    let n = cfg.n();
    let parts = layers::pointwise(x, &scope.sub("entry"))?.chunk(2, 1)?;
    let (x1, x2) = (&parts[0], &parts[1]);
    let g = route(x2, &scope.sub("router"))?;
    let layer = scope.prefix().to_string();

    let mixed = match ctx.pass.routing {
        Routing::Dense => {
            let mut acc: Option<Var<'t, T>> = None;
            for i in 0..n {
                let out = expert_forward(x1, x2, &cfg.expert_config(i), &scope.sub(&format!("experts.{i}")), ctx)?;
                for _ in 0..b {
                    ctx.usage.record(&layer, i, n);
                }
                let gi = g.narrow(1, i, 1)?.reshape(&[b, 1, 1, 1])?;
                let term = out.mul(&gi)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => a.add(&term)?,
                });
            }
            acc.expect("at least one expert")
        }
        Routing::TopK => {
            let mut rows = Vec::with_capacity(b);
            for s in 0..b {
                let gs = g.narrow(0, s, 1)?;
                let vals: Vec<f64> = gs.value().data().iter().map(|v| v.as_f64()).collect();
                let chosen = top_k(&vals, cfg.k);
                let picked: Vec<Var<'t, T>> = chosen.iter().map(|&i| gs.narrow(1, i, 1)).collect::<Result<_>>()?;
                let mut total = picked[0].clone();
                for p in &picked[1..] {
                    total = total.add(p)?;
                }
                let (x1s, x2s) = (x1.narrow(0, s, 1)?, x2.narrow(0, s, 1)?);
                let mut acc: Option<Var<'t, T>> = None;
                for (&i, gi) in chosen.iter().zip(&picked) {
                    let out = expert_forward(&x1s, &x2s, &cfg.expert_config(i), &scope.sub(&format!("experts.{i}")), ctx)?;
                    ctx.usage.record(&layer, i, n);
                    let wi = gi.div(&total)?.reshape(&[1, 1, 1, 1])?;
                    let term = out.mul(&wi)?;
                    acc = Some(match acc {
                        None => term,
                        Some(a) => a.add(&term)?,
                    });
                }
                rows.push(acc.expect("k >= 1"));
            }
            let refs: Vec<&Var<'t, T>> = rows.iter().collect();
            Var::concat(&refs, 0)?
        }
    };
    layers::pointwise(&mixed, &scope.sub("exit"))
}

// ---------------------------------------------------------------------------
// SGME

pub fn init_sgme<T: Scalar>(tree: &mut WeightTree<T>, prefix: &str, channels: usize, cfg: &SgmeConfig, rng: &mut Rng) -> Result<()> {
    init_norm(tree, &join(prefix, "norm1"), channels)?;
    init_moe(tree, &join(prefix, "moe"), channels, cfg, rng)?;
    init_norm(tree, &join(prefix, "norm2"), channels)?;
    init_gated_ffn(tree, &join(prefix, "ffn"), channels, cfg.ffn_ratio, rng)
}

pub fn sgme_params(channels: usize, cfg: &SgmeConfig) -> usize {
    4 * channels + moe_params(channels, cfg) + gated_ffn_params(channels, cfg.ffn_ratio)
}

/// `y = x + MoE(LN(x))`, `out = y + FFN(LN(y))`.
pub fn sgme_forward<'t, T: Scalar>(
    x: &Var<'t, T>,
    cfg: &SgmeConfig,
    scope: &Scope<'_, 't, T>,
    ctx: &mut Ctx,
) -> Result<Var<'t, T>> {
    let y = x.add(&mss_moe_forward(&layers::norm(x, &scope.sub("norm1"), 1)?, cfg, &scope.sub("moe"), ctx)?)?;
    y.add(&gated_ffn(&layers::norm(&y, &scope.sub("norm2"), 1)?, &scope.sub("ffn"))?)
}

/// Multiply-accumulates of one SGME on a `C × H × W` map with every expert active.
pub fn sgme_macs(channels: usize, cfg: &SgmeConfig, h: usize, w: usize, active: usize) -> u64 {
    let (c, hw) = (channels as u64, (h * w) as u64);
    let e = cfg.hidden(channels);
    let r = (cfg.ffn_ratio * channels) as u64;
    let entry = hw * c * 2 * e as u64;
    let router = (e * cfg.n()) as u64;
    // the `active` most expensive experts
    let mut costs: Vec<u64> = (0..cfg.n())
        .map(|i| spssm::macs(&cfg.expert_config(i), e, h, w) + hw * e as u64)
        .collect();
    costs.sort_unstable_by(|a, b| b.cmp(a));
    let experts: u64 = costs.iter().take(active).sum();
    let exit = hw * e as u64 * c;
    let ffn = hw * c * 2 * r + hw * r * 9 + hw * r + hw * r * c;
    entry + router + experts + exit + ffn
}
