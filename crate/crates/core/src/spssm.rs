//! Superpixel state space block.
//!
//! `x' = SiLU(conv3x3(x))`, pooled by `s`, clustered into `M` superpixel
//! tokens, mixed by an SSM, scattered back through one-hot masks and used
//! as a sigmoid attention map on the pooled features. The result is
//! upsampled and added to the input.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{invalid, Result};
use crate::params::{join, Scope, WeightTree};
use crate::pass::Ctx;
use crate::ssm::{self, scan_flops, SsmConfig, SsmParams, SsmVars};
use crate::superpixel::{self, Neighborhood, SuperpixelConfig, SuperpixelGrid, SLOTS};
use crate::tensor::Padding;
use crate::{Rng, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Gating {
    /// `sigmoid(tokens) ⊙ x↓`.
    #[default]
    Sigmoid,
    /// `tokens + x↓`, the plain-addition ablation.
    Add,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpSsmConfig {
    /// Pooling factor `s`.
    pub scale: usize,
    /// Superpixel count `M`.
    pub superpixels: usize,
    pub superpixel: SuperpixelConfig,
    pub ssm: SsmConfig,
    /// Depthwise (`groups = C`) transform conv instead of a dense one.
    pub depthwise: bool,
    pub gating: Gating,
    /// Gate the full-resolution transform `x'` with the upsampled attention
    /// instead of gating `x↓` before upsampling.
    pub full_resolution: bool,
}

impl Default for SpSsmConfig {
    fn default() -> Self {
        SpSsmConfig {
            scale: 1,
            superpixels: 64,
            superpixel: SuperpixelConfig::default(),
            ssm: SsmConfig::default(),
            depthwise: true,
            gating: Gating::Sigmoid,
            full_resolution: false,
        }
    }
}

impl SpSsmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 || self.superpixels == 0 {
            return Err(invalid("sp-ssm", "scale and superpixel count must be at least 1"));
        }
        if self.superpixel.iters == 0 || !(self.superpixel.tau > 0.0) {
            return Err(invalid("sp-ssm", "clustering needs iters >= 1 and tau > 0"));
        }
        if self.ssm.d_state == 0 {
            return Err(invalid("sp-ssm", "d_state must be at least 1"));
        }
        Ok(())
    }

    fn groups(&self, channels: usize) -> usize {
        if self.depthwise {
            channels
        } else {
            1
        }
    }
}

/// Adds the block's parameters under `prefix`.
pub fn init<T: Scalar>(tree: &mut WeightTree<T>, prefix: &str, channels: usize, cfg: &SpSsmConfig, rng: &mut Rng) -> Result<()> {
    let cg = channels / cfg.groups(channels);
    tree.insert(join(prefix, "conv.weight"), ssm::trunc_normal(&[channels, cg, 3, 3], cg * 9, rng))?;
    tree.insert(join(prefix, "conv.bias"), Tensor::zeros(&[channels]))?;
    let p = SsmParams::<T>::init(channels, cfg.ssm.d_state, rng);
    for (name, t) in ssm::PARAM_NAMES.iter().zip(p.tensors()) {
        tree.insert(join(prefix, &format!("ssm.{name}")), t.clone())?;
    }
    Ok(())
}

pub fn param_count(channels: usize, cfg: &SpSsmConfig) -> usize {
    let cg = channels / cfg.groups(channels);
    let d = cfg.ssm.d_state;
    channels * cg * 9 + channels + 3 * channels * d + 2 * channels + channels * channels
}

pub(crate) fn ssm_vars<'t, T: Scalar>(scope: &Scope<'_, 't, T>) -> Result<SsmVars<'t, T>> {
    Ok(SsmVars {
        a: scope.get("a")?,
        d: scope.get("d")?,
        proj_b: scope.get("proj_b")?,
        proj_c: scope.get("proj_c")?,
        proj_dt: scope.get("proj_dt.weight")?,
        dt_bias: scope.get("proj_dt.bias")?,
    })
}

/// `[B, C, h, w]` to tokens `[B, h·w, C]`.
pub(crate) fn to_tokens<'t, T: Scalar>(x: &Var<'t, T>) -> Result<Var<'t, T>> {
    let (b, c, h, w) = x.value().dims4("tokens")?;
    x.permute(&[0, 2, 3, 1])?.reshape(&[b, h * w, c])
}

pub(crate) fn from_tokens<'t, T: Scalar>(t: &Var<'t, T>, h: usize, w: usize) -> Result<Var<'t, T>> {
    let (b, c) = (t.shape()[0], t.shape()[2]);
    t.reshape(&[b, h, w, c])?.permute(&[0, 3, 1, 2])
}

fn check_input(x_shape: &[usize], cfg: &SpSsmConfig) -> Result<(usize, usize)> {
    cfg.validate()?;
    let (h, w) = (x_shape[2], x_shape[3]);
    if h % cfg.scale != 0 || w % cfg.scale != 0 {
        return Err(invalid("sp-ssm", format!("{h}x{w} input is not divisible by scale {}", cfg.scale)));
    }
    Ok((h / cfg.scale, w / cfg.scale))
}

/// `x [B, C, H, W] -> [B, C, H, W]`.
pub fn sp_ssm_forward<'t, T: Scalar>(
    x: &Var<'t, T>,
    cfg: &SpSsmConfig,
    scope: &Scope<'_, 't, T>,
    ctx: &mut Ctx,
) -> Result<Var<'t, T>> {
    let (_, c, _, _) = x.value().dims4("sp-ssm")?;
    let (h, w) = check_input(x.shape(), cfg)?;
    let nb = Neighborhood::new(SuperpixelGrid::for_count(h, w, cfg.superpixels)?);
    let s = cfg.scale;

    let xt = x
        .conv2d(&scope.get("conv.weight")?, Some(&scope.get("conv.bias")?), Padding::Same, cfg.groups(c))?
        .silu();
    let down = if s == 1 { xt.clone() } else { xt.avg_pool(s, s)? };
    let tokens = to_tokens(&down)?;
    let clusters = superpixel::sample_var(&tokens, &nb, cfg.superpixel.iters)?;
    let mixed = ssm::ssm_block(&clusters.s, &ssm_vars(&scope.sub("ssm"))?, &cfg.ssm)?;
    let mask = superpixel::gumbel_one_hot(&clusters.assoc, &nb, cfg.superpixel.tau, ctx.pass.sampling, &mut ctx.rng)?;
    let spread = superpixel::scatter_var(&mask, &mixed, &nb)?;

    let up = |v: &Var<'t, T>| if s == 1 { Ok(v.clone()) } else { v.upsample(s) };
    let fused = match (cfg.gating, cfg.full_resolution) {
        (Gating::Sigmoid, false) => up(&from_tokens(&spread.sigmoid().mul(&tokens)?, h, w)?)?,
        (Gating::Sigmoid, true) => up(&from_tokens(&spread.sigmoid(), h, w)?)?.mul(&xt)?,
        (Gating::Add, false) => up(&from_tokens(&spread.add(&tokens)?, h, w)?)?,
        (Gating::Add, true) => up(&from_tokens(&spread, h, w)?)?.add(&xt)?,
    };
    fused.add(x)
}

/// Scan cost of the block against a scan over every pooled pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpSsmFlops {
    pub scan_tokens: usize,
    pub dense_tokens: usize,
    pub scan_flops: u64,
    pub dense_flops: u64,
}

impl SpSsmFlops {
    pub fn ratio(&self) -> f64 {
        self.dense_flops as f64 / self.scan_flops as f64
    }
}

pub fn flops(cfg: &SpSsmConfig, channels: usize, h: usize, w: usize) -> Result<SpSsmFlops> {
    let (hs, ws) = check_input(&[1, channels, h, w], cfg)?;
    let dense = hs * ws;
    let m = cfg.superpixels;
    let d = cfg.ssm.d_state;
    Ok(SpSsmFlops {
        scan_tokens: m,
        dense_tokens: dense,
        scan_flops: scan_flops(m, channels, d).total(),
        dense_flops: scan_flops(dense, channels, d).total(),
    })
}

/// Multiply-accumulates of one forward pass on a `C × H × W` map.
pub fn macs(cfg: &SpSsmConfig, channels: usize, h: usize, w: usize) -> u64 {
    let c = channels as u64;
    let cg = (channels / cfg.groups(channels)) as u64;
    let full = (h * w) as u64;
    let n = full / (cfg.scale * cfg.scale) as u64;
    let slots = SLOTS as u64;
    let dirs = match cfg.ssm.direction {
        ssm::Direction::Forward => 1,
        ssm::Direction::Bidirectional => 2,
    };
    let conv = full * c * cg * 9;
    // distances and centroid sums per iteration, then the scatter
    let cluster = cfg.superpixel.iters as u64 * 2 * n * slots * c + n * slots * c;
    let scan = dirs * scan_flops(cfg.superpixels, channels, cfg.ssm.d_state).total() / 2;
    let gate = n * c;
    conv + cluster + scan + gate
}

#[cfg(test)]
mod tests;
