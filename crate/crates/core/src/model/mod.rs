//! Full super-resolution network.
//!
//! ```text
//! lr -> reflect pad -> conv3x3 -> LoE x n_loe -> conv3x3 -> conv3x3 (3r² ch)
//!    -> pixel shuffle(r) -> crop
//! LoE(x) = x + γ · conv3x3(x + β · Pairs(x)),  Pairs = (SGME -> LSME) x m_pairs
//! ```

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::blocks::{self, LsmeConfig};
use crate::error::{invalid, Result};
use crate::layers::{self, conv_params, init_conv};
use crate::moe::{self, SgmeConfig};
use crate::params::{join, Bound, Scope, WeightTree};
use crate::pass::{Ctx, Mode};
use crate::superpixel::grid_shape;
use crate::tensor::index::{crop_map, reflect_pad_map, Dihedral};
use crate::{Rng, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_loe: usize,
    /// SGME + LSME pairs per LoE.
    pub m_pairs: usize,
    pub channels: usize,
    pub upscale: usize,
    pub sgme: SgmeConfig,
    pub lsme: LsmeConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::preset("T", 4).expect("built-in preset")
    }
}

impl ModelConfig {
    /// `T`, `B` or `T-mini` (case-insensitive).
    pub fn preset(name: &str, upscale: usize) -> Result<Self> {
        let base = ModelConfig {
            n_loe: 3,
            m_pairs: 2,
            channels: 36,
            upscale,
            sgme: SgmeConfig::default(),
            lsme: LsmeConfig::default(),
        };
        let cfg = match name.to_ascii_lowercase().as_str() {
            "t" => base,
            "b" => ModelConfig {
                n_loe: 4,
                channels: 48,
                ..base
            },
            "t-mini" | "tmini" | "mini" => ModelConfig {
                n_loe: 1,
                m_pairs: 1,
                channels: 16,
                sgme: SgmeConfig {
                    superpixels: vec![16, 16, 16],
                    ..SgmeConfig::default()
                },
                ..base
            },
            _ => return Err(invalid("preset", format!("unknown preset `{name}` (expected T, B or T-mini)"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_loe == 0 || self.m_pairs == 0 || self.channels == 0 {
            return Err(invalid("model", "n_loe, m_pairs and channels must be positive"));
        }
        if self.upscale == 0 {
            return Err(invalid("model", "upscale must be at least 1"));
        }
        self.sgme.validate(self.channels)?;
        self.lsme.validate(self.channels)
    }

    /// Every internal map side must be a multiple of this: the attention
    /// window and, per expert, the pooling factor times the superpixel grid.
    pub fn pad_multiple(&self) -> (usize, usize) {
        let (mut mh, mut mw) = (self.lsme.window, self.lsme.window);
        for (&s, &m) in self.sgme.scales.iter().zip(&self.sgme.superpixels) {
            let (gh, gw) = grid_shape(m);
            mh = lcm(mh, s * gh);
            mw = lcm(mw, s * gw);
        }
        (mh, mw)
    }

    pub fn padded_size(&self, h: usize, w: usize) -> (usize, usize) {
        let (mh, mw) = self.pad_multiple();
        (h.div_ceil(mh) * mh, w.div_ceil(mw) * mw)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Adds every parameter of the network to `tree`.
pub fn init_weights<T: Scalar>(tree: &mut WeightTree<T>, cfg: &ModelConfig, rng: &mut Rng) -> Result<()> {
    cfg.validate()?;
    let c = cfg.channels;
    init_conv(tree, "shallow", c, 3, 3, rng)?;
    for l in 0..cfg.n_loe {
        let loe = format!("loe.{l}");
        for p in 0..cfg.m_pairs {
            let pair = join(&loe, &format!("pairs.{p}"));
            moe::init_sgme(tree, &join(&pair, "sgme"), c, &cfg.sgme, rng)?;
            blocks::init_lsme(tree, &join(&pair, "lsme"), c, &cfg.lsme, rng)?;
        }
        init_conv(tree, &join(&loe, "conv"), c, c, 3, rng)?;
        tree.insert(join(&loe, "beta"), Tensor::ones(&[1]))?;
        tree.insert(join(&loe, "gamma"), Tensor::ones(&[1]))?;
    }
    init_conv(tree, "body", c, c, 3, rng)?;
    init_conv(tree, "head", 3 * cfg.upscale * cfg.upscale, c, 3, rng)
}

/// Closed-form parameter count of [`init_weights`].
pub fn param_count(cfg: &ModelConfig) -> usize {
    let c = cfg.channels;
    let pair = moe::sgme_params(c, &cfg.sgme) + blocks::lsme_params(c, &cfg.lsme);
    let loe = cfg.m_pairs * pair + conv_params(c, c, 3) + 2;
    conv_params(c, 3, 3) + cfg.n_loe * loe + conv_params(c, c, 3) + conv_params(3 * cfg.upscale * cfg.upscale, c, 3)
}

/// Multiply-accumulates of one inference forward producing an `h_out × w_out` image.
pub fn macs(cfg: &ModelConfig, h_out: usize, w_out: usize) -> u64 {
    let (h, w) = cfg.padded_size(h_out.div_ceil(cfg.upscale), w_out.div_ceil(cfg.upscale));
    let c = cfg.channels;
    let conv = |cin: usize, cout: usize| layers::conv_macs(h, w, cin, cout, 3);
    let pair = moe::sgme_macs(cfg.channels, &cfg.sgme, h, w, cfg.sgme.k) + blocks::lsme_macs(cfg.channels, &cfg.lsme, h, w);
    let loe = cfg.m_pairs as u64 * pair + conv(c, c);
    let r2 = cfg.upscale * cfg.upscale;
    conv(3, c) + cfg.n_loe as u64 * loe + conv(c, c) + conv(c, 3 * r2)
}

pub fn gmacs(cfg: &ModelConfig, h_out: usize, w_out: usize) -> f64 {
    macs(cfg, h_out, w_out) as f64 / 1e9
}

/// `x + γ · conv(x + β · Pairs(x))`.
pub fn loe_forward<'t, T: Scalar>(
    x: &Var<'t, T>,
    cfg: &ModelConfig,
    index: usize,
    scope: &Scope<'_, 't, T>,
    ctx: &mut Ctx,
) -> Result<Var<'t, T>> {
    let mut y = x.clone();
    for p in 0..cfg.m_pairs {
        let pair = scope.sub(&format!("pairs.{p}"));
        y = moe::sgme_forward(&y, &cfg.sgme, &pair.sub("sgme"), ctx)?;
        let shift = cfg.lsme.shift_for(index * cfg.m_pairs + p);
        y = blocks::lsme_forward(&y, &cfg.lsme, shift, &pair.sub("lsme"))?;
    }
    let y = x.add(&y.mul(&scope.get("beta")?)?)?;
    x.add(&layers::conv(&y, &scope.sub("conv"), 1)?.mul(&scope.get("gamma")?)?)
}

/// `[B, 3, H, W] -> [B, 3, rH, rW]` on the tape.
pub fn forward_var<'t, T: Scalar>(
    lr: &Var<'t, T>,
    cfg: &ModelConfig,
    scope: &Scope<'_, 't, T>,
    ctx: &mut Ctx,
) -> Result<Var<'t, T>> {
    let (_, ch, h, w) = lr.value().dims4("model")?;
    if ch != 3 {
        return Err(invalid("model", format!("expected 3 input channels, got {ch}")));
    }
    let (ph, pw) = cfg.padded_size(h, w);
    let x = if (ph, pw) == (h, w) {
        lr.clone()
    } else {
        lr.gather(&reflect_pad_map(lr.shape(), ph - h, pw - w)?)
    };
    let mut feat = layers::conv(&x, &scope.sub("shallow"), 1)?;
    for l in 0..cfg.n_loe {
        feat = loe_forward(&feat, cfg, l, &scope.sub(&format!("loe.{l}")), ctx)?;
    }
    let feat = layers::conv(&feat, &scope.sub("body"), 1)?;
    let sr = layers::conv(&feat, &scope.sub("head"), 1)?.pixel_shuffle(cfg.upscale)?;
    let r = cfg.upscale;
    if (ph, pw) == (h, w) {
        Ok(sr)
    } else {
        Ok(sr.gather(&crop_map(sr.shape(), h * r, w * r)?))
    }
}

/// A configuration with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub weights: WeightTree<T>,
}

impl<T: Scalar> Model<T> {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut weights = WeightTree::new();
        init_weights(&mut weights, &config, &mut Rng::new(seed))?;
        Ok(Model { config, weights })
    }

    /// Checks that the weights match the configuration's layout.
    pub fn from_parts(config: ModelConfig, weights: WeightTree<T>) -> Result<Self> {
        let reference: Model<T> = Model::build(config.clone(), 0)?;
        for (name, t) in reference.weights.iter() {
            let got = weights.get(name)?;
            if got.shape() != t.shape() {
                return Err(invalid("weights", format!("`{name}` is {:?}, expected {:?}", got.shape(), t.shape())));
            }
        }
        if weights.len() != reference.weights.len() {
            return Err(invalid("weights", "unexpected extra parameters"));
        }
        Ok(Model { config, weights })
    }

    pub fn param_count(&self) -> usize {
        self.weights.param_count()
    }

    /// Forward without gradients. `seed` drives Gumbel noise in train mode.
    pub fn forward(&self, lr: &Tensor<T>, mode: Mode, seed: u64) -> Result<Tensor<T>> {
        let mut ctx = Ctx::new(mode, seed);
        self.forward_ctx(lr, &mut ctx)
    }

    pub fn forward_ctx(&self, lr: &Tensor<T>, ctx: &mut Ctx) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let bound: Bound<'_, T> = self.weights.bind(&tape, false);
        let y = forward_var(&tape.constant(lr.clone()), &self.config, &bound.root(), ctx)?;
        Ok(y.value().clone())
    }

    /// Mean over the given dihedral transforms of `t⁻¹(forward(t(lr)))` in infer mode.
    pub fn self_ensemble_with(&self, lr: &Tensor<T>, transforms: &[Dihedral]) -> Result<Tensor<T>> {
        if transforms.is_empty() {
            return Err(invalid("self-ensemble", "no transforms"));
        }
        let mut acc: Option<Tensor<T>> = None;
        for &d in transforms {
            let fwd = d.map(lr.shape())?;
            let x = lr.gather(&fwd.indices, &fwd.shape);
            let y = self.forward(&x, Mode::Infer, 0)?;
            let inv = d.map(&out_shape_before(y.shape(), d))?.invert(&out_shape_before(y.shape(), d))?;
            let y = y.gather(&inv.indices, &inv.shape);
            acc = Some(match acc {
                None => y,
                Some(mut a) => {
                    a.add_assign(&y)?;
                    a
                }
            });
        }
        let n = T::lit(transforms.len() as f64);
        Ok(acc.expect("non-empty").map(|v| v / n))
    }

    pub fn self_ensemble(&self, lr: &Tensor<T>) -> Result<Tensor<T>> {
        self.self_ensemble_with(lr, &Dihedral::all())
    }
}

/// Shape that `d` maps onto `out` (odd quarter turns swap the last two axes).
fn out_shape_before(out: &[usize], d: Dihedral) -> Vec<usize> {
    let mut s = out.to_vec();
    if d.rot % 2 == 1 {
        let r = s.len();
        s.swap(r - 2, r - 1);
    }
    s
}

#[cfg(test)]
mod tests;
