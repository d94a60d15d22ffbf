//! Parameter initializers and thin wrappers shared by the network blocks.
//!
//! Every affine layer stores `weight` and `bias` under its prefix; layer norms
//! store `weight` (scale) and `bias` (shift) over the channel axis.

use crate::autodiff::Var;
use crate::error::Result;
use crate::params::{join, Scope, WeightTree};
use crate::ssm::trunc_normal;
use crate::tensor::Padding;
use crate::{Rng, Scalar, Tensor};

pub const NORM_EPS: f64 = 1e-5;

/// Linear / 1x1 weight `[out, inp]` plus a zero bias.
pub fn init_linear<T: Scalar>(tree: &mut WeightTree<T>, prefix: &str, out: usize, inp: usize, rng: &mut Rng) -> Result<()> {
    tree.insert(join(prefix, "weight"), trunc_normal(&[out, inp], inp, rng))?;
    tree.insert(join(prefix, "bias"), Tensor::zeros(&[out]))
}

/// `k × k` conv weight `[out, in_per_group, k, k]` plus a zero bias.
pub fn init_conv<T: Scalar>(
    tree: &mut WeightTree<T>,
    prefix: &str,
    out: usize,
    in_per_group: usize,
    k: usize,
    rng: &mut Rng,
) -> Result<()> {
    tree.insert(join(prefix, "weight"), trunc_normal(&[out, in_per_group, k, k], in_per_group * k * k, rng))?;
    tree.insert(join(prefix, "bias"), Tensor::zeros(&[out]))
}

pub fn init_norm<T: Scalar>(tree: &mut WeightTree<T>, prefix: &str, channels: usize) -> Result<()> {
    tree.insert(join(prefix, "weight"), Tensor::ones(&[channels]))?;
    tree.insert(join(prefix, "bias"), Tensor::zeros(&[channels]))
}

pub fn linear_params(out: usize, inp: usize) -> usize {
    out * inp + out
}

pub fn conv_params(out: usize, in_per_group: usize, k: usize) -> usize {
    out * in_per_group * k * k + out
}

/// Multiply-accumulates of a same-padded `k × k` convolution on an `h × w` map.
pub fn conv_macs(h: usize, w: usize, cin_per_group: usize, cout: usize, k: usize) -> u64 {
    (h * w * cin_per_group * cout * k * k) as u64
}

/// Layer norm over the channel axis of `[B, C, H, W]` (or the last axis of `[.., C]` when `axis` says so).
pub fn norm<'t, T: Scalar>(x: &Var<'t, T>, scope: &Scope<'_, 't, T>, axis: usize) -> Result<Var<'t, T>> {
    x.layer_norm(&scope.get("weight")?, &scope.get("bias")?, axis, T::lit(NORM_EPS))
}

/// 1x1 convolution on `[B, C, H, W]`.
pub fn pointwise<'t, T: Scalar>(x: &Var<'t, T>, scope: &Scope<'_, 't, T>) -> Result<Var<'t, T>> {
    x.pointwise(&scope.get("weight")?, Some(&scope.get("bias")?))
}

/// Affine map along the last axis.
pub fn linear<'t, T: Scalar>(x: &Var<'t, T>, scope: &Scope<'_, 't, T>) -> Result<Var<'t, T>> {
    x.linear(&scope.get("weight")?, Some(&scope.get("bias")?))
}

/// Same-padded convolution.
pub fn conv<'t, T: Scalar>(x: &Var<'t, T>, scope: &Scope<'_, 't, T>, groups: usize) -> Result<Var<'t, T>> {
    x.conv2d(&scope.get("weight")?, Some(&scope.get("bias")?), Padding::Same, groups)
}
