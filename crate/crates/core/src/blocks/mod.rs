//! Local spatial modulating expert: channel attention followed by shifted
//! window self-attention (the LMA), then a gated feed-forward, each wrapped
//! in a pre-norm residual.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{invalid, Result};
use crate::layers::{self, init_linear, init_norm, linear_params};
use crate::moe::{gated_ffn, gated_ffn_params, init_gated_ffn};
use crate::params::{join, Scope, WeightTree};
use crate::ssm::trunc_normal;
use crate::tensor::index::{window_partition_map, IndexMap};
use crate::tensor::Activation;
use crate::{Rng, Scalar, Tensor};

/// Logit added between tokens that must not attend to each other.
pub const MASK_FILL: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LmaOrder {
    /// Channel attention, then window attention.
    #[default]
    ChannelFirst,
    WindowFirst,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LsmeConfig {
    pub window: usize,
    pub heads: usize,
    /// Channel attention bottleneck ratio.
    pub reduction: usize,
    pub order: LmaOrder,
    pub ffn_ratio: usize,
}

impl Default for LsmeConfig {
    fn default() -> Self {
        LsmeConfig {
            window: 8,
            heads: 4,
            reduction: 4,
            order: LmaOrder::ChannelFirst,
            ffn_ratio: 2,
        }
    }
}

impl LsmeConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.window == 0 || self.heads == 0 || self.reduction == 0 || self.ffn_ratio == 0 {
            return Err(invalid("lsme", "window, heads, reduction and ffn ratio must be positive"));
        }
        if channels % self.heads != 0 {
            return Err(invalid("lsme", format!("{channels} channels do not split into {} heads", self.heads)));
        }
        if channels % self.reduction != 0 {
            return Err(invalid("lsme", format!("{channels} channels not divisible by reduction {}", self.reduction)));
        }
        Ok(())
    }

    /// Shift of the `i`-th block in a chain: `0, window/2, 0, ...`.
    pub fn shift_for(&self, i: usize) -> usize {
        if i % 2 == 1 {
            self.window / 2
        } else {
            0
        }
    }
}

// ---------------------------------------------------------------------------
// Windows

/// `[B, C, H, W] -> [B·nw, window², C]` after rolling by `-shift`.
pub fn window_partition<'t, T: Scalar>(x: &Var<'t, T>, window: usize, shift: usize) -> Result<Var<'t, T>> {
    check_shift(window, shift)?;
    Ok(x.gather(&window_partition_map(x.shape(), window, shift)?))
}

/// Inverse of [`window_partition`] for a map of shape `shape`.
pub fn window_reverse<'t, T: Scalar>(w: &Var<'t, T>, shape: &[usize], window: usize, shift: usize) -> Result<Var<'t, T>> {
    check_shift(window, shift)?;
    Ok(w.gather(&window_partition_map(shape, window, shift)?.invert(shape)?))
}

fn check_shift(window: usize, shift: usize) -> Result<()> {
    if shift >= window.max(1) {
        return Err(invalid("window", format!("shift {shift} must be below window {window}")));
    }
    Ok(())
}

/// Gather map from the `[(2w-1)², heads]` bias table to `[heads, w², w²]`.
pub fn relative_position_index(window: usize, heads: usize) -> IndexMap {
    let n = window * window;
    let span = 2 * window - 1;
    let mut indices = Vec::with_capacity(heads * n * n);
    for h in 0..heads {
        for i in 0..n {
            for j in 0..n {
                let dy = (i / window) + window - 1 - (j / window);
                let dx = (i % window) + window - 1 - (j % window);
                indices.push((dy * span + dx) * heads + h);
            }
        }
    }
    IndexMap {
        indices,
        shape: vec![heads, n, n],
    }
}

/// Additive mask `[nw, w², w²]` for a map rolled by `-shift`.
///
/// Inside one rolled window, tokens that wrapped around an edge were not
/// adjacent to the others before the roll; pairs that differ in wrap status
/// along either axis get [`MASK_FILL`].
pub fn shift_mask<T: Scalar>(h: usize, w: usize, window: usize, shift: usize) -> Result<Tensor<T>> {
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(invalid("shift mask", format!("{h}x{w} not divisible by window {window}")));
    }
    let (nwy, nwx) = (h / window, w / window);
    let n = window * window;
    let label = |y: usize, x: usize| (shift > 0 && y >= h - shift, shift > 0 && x >= w - shift);
    let mut data = Vec::with_capacity(nwy * nwx * n * n);
    for wy in 0..nwy {
        for wx in 0..nwx {
            let labels: Vec<_> = (0..n)
                .map(|t| label(wy * window + t / window, wx * window + t % window))
                .collect();
            for i in 0..n {
                for j in 0..n {
                    data.push(if labels[i] == labels[j] { T::zero() } else { T::lit(MASK_FILL) });
                }
            }
        }
    }
    Tensor::new(vec![nwy * nwx, n, n], data)
}

pub fn init_window_attention<T: Scalar>(
    tree: &mut WeightTree<T>,
    prefix: &str,
    channels: usize,
    cfg: &LsmeConfig,
    rng: &mut Rng,
) -> Result<()> {
    let span = 2 * cfg.window - 1;
    init_linear(tree, &join(prefix, "qkv"), 3 * channels, channels, rng)?;
    init_linear(tree, &join(prefix, "proj"), channels, channels, rng)?;
    tree.insert(join(prefix, "rpb"), trunc_normal(&[span * span, cfg.heads], 1, rng))
}

pub fn window_attention_params(channels: usize, cfg: &LsmeConfig) -> usize {
    let span = 2 * cfg.window - 1;
    linear_params(3 * channels, channels) + linear_params(channels, channels) + span * span * cfg.heads
}

/// Multi-head attention inside windows `[G, n, C]`, `G = B·nw`.
///
/// `mask` is `[nw, n, n]`. Returns the projected output and the attention
/// probabilities `[G, heads, n, n]`.
pub fn window_mhsa<'t, T: Scalar>(
    windows: &Var<'t, T>,
    heads: usize,
    window: usize,
    mask: Option<&Tensor<T>>,
    scope: &Scope<'_, 't, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let (g, n, c) = (windows.shape()[0], windows.shape()[1], windows.shape()[2]);
    if n != window * window || c % heads != 0 {
        return Err(invalid("window mhsa", format!("windows {:?} vs window {window}, heads {heads}", windows.shape())));
    }
    let dh = c / heads;
    let qkv = layers::linear(windows, &scope.sub("qkv"))?;
    let split = |k: usize| -> Result<Var<'t, T>> {
        qkv.narrow(2, k * c, c)?
            .reshape(&[g, n, heads, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[g * heads, n, dh])
    };
    let (q, k, v) = (split(0)?, split(1)?, split(2)?);
    let logits = q.bmm(&k.transpose_last2()?)?.scale(T::lit(1.0 / (dh as f64).sqrt()));
    let bias = scope.get("rpb")?.gather(&relative_position_index(window, heads));
    let mut logits = logits.reshape(&[g, heads, n, n])?.add(&bias)?;
    if let Some(m) = mask {
        let nw = m.shape()[0];
        if g % nw != 0 {
            return Err(invalid("window mhsa", format!("{g} windows do not match a mask over {nw}")));
        }
        let m = logits.tape().constant(m.reshape(&[1, nw, 1, n, n])?);
        logits = logits.reshape(&[g / nw, nw, heads, n, n])?.add(&m)?.reshape(&[g, heads, n, n])?;
    }
    let probs = logits.softmax(3)?;
    let out = probs
        .reshape(&[g * heads, n, n])?
        .bmm(&v)?
        .reshape(&[g, heads, n, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[g, n, c])?;
    Ok((layers::linear(&out, &scope.sub("proj"))?, probs))
}

/// Shifted window attention on `[B, C, H, W]`.
pub fn window_attention<'t, T: Scalar>(
    x: &Var<'t, T>,
    cfg: &LsmeConfig,
    shift: usize,
    scope: &Scope<'_, 't, T>,
) -> Result<Var<'t, T>> {
    let (_, _, h, w) = x.value().dims4("window attention")?;
    let windows = window_partition(x, cfg.window, shift)?;
    let mask = if shift > 0 { Some(shift_mask(h, w, cfg.window, shift)?) } else { None };
    let (out, _) = window_mhsa(&windows, cfg.heads, cfg.window, mask.as_ref(), scope)?;
    window_reverse(&out, x.shape(), cfg.window, shift)
}

// ---------------------------------------------------------------------------
// Channel attention

pub fn init_channel_attention<T: Scalar>(tree: &mut WeightTree<T>, prefix: &str, channels: usize, reduction: usize, rng: &mut Rng) -> Result<()> {
    let mid = channels / reduction;
    init_linear(tree, &join(prefix, "fc1"), mid, channels, rng)?;
    init_linear(tree, &join(prefix, "fc2"), channels, mid, rng)
}

pub fn channel_attention_params(channels: usize, reduction: usize) -> usize {
    let mid = channels / reduction;
    linear_params(mid, channels) + linear_params(channels, mid)
}

/// `x ⊙ σ(fc2(ReLU(fc1(mean_hw(x)))))`.
pub fn channel_attention<'t, T: Scalar>(x: &Var<'t, T>, scope: &Scope<'_, 't, T>) -> Result<Var<'t, T>> {
    let (b, c, h, w) = x.value().dims4("channel attention")?;
    let pooled = x.reshape(&[b, c, h * w])?.mean_axis(2)?;
    let hidden = layers::linear(&pooled, &scope.sub("fc1"))?.act(Activation::Relu);
    let scale = layers::linear(&hidden, &scope.sub("fc2"))?.sigmoid();
    x.mul(&scale.reshape(&[b, c, 1, 1])?)
}

// ---------------------------------------------------------------------------
// LMA and LSME

pub fn init_lma<T: Scalar>(tree: &mut WeightTree<T>, prefix: &str, channels: usize, cfg: &LsmeConfig, rng: &mut Rng) -> Result<()> {
    cfg.validate(channels)?;
    init_channel_attention(tree, &join(prefix, "ca"), channels, cfg.reduction, rng)?;
    init_window_attention(tree, &join(prefix, "attn"), channels, cfg, rng)
}

pub fn lma<'t, T: Scalar>(x: &Var<'t, T>, cfg: &LsmeConfig, shift: usize, scope: &Scope<'_, 't, T>) -> Result<Var<'t, T>> {
    match cfg.order {
        LmaOrder::ChannelFirst => {
            window_attention(&channel_attention(x, &scope.sub("ca"))?, cfg, shift, &scope.sub("attn"))
        }
        LmaOrder::WindowFirst => {
            channel_attention(&window_attention(x, cfg, shift, &scope.sub("attn"))?, &scope.sub("ca"))
        }
    }
}

pub fn init_lsme<T: Scalar>(tree: &mut WeightTree<T>, prefix: &str, channels: usize, cfg: &LsmeConfig, rng: &mut Rng) -> Result<()> {
    init_norm(tree, &join(prefix, "norm1"), channels)?;
    init_lma(tree, &join(prefix, "lma"), channels, cfg, rng)?;
    init_norm(tree, &join(prefix, "norm2"), channels)?;
    init_gated_ffn(tree, &join(prefix, "ffn"), channels, cfg.ffn_ratio, rng)
}

pub fn lsme_params(channels: usize, cfg: &LsmeConfig) -> usize {
    4 * channels
        + channel_attention_params(channels, cfg.reduction)
        + window_attention_params(channels, cfg)
        + gated_ffn_params(channels, cfg.ffn_ratio)
}

/// `y = x + LMA(LN(x))`, `out = y + FFN(LN(y))`.
pub fn lsme_forward<'t, T: Scalar>(x: &Var<'t, T>, cfg: &LsmeConfig, shift: usize, scope: &Scope<'_, 't, T>) -> Result<Var<'t, T>> {
    let y = x.add(&lma(&layers::norm(x, &scope.sub("norm1"), 1)?, cfg, shift, &scope.sub("lma"))?)?;
    y.add(&gated_ffn(&layers::norm(&y, &scope.sub("norm2"), 1)?, &scope.sub("ffn"))?)
}

/// Multiply-accumulates of one LSME on a `C × H × W` map.
pub fn lsme_macs(channels: usize, cfg: &LsmeConfig, h: usize, w: usize) -> u64 {
    let (c, hw) = (channels as u64, (h * w) as u64);
    let n = (cfg.window * cfg.window) as u64;
    let mid = (channels / cfg.reduction) as u64;
    let r = (cfg.ffn_ratio * channels) as u64;
    let ca = 2 * c * mid + hw * c;
    let attn = hw * c * 3 * c + 2 * hw * n * c + hw * c * c;
    let ffn = hw * c * 2 * r + hw * r * 9 + hw * r + hw * r * c;
    ca + attn + ffn
}
