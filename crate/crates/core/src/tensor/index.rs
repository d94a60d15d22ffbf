//! Index maps for data-movement ops.
//!
//! Every pure rearrangement (permute, slice, roll, reflect-pad, crop, window
//! partition, dihedral transforms) is expressed as a flat gather map
//! `out[i] = in[indices[i]]`. The tape then needs a single gather node whose
//! adjoint is a scatter-add, and bijective maps invert exactly.

use super::{numel, strides_of};
use crate::error::{invalid, shape_err, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMap {
    pub indices: Vec<usize>,
    pub shape: Vec<usize>,
}

impl IndexMap {
    /// Applies `self` after `first`: the composite reads `first`'s source.
    pub fn after(&self, first: &IndexMap) -> IndexMap {
        IndexMap {
            indices: self.indices.iter().map(|&i| first.indices[i]).collect(),
            shape: self.shape.clone(),
        }
    }

    /// Inverse of a bijective map whose source had shape `source_shape`.
    pub fn invert(&self, source_shape: &[usize]) -> Result<IndexMap> {
        let n = numel(source_shape);
        if n != self.indices.len() {
            return Err(invalid("invert", "map is not a bijection (size differs)"));
        }
        let mut inv = vec![usize::MAX; n];
        for (o, &i) in self.indices.iter().enumerate() {
            if inv[i] != usize::MAX {
                return Err(invalid("invert", "map is not a bijection (repeated source)"));
            }
            inv[i] = o;
        }
        Ok(IndexMap {
            indices: inv,
            shape: source_shape.to_vec(),
        })
    }
}

pub fn permute_map(shape: &[usize], axes: &[usize]) -> Result<IndexMap> {
    let r = shape.len();
    let mut seen = vec![false; r];
    if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
        return Err(shape_err("permute", format!("axes {axes:?} invalid for shape {shape:?}")));
    }
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let n = numel(shape);
    let mut indices = Vec::with_capacity(n);
    let mut counter = vec![0usize; r];
    for _ in 0..n {
        let src: usize = counter
            .iter()
            .zip(axes)
            .map(|(&c, &a)| c * in_strides[a])
            .sum();
        indices.push(src);
        for ax in (0..r).rev() {
            counter[ax] += 1;
            if counter[ax] < out_shape[ax] {
                break;
            }
            counter[ax] = 0;
        }
    }
    Ok(IndexMap {
        indices,
        shape: out_shape,
    })
}

pub fn narrow_map(shape: &[usize], axis: usize, start: usize, len: usize) -> Result<IndexMap> {
    if axis >= shape.len() || start + len > shape[axis] {
        return Err(shape_err(
            "narrow",
            format!("[{start}, {}) out of range on axis {axis} of {shape:?}", start + len),
        ));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let ext = shape[axis];
    let mut indices = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        for a in start..start + len {
            let base = (o * ext + a) * inner;
            indices.extend(base..base + inner);
        }
    }
    let mut out = shape.to_vec();
    out[axis] = len;
    Ok(IndexMap { indices, shape: out })
}

/// Reverses `axis`.
pub fn flip_map(shape: &[usize], axis: usize) -> Result<IndexMap> {
    if axis >= shape.len() {
        return Err(shape_err("flip", format!("axis {axis} out of range for {shape:?}")));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let ext = shape[axis];
    let mut indices = Vec::with_capacity(numel(shape));
    for o in 0..outer {
        for a in 0..ext {
            let base = (o * ext + (ext - 1 - a)) * inner;
            indices.extend(base..base + inner);
        }
    }
    Ok(IndexMap {
        indices,
        shape: shape.to_vec(),
    })
}

/// Builds a map over the last two axes from a function of output `(y, x)`
/// to source `(y, x)`.
fn spatial_map(
    shape: &[usize],
    out_hw: (usize, usize),
    src: impl Fn(usize, usize) -> (usize, usize),
) -> Result<IndexMap> {
    if shape.len() < 2 {
        return Err(shape_err("spatial map", format!("need rank >= 2, got {shape:?}")));
    }
    let r = shape.len();
    let (h, w) = (shape[r - 2], shape[r - 1]);
    let planes: usize = shape[..r - 2].iter().product();
    let (oh, ow) = out_hw;
    let mut indices = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = src(y, x);
                debug_assert!(sy < h && sx < w);
                indices.push(p * h * w + sy * w + sx);
            }
        }
    }
    let mut out = shape.to_vec();
    out[r - 2] = oh;
    out[r - 1] = ow;
    Ok(IndexMap { indices, shape: out })
}

/// Cyclic roll: `out[y][x] = in[(y + dy) mod H][(x + dx) mod W]`.
pub fn roll_map(shape: &[usize], dy: usize, dx: usize) -> Result<IndexMap> {
    let r = shape.len();
    let (h, w) = (shape[r - 2], shape[r - 1]);
    spatial_map(shape, (h, w), |y, x| ((y + dy) % h, (x + dx) % w))
}

/// Mirror index without edge repetition, periodic so any pad width works.
pub fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Reflect-pads the bottom and right edges of the last two axes.
pub fn reflect_pad_map(shape: &[usize], pad_h: usize, pad_w: usize) -> Result<IndexMap> {
    let r = shape.len();
    let (h, w) = (shape[r - 2], shape[r - 1]);
    if h == 0 || w == 0 {
        return Err(shape_err("reflect_pad", "empty spatial extent"));
    }
    spatial_map(shape, (h + pad_h, w + pad_w), |y, x| {
        (reflect_index(y, h), reflect_index(x, w))
    })
}

/// Keeps the top-left `h x w` region of the last two axes.
pub fn crop_map(shape: &[usize], h: usize, w: usize) -> Result<IndexMap> {
    let r = shape.len();
    if h > shape[r - 2] || w > shape[r - 1] {
        return Err(shape_err("crop", format!("{h}x{w} exceeds {shape:?}")));
    }
    spatial_map(shape, (h, w), |y, x| (y, x))
}

/// One of the eight symmetries of the square acting on the last two axes:
/// an optional horizontal flip followed by `rot` counter-clockwise quarter turns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dihedral {
    pub flip: bool,
    pub rot: u8,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { flip: false, rot: 0 };

    pub fn all() -> [Dihedral; 8] {
        let mut out = [Self::IDENTITY; 8];
        for (i, d) in out.iter_mut().enumerate() {
            *d = Dihedral {
                flip: i >= 4,
                rot: (i % 4) as u8,
            };
        }
        out
    }

    pub fn from_index(i: usize) -> Dihedral {
        Self::all()[i % 8]
    }

    pub fn map(self, shape: &[usize]) -> Result<IndexMap> {
        let mut current = shape.to_vec();
        let identity = IndexMap {
            indices: (0..numel(shape)).collect(),
            shape: shape.to_vec(),
        };
        let mut acc = identity;
        if self.flip {
            let r = current.len();
            let w = current[r - 1];
            let step = spatial_map(&current, (current[r - 2], w), |y, x| (y, w - 1 - x))?;
            acc = step.after(&acc);
        }
        for _ in 0..self.rot {
            // Counter-clockwise quarter turn: out[y][x] = in[x][W-1-y], output is W x H.
            let r = current.len();
            let (h, w) = (current[r - 2], current[r - 1]);
            let step = spatial_map(&current, (w, h), |y, x| (x, w - 1 - y))?;
            current = step.shape.clone();
            acc = step.after(&acc);
        }
        Ok(acc)
    }
}

/// Shifted-window partition of `[B, C, H, W]` into `[B * nw, window^2, C]`.
///
/// The feature map is first rolled by `-shift` on both spatial axes; windows
/// are then enumerated row-major, and tokens inside each window row-major.
pub fn window_partition_map(shape: &[usize], window: usize, shift: usize) -> Result<IndexMap> {
    let [b, c, h, w] = shape[..] else {
        return Err(shape_err("window_partition", format!("expected [B,C,H,W], got {shape:?}")));
    };
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(shape_err(
            "window_partition",
            format!("spatial extent {h}x{w} not divisible by window {window}"),
        ));
    }
    let (nwy, nwx) = (h / window, w / window);
    let n = window * window;
    let mut indices = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for wy in 0..nwy {
            for wx in 0..nwx {
                for iy in 0..window {
                    for ix in 0..window {
                        let y = (wy * window + iy + shift) % h;
                        let x = (wx * window + ix + shift) % w;
                        for ci in 0..c {
                            indices.push(((bi * c + ci) * h + y) * w + x);
                        }
                    }
                }
            }
        }
    }
    Ok(IndexMap {
        indices,
        shape: vec![b * nwy * nwx, n, c],
    })
}
