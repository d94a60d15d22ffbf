//! Numpy-style broadcasting for binary elementwise ops and its adjoint
//! reduction.

use super::{numel, strides_of, Tensor};
use crate::error::{shape_err, Result};
use crate::Scalar;

/// Result shape of broadcasting `a` against `b` (right-aligned, extents equal or 1).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err("broadcast", format!("{a:?} vs {b:?} at axis {i}"))),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` with zero stride on broadcast axes.
fn view_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Source offsets into `shape` for every element of `out`, in row-major order.
pub(crate) fn broadcast_offsets(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let st = view_strides(shape, out);
    let n = numel(out);
    let mut offs = Vec::with_capacity(n);
    let mut idx = vec![0usize; out.len()];
    let mut off = 0usize;
    for _ in 0..n {
        offs.push(off);
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            off += st[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= st[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    offs
}

impl<T: Scalar> Tensor<T> {
    /// Elementwise `f(a, b)` under broadcasting.
    pub fn broadcast_zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() == other.shape() {
            return self.zip_map(other, "broadcast", f);
        }
        let shape = broadcast_shape(self.shape(), other.shape())?;
        let oa = broadcast_offsets(self.shape(), &shape);
        let ob = broadcast_offsets(other.shape(), &shape);
        let (a, b) = (self.data(), other.data());
        let data = oa.iter().zip(&ob).map(|(&i, &j)| f(a[i], b[j])).collect();
        Tensor::new(shape, data)
    }

    /// Sums broadcast axes away so the result has `shape` (adjoint of broadcasting).
    pub fn sum_to(&self, shape: &[usize]) -> Result<Self> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let full = broadcast_shape(shape, self.shape())?;
        if full != self.shape() {
            return Err(shape_err("sum_to", format!("{:?} does not broadcast to {:?}", shape, self.shape())));
        }
        let offs = broadcast_offsets(shape, self.shape());
        let mut out = Tensor::zeros(shape);
        let dst = out.data_mut();
        for (&o, &v) in offs.iter().zip(self.data()) {
            dst[o] += v;
        }
        Ok(out)
    }

    pub fn expand(&self, shape: &[usize]) -> Result<Self> {
        let full = broadcast_shape(self.shape(), shape)?;
        if full != shape {
            return Err(shape_err("expand", format!("{:?} -> {:?}", self.shape(), shape)));
        }
        let offs = broadcast_offsets(self.shape(), shape);
        let src = self.data();
        Tensor::new(shape.to_vec(), offs.iter().map(|&o| src[o]).collect())
    }
}
