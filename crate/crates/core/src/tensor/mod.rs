//! Dense row-major tensors and the primitive kernels built on them.
//!
//! A [`Tensor`] owns a flat `Vec<T>` plus its shape; the last axis is the
//! fastest-varying one. Kernels in the submodules are plain functions over
//! tensors, each paired with the backward kernel the tape uses.

pub mod broadcast;
pub mod conv;
pub mod dft;
pub mod index;
pub mod nn;
pub mod spatial;

use std::fmt;

use crate::error::{invalid, shape_err, Result};
use crate::Scalar;

pub use conv::Padding;
pub use nn::Activation;

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {:?} holds {} elements, got {}", shape, numel(&shape), data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a tensor from a function of the flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(shape_err("item", format!("expected one element, shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < ext, "index {ix} out of bounds for axis {i} of extent {ext}");
            off = off * ext + ix;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Unpacks a rank-4 shape as `(B, C, H, W)`.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(shape_err(op, format!("expected rank 4 [B,C,H,W], got {:?}", self.shape))),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        self.clone().into_reshape(shape)
    }

    pub fn into_reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    /// In-place `self += other`; used for gradient accumulation.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Sum in flat index order.
    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::lit(self.data.len() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let map = index::permute_map(&self.shape, axes)?;
        Ok(self.gather(&map.indices, &map.shape))
    }

    /// `out[i] = self[indices[i]]`, reshaped to `shape`.
    pub fn gather(&self, indices: &[usize], shape: &[usize]) -> Self {
        debug_assert_eq!(indices.len(), numel(shape));
        Self {
            shape: shape.to_vec(),
            data: indices.iter().map(|&i| self.data[i]).collect(),
        }
    }

    /// Adjoint of [`Tensor::gather`]: scatter-adds `self` into a zero tensor of `shape`.
    pub fn scatter_add(&self, indices: &[usize], shape: &[usize]) -> Self {
        let mut out = Self::zeros(shape);
        for (&i, &v) in indices.iter().zip(&self.data) {
            out.data[i] += v;
        }
        out
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let map = index::narrow_map(&self.shape, axis, start, len)?;
        Ok(self.gather(&map.indices, &map.shape))
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        if axis >= first.rank() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {:?}", first.shape)));
        }
        let mut shape = first.shape.clone();
        shape[axis] = 0;
        for p in parts {
            if p.rank() != first.rank()
                || p.shape.iter().enumerate().any(|(i, &e)| i != axis && e != first.shape[i])
            {
                return Err(shape_err("concat", format!("{:?} vs {:?}", first.shape, p.shape)));
            }
            shape[axis] += p.shape[axis];
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Tensor::new(shape, data)
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ... ({} total)", self.data.len())?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_mismatched_data() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn row_major_offsets() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        assert_eq!(t.at(&[1, 2, 3]), 23.0);
        assert_eq!(t.strides(), vec![12, 4, 1]);
    }

    #[test]
    fn concat_and_narrow_agree() {
        let t = Tensor::<f64>::from_fn(&[2, 5, 3], |i| i as f64);
        let a = t.narrow(1, 0, 2).unwrap();
        let b = t.narrow(1, 2, 3).unwrap();
        assert_eq!(Tensor::concat(&[&a, &b], 1).unwrap(), t);
    }

    proptest! {
        #[test]
        fn reshape_round_trip(dims in proptest::collection::vec(1usize..5, 1..5)) {
            let n: usize = dims.iter().product();
            let t = Tensor::<f32>::from_fn(&dims, |i| i as f32);
            let flat = t.reshape(&[n]).unwrap();
            prop_assert_eq!(flat.reshape(&dims).unwrap(), t);
        }

        #[test]
        fn permute_inverse_is_identity(dims in proptest::collection::vec(1usize..4, 1..5), seed in 0u64..1000) {
            let t = Tensor::<f32>::from_fn(&dims, |i| i as f32);
            let mut axes: Vec<usize> = (0..dims.len()).collect();
            let mut r = crate::Rng::new(seed);
            for i in (1..axes.len()).rev() {
                let j = r.below(i + 1);
                axes.swap(i, j);
            }
            let mut inv = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            let p = t.permute(&axes).unwrap();
            prop_assert_eq!(p.permute(&inv).unwrap(), t);
        }
    }
}
