//! Superpixel-driven mixture of state space experts for single image
//! super-resolution, with the reverse-mode tape, scan kernels and
//! verification tooling needed to train and certify it on a CPU.

pub mod autodiff;
pub mod bench;
pub mod blocks;
pub mod certify;
pub mod error;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod params;
pub mod pass;
pub mod rng;
pub mod scalar;
pub mod spssm;
pub mod ssm;
pub mod superpixel;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use params::WeightTree;
pub use pass::{Ctx, Mode};
pub use rng::Rng;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

/// Element type selected at build time (`f64` feature switches to 64-bit).
#[cfg(not(feature = "f64"))]
pub type Elem = f32;
#[cfg(feature = "f64")]
pub type Elem = f64;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
