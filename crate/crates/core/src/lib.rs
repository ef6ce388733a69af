//! normlab-core: a small, self-contained laboratory for normalization layers.
//!
//! The crate provides a rank-4 tensor type with reverse-mode autodiff, a
//! diagonal Gaussian mixture model fit by EM, the classical normalization
//! family (batch / layer / instance / group), mixture normalization, and
//! context normalization with its CN+ mixture-based inference variant —
//! plus a small ConvNet, an RMSprop trainer, and dataset utilities to run
//! controlled comparisons between them.
//!
//! Everything is generic over the floating-point type via [`Scalar`];
//! the aliases at the crate root fix the default `f64` precision used for
//! training. All randomness flows from explicit `u64` seeds and reductions
//! run in a fixed order, so identical configurations reproduce bit-identical
//! artifacts regardless of thread count.

pub mod checkpoint;
pub mod context;
pub mod data;
pub mod error;
pub mod gmm;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod norm;
pub mod optim;
pub mod param;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use kernels::{cap_threads, ReduceSet};
pub use scalar::Scalar;
pub use tape::{PoolKind, Reduction, Tape, Var};
pub use tensor::{Shape4, Tensor4};

/// Default-precision tensor (training runs in `f64`).
pub type Tensor = Tensor4<f64>;
/// Single-precision tensor (checkpoint payload precision).
pub type Tensor32 = Tensor4<f32>;
/// Default-precision parameter store.
pub type Params = param::ParamStore<f64>;
/// Default-precision Gaussian mixture model.
pub type Gmm = gmm::GmmModel<f64>;
