//! Federated self-supervised learning on non-IID data.
//!
//! This crate implements the full stack needed to train siamese
//! self-supervised encoders (negative-cosine / SimSiam style, plus an
//! NT-Xent contrastive alternative) across a population of clients whose
//! local datasets are heterogeneous:
//!
//! * [`params`] — named-tensor parameter sets and the algebra used by
//!   optimizers and server-side aggregation,
//! * [`model`] — small convolutional / MLP encoders, predictor heads, linear
//!   classifiers, and SGD with momentum, all written with explicit
//!   forward/backward passes,
//! * [`ssl`] — the self-supervised objectives and the stochastic view
//!   augmentation pipeline,
//! * [`data`] — an in-process image dataset (procedurally generated corpus or
//!   CIFAR-10 binary files) with a label-free view for unsupervised clients,
//! * [`partition`] — Dirichlet label-skew splits, natural (ownership-table)
//!   splits, and partition statistics,
//! * [`fed`] — synchronous federated rounds: client sampling, weighted
//!   aggregation, and the orchestration loop,
//! * [`personalize`] — per-client training strategies (local adaptation,
//!   first-order meta-learning, bi-level regularization, and a dual-model
//!   scheme that regularizes personal representations toward global ones),
//! * [`eval`] — KNN indicator accuracy and the linear-probe protocols,
//! * [`runtime`] — a message-passing execution layer (in-process loopback and
//!   TCP) that reproduces the in-process loop bit for bit,
//! * [`checkpoint`] — a compact binary archive format for parameters.
//!
//! Numerics are generic over the scalar type via [`Scalar`]; production code
//! trains in `f32` (see [`Real`]) while equivalence and gradient tests
//! instantiate the same code in `f64`.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod fed;
pub mod model;
pub mod params;
pub mod partition;
pub mod personalize;
pub mod rng;
pub mod runtime;
pub mod ssl;

pub use error::{Error, Result};
pub use params::ParameterSet;

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating-point scalar the whole crate is generic over.
///
/// `f32` is the working precision for training; `f64` instantiations are used
/// wherever tight tolerances matter (finite-difference gradient checks,
/// trajectory-equivalence tests). The bound pulls in everything `ndarray`
/// needs for matrix products plus ergonomic numeric conversions.
pub trait Scalar:
    Float
    + NumAssignOps
    + FromPrimitive
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Working precision of the training binaries.
pub type Real = f32;

/// Parameter set in working precision.
pub type Params = ParameterSet<Real>;

/// Convert an `f64` constant into the active scalar type.
///
/// Panics only if the target type cannot represent any finite `f64`, which
/// cannot happen for the two implementors of [`Scalar`].
#[inline]
pub fn cast<F: Scalar>(v: f64) -> F {
    F::from_f64(v).expect("finite f64 must convert into Scalar")
}
