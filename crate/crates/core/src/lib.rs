//! Distributed multi-view image codec.
//!
//! Each view of a multi-view group is encoded *independently* (no view talks
//! to any other on the encoder side), while the decoder reconstructs all
//! views *jointly*: decoded latents exchange information through a
//! cross-attention joint-context module before synthesis. The crate bundles
//!
//! * a small tape-based autodiff engine over `ndarray` ([`graph`]),
//! * the convolutional transforms, hyperprior and context models ([`model`],
//!   [`nn`], [`jct`]),
//! * real entropy coding to self-contained per-view bitstreams ([`entropy`]),
//! * training and evaluation harnesses ([`train`], [`metrics`]),
//! * an exact rate-region calculator for distributed source coding of two
//!   finite sources ([`dsc`]),
//! * dataset / checkpoint / bitstream I/O ([`data`]) and the `ldmic` CLI
//!   ([`cli`]).
//!
//! All numerics are generic over the scalar type via [`scalar::Scalar`]
//! (`f32` and `f64` both implement it); the concrete aliases below fix the
//! runtime precision used by the CLI and the integration tests.

pub mod cli;
pub mod data;
pub mod dsc;
pub mod entropy;
pub mod error;
pub mod graph;
pub mod jct;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Runtime scalar used by the CLI, the codec paths and the shipped tests.
///
/// `f32` keeps model state and activation memory at half the `f64` cost and
/// is what the serialized checkpoint format stores. Gradient-accuracy tests
/// instantiate the same code at `f64` instead.
pub type Real = f32;

/// Model with the runtime scalar.
pub type RealModel = model::Model<Real>;
/// Parameter store with the runtime scalar.
pub type RealParams = nn::ParamStore<Real>;
/// Autodiff tape with the runtime scalar.
pub type RealTape = graph::Tape<Real>;
