//! Entropy modeling and coding.
//!
//! Submodules: exact likelihood models ([`gaussian`], [`factorized`]),
//! causal context masks ([`context`]), the range coder ([`range`]),
//! quantized coding tables ([`tables`]) and the group codec with its
//! bitstream container ([`codec`]).

pub mod codec;
pub mod context;
pub mod factorized;
pub mod gaussian;
pub mod range;
pub mod tables;

pub use codec::{
    compress_group, decompress_group, latent_residuals, simulate_group, BitstreamContainer,
    EncodeInfo, SimulatedGroup, ViewBits, ViewStreams,
};
pub use context::ContextKind;
pub use gaussian::{LIKELIHOOD_FLOOR, SIGMA_FLOOR};
