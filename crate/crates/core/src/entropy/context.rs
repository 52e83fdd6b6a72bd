//! Causal context masks for the spatial context model.
//!
//! The context model is a masked 5x5 convolution over already-decoded
//! latents. Two masks are supported:
//!
//! * **Autoregressive**: admits strictly-preceding positions in raster
//!   order (rows above; same row left of center). Decoding is sequential.
//! * **Checkerboard**: admits the four-neighborhood parity complement —
//!   taps whose offset parity differs from the center. Anchors (even
//!   row+column sum) then see only non-anchor positions, which are zero
//!   during the first pass, and non-anchors see only decoded anchors, so
//!   decoding needs exactly two parallel passes.
//!
//! Both masks zero the center tap, so no position ever conditions on
//! itself.

use crate::scalar::Scalar;
use ndarray::Array2;

/// Which causal structure the context model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextKind {
    Autoregressive,
    Checkerboard,
}

/// Spatial `(k, k)` 0/1 mask for the given structure. `k` must be odd.
pub fn context_mask<S: Scalar>(kind: ContextKind, k: usize) -> Array2<S> {
    assert!(k % 2 == 1, "context kernel must be odd");
    let r = k / 2;
    Array2::from_shape_fn((k, k), |(ky, kx)| {
        let admit = match kind {
            ContextKind::Autoregressive => ky < r || (ky == r && kx < r),
            ContextKind::Checkerboard => (ky + kx) % 2 == 1,
        };
        if admit {
            S::one()
        } else {
            S::zero()
        }
    })
}

/// Is `(y, x)` an anchor position in the checkerboard schedule?
/// Anchors are decoded first, from hyperprior information alone.
pub fn is_anchor(y: usize, x: usize) -> bool {
    (y + x) % 2 == 0
}
