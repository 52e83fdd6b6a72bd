//! Scalar abstraction.
//!
//! All tensor math in the crate is written against [`Scalar`] so the same
//! code instantiates at `f32` (runtime) and `f64` (gradient accuracy tests
//! and the rate-region calculator). The trait is the minimal closure of what
//! the layers, the autodiff engine and `ndarray`'s matrix products require.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssignOps, NumCast};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable throughout the crate.
pub trait Scalar:
    Float
    + NumAssignOps
    + ScalarOperand
    + LinalgScalar
    + Sum
    + Send
    + Sync
    + Display
    + Debug
    + 'static
{
    /// Lossy conversion from `f64` (values in the crate stay well inside
    /// `f32` range, so the cast never saturates in practice).
    fn from_f64(v: f64) -> Self {
        NumCast::from(v).expect("f64 -> scalar cast")
    }

    /// Widening conversion to `f64`.
    fn to_f64(self) -> f64 {
        NumCast::from(self).expect("scalar -> f64 cast")
    }

    /// Convenience conversion from `usize` counts.
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }

    /// Gauss error function, evaluated in `f64` and narrowed back. The
    /// Gaussian CDF built on top of this is accurate to well below any
    /// tolerance used by the entropy model.
    fn erf(self) -> Self {
        Self::from_f64(libm::erf(self.to_f64()))
    }

    /// Standard normal CDF `Phi(x) = (1 + erf(x / sqrt(2))) / 2`.
    fn std_normal_cdf(self) -> Self {
        let x = self.to_f64();
        Self::from_f64(0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)))
    }

    /// `ln(1 + e^x)` with the usual large-`|x|` stabilization.
    fn softplus(self) -> Self {
        let x = self.to_f64();
        let y = if x > 30.0 {
            x
        } else if x < -30.0 {
            x.exp()
        } else {
            x.exp().ln_1p()
        };
        Self::from_f64(y)
    }

    /// Derivative of [`softplus`](Scalar::softplus): the logistic sigmoid.
    fn sigmoid(self) -> Self {
        let x = self.to_f64();
        let y = if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        };
        Self::from_f64(y)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_matches_known_values() {
        // erf(0) = 0, erf(inf) -> 1, erf(0.5) = 0.5204998778...
        assert_eq!(Scalar::erf(0.0f64), 0.0);
        assert!((Scalar::erf(0.5f64) - 0.5204998778130465).abs() < 1e-12);
        assert!((1.0f64 - Scalar::erf(6.0f64)).abs() < 1e-12);
    }

    #[test]
    fn normal_cdf_is_symmetric() {
        for &x in &[0.0f64, 0.3, 1.7, 4.2] {
            let lo = (-x).std_normal_cdf();
            let hi = x.std_normal_cdf();
            assert!((lo + hi - 1.0).abs() < 1e-14);
        }
        // Phi(0.5) - Phi(-0.5) = 0.3829249225480261 (mass of a unit Gaussian
        // on [-1/2, 1/2]).
        let p = 0.5f64.std_normal_cdf() - (-0.5f64).std_normal_cdf();
        assert!((p - 0.3829249225480261).abs() < 1e-12, "got {p}");
    }

    #[test]
    fn softplus_is_stable_and_matches_sigmoid_derivative() {
        for &x in &[-80.0f64, -5.0, 0.0, 5.0, 80.0] {
            let sp = x.softplus();
            assert!(sp.is_finite() && sp >= 0.0);
            // softplus(0) = ln 2
            if x == 0.0 {
                assert!((sp - std::f64::consts::LN_2).abs() < 1e-15);
            }
            // finite-difference check of d softplus / dx = sigmoid
            let h = 1e-6;
            if x.abs() < 30.0 {
                let fd = ((x + h).softplus() - (x - h).softplus()) / (2.0 * h);
                assert!((fd - x.sigmoid()).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn f32_route_agrees_with_f64() {
        let a = 0.37f32.std_normal_cdf().to_f64();
        let b = 0.37f64.std_normal_cdf();
        assert!((a - b).abs() < 1e-6);
    }
}
