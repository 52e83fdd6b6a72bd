//! Conditional Gaussian interval likelihood.
//!
//! A quantized latent symbol `v` with predicted mean `mu` and scale `sigma`
//! is modeled with the probability mass a Gaussian assigns to the unit
//! interval around it:
//!
//! `p = Phi((v - mu + 1/2) / sigma) - Phi((v - mu - 1/2) / sigma)`
//!
//! Because decode-path latents are formed as `round(y - mu) + mu`, the
//! residual `v - mu` is exactly integer-valued at coding time, so the same
//! expression evaluated at integer residuals doubles as the exact symbol
//! probability used to build coding tables.

use crate::scalar::Scalar;
use ndarray::ArrayD;

/// Smallest scale the entropy model may use. Scales are floored here before
/// the likelihood, keeping interval masses well conditioned.
pub const SIGMA_FLOOR: f64 = 0.11;

/// Likelihood values are floored at `2^-16` before the log so rate terms
/// stay finite.
pub const LIKELIHOOD_FLOOR: f64 = 1.0 / 65536.0;

fn pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Elementwise interval likelihood. All three arrays must share a shape.
pub fn interval_likelihood<S: Scalar>(
    v: &ArrayD<S>,
    mu: &ArrayD<S>,
    sigma: &ArrayD<S>,
) -> ArrayD<S> {
    let mut out = ArrayD::<S>::zeros(v.raw_dim());
    ndarray::Zip::from(&mut out)
        .and(v)
        .and(mu)
        .and(sigma)
        .for_each(|o, &v, &m, &s| {
            *o = S::from_f64(interval_likelihood_scalar(
                v.to_f64(),
                m.to_f64(),
                s.to_f64(),
            ));
        });
    out
}

/// Scalar form of [`interval_likelihood`].
pub fn interval_likelihood_scalar(v: f64, mu: f64, sigma: f64) -> f64 {
    let a = (v - mu + 0.5) / sigma;
    let b = (v - mu - 0.5) / sigma;
    normal_cdf(a) - normal_cdf(b)
}

/// Standard normal CDF in f64.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Gradients of the interval likelihood with respect to `v`, `mu`, `sigma`
/// given upstream gradient `dy`.
pub fn interval_likelihood_bwd<S: Scalar>(
    v: &ArrayD<S>,
    mu: &ArrayD<S>,
    sigma: &ArrayD<S>,
    dy: &ArrayD<S>,
) -> (ArrayD<S>, ArrayD<S>, ArrayD<S>) {
    let mut dv = ArrayD::<S>::zeros(v.raw_dim());
    let mut dmu = ArrayD::<S>::zeros(v.raw_dim());
    let mut dsigma = ArrayD::<S>::zeros(v.raw_dim());
    ndarray::Zip::from(&mut dv)
        .and(&mut dmu)
        .and(&mut dsigma)
        .and(v)
        .and(mu)
        .and(sigma)
        .for_each(|dv, dm, ds, &vv, &mm, &ss| {
            let (v, m, s) = (vv.to_f64(), mm.to_f64(), ss.to_f64());
            let a = (v - m + 0.5) / s;
            let b = (v - m - 0.5) / s;
            let pa = pdf(a);
            let pb = pdf(b);
            // dp/dv through both CDF arguments
            let dpdv = (pa - pb) / s;
            let dpds = -(pa * a - pb * b) / s;
            *dv = S::from_f64(dpdv);
            *dm = S::from_f64(-dpdv);
            *ds = S::from_f64(dpds);
        });
    dv = &dv * dy;
    dmu = &dmu * dy;
    dsigma = &dsigma * dy;
    (dv, dmu, dsigma)
}

/// Exact probability mass of integer residual `r` under a zero-mean
/// Gaussian with scale `sigma` (the table-building primitive).
pub fn integer_residual_pmf(r: i64, sigma: f64) -> f64 {
    interval_likelihood_scalar(r as f64, 0.0, sigma)
}

/// Information content in bits of one symbol, after the likelihood floor.
pub fn bits_of_likelihood(p: f64) -> f64 {
    -(p.max(LIKELIHOOD_FLOOR)).log2()
}
