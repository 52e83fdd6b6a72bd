//! Neural building blocks: convolution layers, GDN, residual blocks.
//!
//! Layer structs own no tensor data — they hold [`ParamId`]s into a
//! [`ParamStore`] plus geometry, and expose two evaluation routes over the
//! same kernels: `apply` (pure, no tape, used by compression/decompression)
//! and `trace` (records onto a [`Tape`](crate::graph::Tape) for training).
//! Tests assert the two routes agree.

pub mod kernels;
pub mod params;

pub use params::{ParamId, ParamStore, ParamTensor};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, Axis};
use rand::Rng;
use std::sync::Arc;

/// Negative slope of every leaky ReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Additive floor under the softplus-reparameterized GDN beta, keeping the
/// normalizer denominator bounded away from zero.
pub const GDN_BETA_MIN: f64 = 1e-6;

/// Standard normal draw via Box-Muller (the only normal sampling the crate
/// needs, kept local to avoid a distribution dependency).
pub fn sample_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Inverse of softplus: `x` such that `ln(1+e^x) = y` (y > 0).
pub fn softplus_inv(y: f64) -> f64 {
    (y.exp() - 1.0).max(1e-300).ln()
}

/// Leaky ReLU on a plain array (pure-path counterpart of the tape op).
pub fn leaky_relu_arr<S: Scalar>(x: &Array3<S>) -> Array3<S> {
    let slope = S::from_f64(LEAKY_SLOPE);
    x.mapv(|v| if v > S::zero() { v } else { v * slope })
}

fn init_conv_weight<S: Scalar, R: Rng>(
    rng: &mut R,
    shape: (usize, usize, usize, usize),
    fan_in: usize,
) -> Array4<S> {
    let std = (1.0 / fan_in as f64).sqrt();
    Array4::from_shape_fn(shape, |_| S::from_f64(sample_normal(rng) * std))
}

/// Strided 2-D convolution layer.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let w = store.register(
            format!("{name}.w"),
            init_conv_weight::<S, R>(rng, (out_c, in_c, k, k), in_c * k * k).into_dyn(),
        );
        let b = bias.then(|| {
            store.register(format!("{name}.b"), Array1::<S>::zeros(out_c).into_dyn())
        });
        Self {
            w,
            b,
            in_c,
            out_c,
            k,
            stride,
            pad,
        }
    }

    pub fn apply<S: Scalar>(&self, store: &ParamStore<S>, x: ArrayView3<S>) -> Array3<S> {
        let w = store
            .get(self.w)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let b = self.b.map(|b| {
            store
                .get(b)
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap()
        });
        kernels::conv2d_fwd(x, &w, b, self.stride, self.pad)
    }

    pub fn trace<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, self.stride, self.pad, None)
    }

    /// Trace with a spatial kernel mask (causal context models).
    pub fn trace_masked<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Var,
        mask: Arc<Array2<S>>,
    ) -> Var {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, self.stride, self.pad, Some(mask))
    }

    /// Pure forward with a spatial kernel mask.
    pub fn apply_masked<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        x: ArrayView3<S>,
        mask: &Array2<S>,
    ) -> Array3<S> {
        let w = store
            .get(self.w)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let mut weff = w.to_owned();
        let (oc, ic, _, _) = weff.dim();
        for o in 0..oc {
            for i in 0..ic {
                let mut plane = weff.slice_mut(ndarray::s![o, i, .., ..]);
                plane *= mask;
            }
        }
        let b = self.b.map(|b| {
            store
                .get(b)
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap()
        });
        kernels::conv2d_fwd(x, &weff.view(), b, self.stride, self.pad)
    }
}

/// Strided 2-D transposed convolution layer (upsampling).
#[derive(Debug, Clone)]
pub struct ConvT2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub outpad: usize,
}

impl ConvT2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        outpad: usize,
        bias: bool,
    ) -> Self {
        let w = store.register(
            format!("{name}.w"),
            init_conv_weight::<S, R>(rng, (in_c, out_c, k, k), in_c * k * k / (stride * stride))
                .into_dyn(),
        );
        let b = bias.then(|| {
            store.register(format!("{name}.b"), Array1::<S>::zeros(out_c).into_dyn())
        });
        Self {
            w,
            b,
            in_c,
            out_c,
            k,
            stride,
            pad,
            outpad,
        }
    }

    pub fn apply<S: Scalar>(&self, store: &ParamStore<S>, x: ArrayView3<S>) -> Array3<S> {
        let w = store
            .get(self.w)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let b = self.b.map(|b| {
            store
                .get(b)
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap()
        });
        kernels::conv_t2d_fwd(x, &w, b, self.stride, self.pad, self.outpad)
    }

    pub fn trace<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        tape.conv_t2d(x, w, b, self.stride, self.pad, self.outpad)
    }
}

/// Generalized divisive normalization layer with softplus-reparameterized
/// parameters: `beta = softplus(raw_beta) + GDN_BETA_MIN`,
/// `gamma = softplus(raw_gamma)`, both strictly positive for every raw
/// value, so the functional positivity contract holds by construction.
#[derive(Debug, Clone)]
pub struct Gdn {
    pub beta_raw: ParamId,
    pub gamma_raw: ParamId,
    pub channels: usize,
    pub inverse: bool,
}

impl Gdn {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        inverse: bool,
    ) -> Self {
        // effective beta starts at 1, gamma near 0.1 on the diagonal and
        // 0.005 elsewhere
        let beta_raw = store.register(
            format!("{name}.beta"),
            Array1::from_elem(channels, S::from_f64(softplus_inv(1.0))).into_dyn(),
        );
        let diag = softplus_inv(0.1);
        let off = softplus_inv(0.005);
        let gamma_raw = store.register(
            format!("{name}.gamma"),
            Array2::from_shape_fn((channels, channels), |(i, j)| {
                S::from_f64(if i == j { diag } else { off })
            })
            .into_dyn(),
        );
        Self {
            beta_raw,
            gamma_raw,
            channels,
            inverse,
        }
    }

    fn effective<S: Scalar>(&self, store: &ParamStore<S>) -> (Array1<S>, Array2<S>) {
        let beta = store
            .get(self.beta_raw)
            .mapv(|v| v.softplus() + S::from_f64(GDN_BETA_MIN))
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        let gamma = store
            .get(self.gamma_raw)
            .mapv(|v| v.softplus())
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        (beta, gamma)
    }

    pub fn apply<S: Scalar>(&self, store: &ParamStore<S>, x: ArrayView3<S>) -> Array3<S> {
        let (beta, gamma) = self.effective(store);
        kernels::gdn_fwd(x, beta.view(), gamma.view(), self.inverse)
    }

    pub fn trace<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Var {
        let braw = tape.param(store, self.beta_raw);
        let bsp = tape.softplus(braw);
        let beta = tape.add_const(bsp, S::from_f64(GDN_BETA_MIN));
        let graw = tape.param(store, self.gamma_raw);
        let gamma = tape.softplus(graw);
        tape.gdn(x, beta, gamma, self.inverse)
    }
}

/// Functional GDN on explicit effective parameters, with validation.
/// `beta` must be strictly positive and `gamma` nonnegative, of shapes
/// `(C)` and `(C, C)` for a `(C, H, W)` input.
pub fn gdn<S: Scalar>(
    x: ArrayView3<S>,
    beta: &Array1<S>,
    gamma: &Array2<S>,
    inverse: bool,
) -> Result<Array3<S>> {
    let c = x.dim().0;
    if beta.len() != c || gamma.dim() != (c, c) {
        return Err(Error::Shape(format!(
            "gdn: expected beta ({c}) and gamma ({c},{c}), got {} and {:?}",
            beta.len(),
            gamma.dim()
        )));
    }
    if beta.iter().any(|&b| b <= S::zero()) {
        return Err(Error::Schema("gdn: beta must be strictly positive".into()));
    }
    if gamma.iter().any(|&g| g < S::zero()) {
        return Err(Error::Schema("gdn: gamma must be nonnegative".into()));
    }
    Ok(kernels::gdn_fwd(x, beta.view(), gamma.view(), inverse))
}

/// Two-conv residual block with leaky ReLU, channel-preserving.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResBlock {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        channels: usize,
    ) -> Self {
        Self {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), channels, channels, 3, 1, 1, true),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), channels, channels, 3, 1, 1, true),
        }
    }

    pub fn apply<S: Scalar>(&self, store: &ParamStore<S>, x: ArrayView3<S>) -> Array3<S> {
        let h = self.conv1.apply(store, x);
        let h = leaky_relu_arr(&h);
        let h = self.conv2.apply(store, h.view());
        &h + &x
    }

    pub fn trace<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Var {
        let h = self.conv1.trace(tape, store, x);
        let h = tape.leaky_relu(h, S::from_f64(LEAKY_SLOPE));
        let h = self.conv2.trace(tape, store, h);
        tape.add(h, x)
    }
}

/// Mean over channels of a `(C, H, W)` tensor -> `(1, H, W)` (not used by
/// the model itself but handy for latent visualization).
pub fn channel_mean<S: Scalar>(x: ArrayView3<S>) -> Array3<S> {
    let (c, h, w) = x.dim();
    let mut out = Array3::<S>::zeros((1, h, w));
    for ch in x.axis_iter(Axis(0)) {
        let mut plane = out.index_axis_mut(Axis(0), 0);
        plane += &ch;
    }
    out.mapv(|v| v / S::from_usize(c))
}
