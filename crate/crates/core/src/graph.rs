//! Tape-based reverse-mode automatic differentiation.
//!
//! Training traces every operation onto an append-only [`Tape`]; calling
//! [`Tape::backward`] on a scalar root walks the tape in reverse and
//! accumulates gradients for every node, including parameter leaves pulled
//! from a [`ParamStore`](crate::nn::ParamStore). Inference paths do not use
//! the tape at all — they call the same kernels in
//! [`crate::nn::kernels`] directly — so tracing cost is paid only where
//! gradients are needed.
//!
//! Node values are dynamic-rank `ndarray` tensors in standard layout.
//! Feature maps are `(C, H, W)`, matrices are 2-D, and losses are 0-D.
//! Every backward formula here is covered by a finite-difference test at
//! `f64` in this module's test suite.

use crate::entropy::{factorized, gaussian};
use crate::nn::kernels;
use crate::nn::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use ndarray::{ArrayD, ArrayViewD, Axis, Ix1, Ix2, Ix3, Ix4, IxDyn};
use std::collections::HashMap;
use std::sync::Arc;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

/// Per-layer raw-parameter nodes of the factorized prior.
#[derive(Debug, Clone)]
pub struct FactorizedVars {
    pub h: Var,
    pub b: Var,
    pub a: Option<Var>,
}

#[derive(Clone)]
enum Op<S: Scalar> {
    Leaf,
    #[allow(dead_code)] // kept for node debugging
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddN(Vec<usize>),
    Neg(usize),
    Scale(usize, S),
    AddConst(usize, S),
    LeakyRelu(usize, S),
    Softplus(usize),
    Tanh(usize),
    Sigmoid(usize),
    Ln(usize),
    Abs(usize),
    PowConst(usize, S),
    ClampMin(usize, S),
    LowerBound(usize, S),
    RoundSte(usize),
    SumAll(usize),
    MeanAll(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat {
        axis: usize,
        parts: Vec<usize>,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    MatMul(usize, usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
        mask: Option<Arc<ndarray::Array2<S>>>,
    },
    ConvT {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    Gdn {
        x: usize,
        beta: usize,
        gamma: usize,
        inverse: bool,
    },
    AvgPool2(usize),
    SepReflect {
        x: usize,
        taps: Arc<Vec<S>>,
        axis: usize,
    },
    Gaussian {
        v: usize,
        mu: usize,
        sigma: usize,
    },
    Factorized {
        x: usize,
        layers: Vec<(usize, usize, Option<usize>)>,
    },
}

struct Node<S: Scalar> {
    value: ArrayD<S>,
    op: Op<S>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the root with respect to `v`, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&ArrayD<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Append-only computation tape.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    param_nodes: HashMap<usize, Var>,
    params_used: Vec<(ParamId, Var)>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            params_used: Vec::new(),
        }
    }

    fn push(&mut self, value: ArrayD<S>, op: Op<S>) -> Var {
        // matmul fast paths can hand back transposed strides (e.g. outer
        // products); node values are kept in standard layout throughout
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters injected into this tape, in first-use order.
    pub fn params_used(&self) -> &[(ParamId, Var)] {
        &self.params_used
    }

    pub fn value(&self, v: Var) -> &ArrayD<S> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> S {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.len(), 1, "scalar_value on non-scalar node");
        *val.iter().next().unwrap()
    }

    /// Constant leaf (inputs, noise draws, fixed masks).
    pub fn constant(&mut self, value: ArrayD<S>) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        self.push(value, Op::Leaf)
    }

    pub fn constant3(&mut self, value: ndarray::Array3<S>) -> Var {
        self.constant(value.into_dyn())
    }

    pub fn constant2(&mut self, value: ndarray::Array2<S>) -> Var {
        self.constant(value.into_dyn())
    }

    /// Parameter leaf; memoized so repeated use shares one node.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id.0) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.param_nodes.insert(id.0, v);
        self.params_used.push((id, v));
        v
    }

    // ---- elementwise arithmetic ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.push(v, Op::Div(a.0, b.0))
    }

    /// Sum of equally shaped tensors.
    pub fn add_n(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let mut v = self.nodes[parts[0].0].value.clone();
        for p in &parts[1..] {
            v = v + &self.nodes[p.0].value;
        }
        self.push(v, Op::AddN(parts.iter().map(|p| p.0).collect()))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        self.push(v, Op::Neg(a.0))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, Op::Scale(a.0, c))
    }

    pub fn add_const(&mut self, a: Var, c: S) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(v, Op::AddConst(a.0, c))
    }

    // ---- nonlinearities ----

    pub fn leaky_relu(&mut self, a: Var, slope: S) -> Var {
        let v = self.nodes[a.0]
            .value
            .mapv(|x| if x > S::zero() { x } else { x * slope });
        self.push(v, Op::LeakyRelu(a.0, slope))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.softplus());
        self.push(v, Op::Softplus(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.tanh());
        self.push(v, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.sigmoid());
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.ln());
        self.push(v, Op::Ln(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.abs());
        self.push(v, Op::Abs(a.0))
    }

    pub fn pow_const(&mut self, a: Var, p: S) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.powf(p));
        self.push(v, Op::PowConst(a.0, p))
    }

    /// `max(x, c)` with the plain subgradient (zero below the threshold).
    pub fn clamp_min(&mut self, a: Var, c: S) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(c));
        self.push(v, Op::ClampMin(a.0, c))
    }

    /// `max(x, c)` with the straight-through-style rule used by learned
    /// compression models: below the bound, gradients still pass when they
    /// push the input upward (i.e. when `dL/dy < 0`), so clipped values can
    /// recover during training.
    pub fn lower_bound(&mut self, a: Var, c: S) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(c));
        self.push(v, Op::LowerBound(a.0, c))
    }

    /// Round to nearest with straight-through gradient (identity).
    pub fn round_ste(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.round());
        self.push(v, Op::RoundSte(a.0))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), s),
            Op::SumAll(a.0),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let val = &self.nodes[a.0].value;
        let s = val.sum() / S::from_usize(val.len());
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::MeanAll(a.0))
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: incompatible size");
        self.push(v, Op::Reshape(a.0))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let v = self.nodes[a.0]
            .value
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        self.push(v, Op::Permute(a.0, axes.to_vec()))
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        let views: Vec<ArrayViewD<S>> =
            parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views)
            .expect("concat: incompatible shapes")
            .as_standard_layout()
            .to_owned();
        self.push(
            v,
            Op::Concat {
                axis,
                parts: parts.iter().map(|p| p.0).collect(),
            },
        )
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self.nodes[a.0]
            .value
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .as_standard_layout()
            .to_owned();
        self.push(
            v,
            Op::Slice {
                x: a.0,
                axis,
                start,
                len,
            },
        )
    }

    // ---- linear algebra ----

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs must be 2-D");
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs must be 2-D");
        let v = av.dot(&bv).into_dyn();
        self.push(v, Op::MatMul(a.0, b.0))
    }

    /// Softmax of a 2-D matrix along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Var {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("softmax input must be 2-D");
        let v = kernels::softmax2_fwd(av, axis).into_dyn();
        self.push(v, Op::Softmax { x: a.0, axis })
    }

    // ---- structured layers ----

    /// Strided conv; `mask`, when given, spatially gates the kernel
    /// (shared across channel pairs) for causal context models.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        mask: Option<Arc<ndarray::Array2<S>>>,
    ) -> Var {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("conv input must be (C,H,W)");
        let wv = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv weight must be 4-D");
        let weff = match &mask {
            Some(m) => {
                let mut w = wv.to_owned();
                apply_spatial_mask(&mut w, m);
                w
            }
            None => wv.to_owned(),
        };
        let bv = b.map(|b| {
            self.nodes[b.0]
                .value
                .view()
                .into_dimensionality::<Ix1>()
                .expect("conv bias must be 1-D")
                .to_owned()
        });
        let v = kernels::conv2d_fwd(xv, &weff.view(), bv.as_ref().map(|b| b.view()), stride, pad);
        self.push(
            v.into_dyn(),
            Op::Conv {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                stride,
                pad,
                mask,
            },
        )
    }

    /// Strided transposed conv (upsampling).
    pub fn conv_t2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        outpad: usize,
    ) -> Var {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("conv_t input must be (C,H,W)");
        let wv = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv_t weight must be 4-D");
        let bv = b.map(|b| {
            self.nodes[b.0]
                .value
                .view()
                .into_dimensionality::<Ix1>()
                .expect("conv_t bias must be 1-D")
                .to_owned()
        });
        let v = kernels::conv_t2d_fwd(
            xv,
            &wv,
            bv.as_ref().map(|b| b.view()),
            stride,
            pad,
            outpad,
        );
        self.push(
            v.into_dyn(),
            Op::ConvT {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                stride,
                pad,
            },
        )
    }

    /// Generalized divisive normalization; `beta`/`gamma` are effective
    /// (positive) parameter nodes.
    pub fn gdn(&mut self, x: Var, beta: Var, gamma: Var, inverse: bool) -> Var {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("gdn input must be (C,H,W)");
        let bv = self.nodes[beta.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("gdn beta must be 1-D");
        let gv = self.nodes[gamma.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("gdn gamma must be 2-D");
        let v = kernels::gdn_fwd(xv, bv, gv, inverse);
        self.push(
            v.into_dyn(),
            Op::Gdn {
                x: x.0,
                beta: beta.0,
                gamma: gamma.0,
                inverse,
            },
        )
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("avg_pool input must be (C,H,W)");
        let v = kernels::avg_pool2_fwd(xv);
        self.push(v.into_dyn(), Op::AvgPool2(x.0))
    }

    /// Depthwise separable filtering with reflect padding (fixed taps, no
    /// trainable parameters; gradient flows to the input only).
    pub fn sep_reflect(&mut self, x: Var, taps: Arc<Vec<S>>, axis: usize) -> Var {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("sep_reflect input must be (C,H,W)");
        let v = kernels::sep_reflect_fwd(xv, &taps, axis);
        self.push(
            v.into_dyn(),
            Op::SepReflect {
                x: x.0,
                taps,
                axis,
            },
        )
    }

    /// Elementwise Gaussian interval likelihood of `v` under `(mu, sigma)`.
    pub fn gaussian_likelihood(&mut self, v: Var, mu: Var, sigma: Var) -> Var {
        let p = gaussian::interval_likelihood(
            &self.nodes[v.0].value,
            &self.nodes[mu.0].value,
            &self.nodes[sigma.0].value,
        );
        self.push(
            p,
            Op::Gaussian {
                v: v.0,
                mu: mu.0,
                sigma: sigma.0,
            },
        )
    }

    /// Elementwise factorized-prior likelihood of `x` (first axis =
    /// channels) under per-layer raw parameter nodes.
    pub fn factorized_likelihood(&mut self, x: Var, layers: &[FactorizedVars]) -> Var {
        let shape = self.nodes[x.0].value.shape().to_vec();
        let c = shape[0];
        let m: usize = shape[1..].iter().product();
        let x2 = self.nodes[x.0]
            .value
            .view()
            .into_shape_with_order((c, m))
            .expect("factorized input reshape")
            .to_owned();
        let views = self.factorized_views(layers);
        let p = factorized::likelihood_fwd(&views, &x2);
        drop(views);
        let p = p.into_shape_with_order(IxDyn(&shape)).expect("likelihood reshape");
        self.push(
            p,
            Op::Factorized {
                x: x.0,
                layers: layers
                    .iter()
                    .map(|l| (l.h.0, l.b.0, l.a.map(|a| a.0)))
                    .collect(),
            },
        )
    }

    fn factorized_views<'a>(
        &'a self,
        layers: &[FactorizedVars],
    ) -> Vec<factorized::LayerView<'a, S>> {
        layers
            .iter()
            .map(|l| factorized::LayerView {
                h: self.nodes[l.h.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix3>()
                    .expect("prior weight must be 3-D"),
                b: self.nodes[l.b.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix2>()
                    .expect("prior bias must be 2-D"),
                a: l.a.map(|a| {
                    self.nodes[a.0]
                        .value
                        .view()
                        .into_dimensionality::<Ix2>()
                        .expect("prior gate must be 2-D")
                }),
            })
            .collect()
    }

    // ---- backward ----

    /// Reverse sweep from `root` (must be scalar-shaped or the seed is a
    /// tensor of ones). Returns gradients for every reached node.
    pub fn backward(&self, root: Var) -> Gradients<S> {
        let mut grads: Vec<Option<ArrayD<S>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(
            self.nodes[root.0].value.raw_dim(),
            S::one(),
        ));
        for id in (0..=root.0).rev() {
            if grads[id].is_none() {
                continue;
            }
            // Split borrow: read gradient by value pointer, then mutate others.
            let g = grads[id].take().unwrap();
            self.backprop_one(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_one(&self, id: usize, g: &ArrayD<S>, grads: &mut [Option<ArrayD<S>>]) {
        let node = &self.nodes[id];
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g * val(*b));
                acc(grads, *b, g * val(*a));
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                acc(grads, *a, g / bv);
                let da = g * val(*a);
                acc(grads, *b, -(da / (bv * bv)));
            }
            Op::AddN(parts) => {
                for p in parts {
                    acc(grads, *p, g.clone());
                }
            }
            Op::Neg(a) => acc(grads, *a, g.mapv(|x| -x)),
            Op::Scale(a, c) => acc(grads, *a, g.mapv(|x| x * *c)),
            Op::AddConst(a, _) => acc(grads, *a, g.clone()),
            Op::LeakyRelu(a, slope) => {
                let mut da = g.clone();
                ndarray::Zip::from(&mut da).and(val(*a)).for_each(|d, &x| {
                    if x <= S::zero() {
                        *d = *d * *slope;
                    }
                });
                acc(grads, *a, da);
            }
            Op::Softplus(a) => {
                let mut da = g.clone();
                ndarray::Zip::from(&mut da)
                    .and(val(*a))
                    .for_each(|d, &x| *d = *d * x.sigmoid());
                acc(grads, *a, da);
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(grads, *a, g * &y.mapv(|y| S::one() - y * y));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(grads, *a, g * &y.mapv(|y| y * (S::one() - y)));
            }
            Op::Ln(a) => acc(grads, *a, g / val(*a)),
            Op::Abs(a) => {
                let mut da = g.clone();
                ndarray::Zip::from(&mut da).and(val(*a)).for_each(|d, &x| {
                    *d = *d
                        * if x > S::zero() {
                            S::one()
                        } else if x < S::zero() {
                            -S::one()
                        } else {
                            S::zero()
                        }
                });
                acc(grads, *a, da);
            }
            Op::PowConst(a, p) => {
                let pm1 = *p - S::one();
                let da = val(*a).mapv(|x| *p * x.powf(pm1));
                acc(grads, *a, g * &da);
            }
            Op::ClampMin(a, c) => {
                let mut da = g.clone();
                ndarray::Zip::from(&mut da).and(val(*a)).for_each(|d, &x| {
                    if x < *c {
                        *d = S::zero();
                    }
                });
                acc(grads, *a, da);
            }
            Op::LowerBound(a, c) => {
                let mut da = g.clone();
                ndarray::Zip::from(&mut da).and(val(*a)).for_each(|d, &x| {
                    // pass when above the bound, or when the gradient pulls
                    // the value upward (dL/dy < 0)
                    if x < *c && *d >= S::zero() {
                        *d = S::zero();
                    }
                });
                acc(grads, *a, da);
            }
            Op::RoundSte(a) => acc(grads, *a, g.clone()),
            Op::SumAll(a) => {
                let gs = *g.iter().next().unwrap();
                acc(grads, *a, ArrayD::from_elem(val(*a).raw_dim(), gs));
            }
            Op::MeanAll(a) => {
                let n = S::from_usize(val(*a).len());
                let gs = *g.iter().next().unwrap() / n;
                acc(grads, *a, ArrayD::from_elem(val(*a).raw_dim(), gs));
            }
            Op::Reshape(a) => {
                let da = g
                    .clone()
                    .into_shape_with_order(val(*a).raw_dim())
                    .expect("reshape backward");
                acc(grads, *a, da);
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0usize; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let da = g
                    .view()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .to_owned();
                acc(grads, *a, da);
            }
            Op::Concat { axis, parts } => {
                let mut start = 0;
                for p in parts {
                    let len = val(*p).shape()[*axis];
                    let da = g
                        .slice_axis(Axis(*axis), ndarray::Slice::from(start..start + len))
                        .as_standard_layout()
                        .to_owned();
                    acc(grads, *p, da);
                    start += len;
                }
            }
            Op::Slice {
                x,
                axis,
                start,
                len,
            } => {
                let mut da = ArrayD::<S>::zeros(val(*x).raw_dim());
                da.slice_axis_mut(Axis(*axis), ndarray::Slice::from(*start..*start + *len))
                    .assign(g);
                acc(grads, *x, da);
            }
            Op::MatMul(a, b) => {
                let av = val(*a).view().into_dimensionality::<Ix2>().unwrap();
                let bv = val(*b).view().into_dimensionality::<Ix2>().unwrap();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                acc(grads, *a, gv.dot(&bv.t()).into_dyn());
                acc(grads, *b, av.t().dot(&gv).into_dyn());
            }
            Op::Softmax { x, axis } => {
                let y = node.value.view().into_dimensionality::<Ix2>().unwrap();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let gy = &gv * &y;
                let s = gy.sum_axis(Axis(*axis));
                let mut dx = gy.clone();
                // subtract y * sum along the softmax axis
                let s = s.insert_axis(Axis(*axis));
                dx = dx - &y * &s;
                acc(grads, *x, dx.into_dyn());
            }
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
                mask,
            } => {
                let xv = val(*x).view().into_dimensionality::<Ix3>().unwrap();
                let wv = val(*w).view().into_dimensionality::<Ix4>().unwrap();
                let weff = match mask {
                    Some(m) => {
                        let mut w = wv.to_owned();
                        apply_spatial_mask(&mut w, m);
                        w
                    }
                    None => wv.to_owned(),
                };
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let (dx, mut dw, db) =
                    kernels::conv2d_bwd(xv, &weff.view(), gv, *stride, *pad);
                if let Some(m) = mask {
                    apply_spatial_mask(&mut dw, m);
                }
                acc(grads, *x, dx.into_dyn());
                acc(grads, *w, dw.into_dyn());
                if let Some(b) = b {
                    acc(grads, *b, db.into_dyn());
                }
            }
            Op::ConvT {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xv = val(*x).view().into_dimensionality::<Ix3>().unwrap();
                let wv = val(*w).view().into_dimensionality::<Ix4>().unwrap();
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let (dx, dw, db) = kernels::conv_t2d_bwd(xv, &wv, gv, *stride, *pad);
                acc(grads, *x, dx.into_dyn());
                acc(grads, *w, dw.into_dyn());
                if let Some(b) = b {
                    acc(grads, *b, db.into_dyn());
                }
            }
            Op::Gdn {
                x,
                beta,
                gamma,
                inverse,
            } => {
                let xv = val(*x).view().into_dimensionality::<Ix3>().unwrap();
                let bv = val(*beta).view().into_dimensionality::<Ix1>().unwrap();
                let gv = val(*gamma).view().into_dimensionality::<Ix2>().unwrap();
                let dyv = g.view().into_dimensionality::<Ix3>().unwrap();
                let (dx, dbeta, dgamma) = kernels::gdn_bwd(xv, bv, gv, *inverse, dyv);
                acc(grads, *x, dx.into_dyn());
                acc(grads, *beta, dbeta.into_dyn());
                acc(grads, *gamma, dgamma.into_dyn());
            }
            Op::AvgPool2(x) => {
                let (_, h, w) = val(*x)
                    .view()
                    .into_dimensionality::<Ix3>()
                    .unwrap()
                    .dim();
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let dx = kernels::avg_pool2_bwd(gv, h, w);
                acc(grads, *x, dx.into_dyn());
            }
            Op::SepReflect { x, taps, axis } => {
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let dx = kernels::sep_reflect_adj(gv, taps, *axis);
                acc(grads, *x, dx.into_dyn());
            }
            Op::Gaussian { v, mu, sigma } => {
                let (dv, dmu, dsigma) =
                    gaussian::interval_likelihood_bwd(val(*v), val(*mu), val(*sigma), g);
                acc(grads, *v, dv);
                acc(grads, *mu, dmu);
                acc(grads, *sigma, dsigma);
            }
            Op::Factorized { x, layers } => {
                let shape = val(*x).shape().to_vec();
                let c = shape[0];
                let m: usize = shape[1..].iter().product();
                let x2 = val(*x)
                    .view()
                    .into_shape_with_order((c, m))
                    .unwrap()
                    .to_owned();
                let dy2 = g
                    .view()
                    .into_shape_with_order((c, m))
                    .unwrap()
                    .to_owned();
                let fv: Vec<FactorizedVars> = layers
                    .iter()
                    .map(|(h, b, a)| FactorizedVars {
                        h: Var(*h),
                        b: Var(*b),
                        a: a.map(Var),
                    })
                    .collect();
                let views = self.factorized_views(&fv);
                let (dx2, layer_grads) = factorized::likelihood_bwd(&views, &x2, &dy2);
                drop(views);
                let dx = dx2
                    .into_shape_with_order(IxDyn(&shape))
                    .expect("factorized dx reshape");
                acc(grads, *x, dx);
                for ((h, b, a), lg) in layers.iter().zip(layer_grads) {
                    acc(grads, *h, lg.dh.into_dyn());
                    acc(grads, *b, lg.db.into_dyn());
                    if let (Some(a), Some(da)) = (a, lg.da) {
                        acc(grads, *a, da.into_dyn());
                    }
                }
            }
        }
    }
}

fn acc<S: Scalar>(grads: &mut [Option<ArrayD<S>>], id: usize, g: ArrayD<S>) {
    // keep stored gradients in standard layout so downstream reshapes
    // (e.g. the reshape op's backward) never see transposed strides
    let g = if g.is_standard_layout() {
        g
    } else {
        g.as_standard_layout().to_owned()
    };
    match &mut grads[id] {
        Some(t) => *t += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Multiply each `(oc, ic)` kernel plane of `w` elementwise by a spatial
/// `(k, k)` mask.
fn apply_spatial_mask<S: Scalar>(w: &mut ndarray::Array4<S>, mask: &ndarray::Array2<S>) {
    let (oc, ic, _, _) = w.dim();
    for o in 0..oc {
        for i in 0..ic {
            let mut plane = w.slice_mut(ndarray::s![o, i, .., ..]);
            plane *= mask;
        }
    }
}
