//! Joint context transfer between decoded views.
//!
//! The decoder holds one feature map per view. Each view distills its map
//! through two residual blocks, receives the *average* of every other
//! view's distilled map as cross-view context, fuses the two with
//! resource-efficient multi-head cross-attention, and adds a refined
//! residual back onto its own map:
//!
//! * `extract`: `f_k -> f'_k` (2 residual blocks, shared across views)
//! * `fuse`:    `f~'_k = mean_{i != k} f'_i`
//! * `attend`:  `context_k = MCA(query = f'_k, key/value = f~'_k)`
//! * `refine`:  `f*_k = f_k + F(context_k ++ f'_k)`
//!
//! The attention is linear in the number of spatial positions `n`: with
//! row-softmaxed queries and column-softmaxed keys, `A = sig_row(Q) *
//! (sig_col(K)^T V)` associates into a `(d1 x d2)` inner product per head —
//! no `n x n` matrix ever exists, which [`AttnStats`] instruments.
//!
//! Because all views share one set of weights and the fusion averages the
//! other views, the whole module is equivariant under view permutation.

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::nn::{kernels, Conv2d, ParamStore, ResBlock, LEAKY_SLOPE};
use crate::scalar::Scalar;
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;

/// How cross-view context is merged into the per-view features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    /// Resource-efficient multi-head cross-attention (the full model).
    Attention,
    /// Plain channel concatenation + 1x1 conv (ablation).
    Concat,
}

/// Dimensions of one joint-context-transfer module.
#[derive(Debug, Clone, Copy)]
pub struct JctConfig {
    /// Feature channels `d` at this site.
    pub channels: usize,
    /// Attention heads.
    pub heads: usize,
    pub fusion: Fusion,
}

impl JctConfig {
    /// Total query/key channels across heads: `d / 4`.
    pub fn d1_total(&self) -> usize {
        self.channels / 4
    }

    /// Total value channels across heads: `d / 8`.
    pub fn d2_total(&self) -> usize {
        self.channels / 8
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels % 8 != 0 {
            return Err(Error::Config(format!(
                "jct channels must be divisible by 8, got {}",
                self.channels
            )));
        }
        if self.heads == 0
            || self.d1_total() % self.heads != 0
            || self.d2_total() % self.heads != 0
        {
            return Err(Error::Config(format!(
                "jct heads {} must divide query dim {} and value dim {}",
                self.heads,
                self.d1_total(),
                self.d2_total()
            )));
        }
        Ok(())
    }
}

/// Instrumentation of one attention evaluation: proof that intermediates
/// stay linear in the number of positions.
#[derive(Debug, Clone, Copy, Default)]
pub struct AttnStats {
    /// Spatial positions `n`.
    pub n: usize,
    /// Element count of the largest temporary allocated inside the
    /// attention computation.
    pub largest_alloc_elems: usize,
}

impl AttnStats {
    fn track(&mut self, elems: usize) {
        self.largest_alloc_elems = self.largest_alloc_elems.max(elems);
    }
}

/// `A = sig_row(Q) (sig_col(K)^T V)` per head, in channel-major layout:
/// `q`, `k` are `(d1_total, n)`, `v` is `(d2_total, n)`; the result is
/// `(d2_total, n)`. The row softmax normalizes each position's query over
/// its `d1` features; the column softmax normalizes each key feature over
/// all `n` positions.
pub fn efficient_cross_attention<S: Scalar>(
    q: ArrayView2<S>,
    k: ArrayView2<S>,
    v: ArrayView2<S>,
    heads: usize,
) -> Result<(Array2<S>, AttnStats)> {
    let (d1t, n) = q.dim();
    if k.dim() != (d1t, n) {
        return Err(Error::Shape(format!(
            "attention key shape {:?} must match query {:?}",
            k.dim(),
            q.dim()
        )));
    }
    let (d2t, nv) = v.dim();
    if nv != n {
        return Err(Error::Shape(format!(
            "attention value positions {nv} must match query positions {n}"
        )));
    }
    if heads == 0 || d1t % heads != 0 || d2t % heads != 0 {
        return Err(Error::Config(format!(
            "heads {heads} must divide query dim {d1t} and value dim {d2t}"
        )));
    }
    let (d1h, d2h) = (d1t / heads, d2t / heads);
    let mut stats = AttnStats {
        n,
        largest_alloc_elems: 0,
    };
    let mut out = Array2::<S>::zeros((d2t, n));
    stats.track(d2t * n);
    for h in 0..heads {
        let qh = q.slice(ndarray::s![h * d1h..(h + 1) * d1h, ..]);
        let kh = k.slice(ndarray::s![h * d1h..(h + 1) * d1h, ..]);
        let vh = v.slice(ndarray::s![h * d2h..(h + 1) * d2h, ..]);
        // per-position softmax over the d1h query features (axis 0 lanes)
        let qs = kernels::softmax2_fwd(qh, 0);
        stats.track(d1h * n);
        // per-feature softmax over all n positions (axis 1 lanes)
        let ks = kernels::softmax2_fwd(kh, 1);
        stats.track(d1h * n);
        // global context: (d1h, n) . (n, d2h) -> (d1h, d2h)
        let g = ks.dot(&vh.t());
        stats.track(d1h * d2h);
        // apply to queries: (d2h, d1h) . (d1h, n) -> (d2h, n)
        let a = g.t().dot(&qs);
        stats.track(d2h * n);
        out.slice_mut(ndarray::s![h * d2h..(h + 1) * d2h, ..]).assign(&a);
    }
    Ok((out, stats))
}

/// Fusion weights, registered only for the mode actually in use so every
/// parameter in the store participates in the forward pass.
#[derive(Debug, Clone)]
enum FusionWeights {
    Attention {
        wq: Conv2d,
        wk: Conv2d,
        wv: Conv2d,
        wo: Conv2d,
    },
    /// Concat-fusion replacement for the attention path (2d -> d).
    Concat { fuse: Conv2d },
}

/// One joint-context-transfer module (weights shared across views).
#[derive(Debug, Clone)]
pub struct Jct {
    pub cfg: JctConfig,
    extract1: ResBlock,
    extract2: ResBlock,
    fusion: FusionWeights,
    refine_reduce: Conv2d,
    refine1: ResBlock,
    refine2: ResBlock,
}

impl Jct {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        cfg: JctConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.channels;
        let (d1, d2) = (cfg.d1_total(), cfg.d2_total());
        let extract1 = ResBlock::new(store, rng, &format!("{name}.extract1"), d);
        let extract2 = ResBlock::new(store, rng, &format!("{name}.extract2"), d);
        let fusion = match cfg.fusion {
            Fusion::Attention => FusionWeights::Attention {
                wq: Conv2d::new(store, rng, &format!("{name}.wq"), d, d1, 1, 1, 0, false),
                wk: Conv2d::new(store, rng, &format!("{name}.wk"), d, d1, 1, 1, 0, false),
                wv: Conv2d::new(store, rng, &format!("{name}.wv"), d, d2, 1, 1, 0, false),
                wo: Conv2d::new(store, rng, &format!("{name}.wo"), d2, d, 1, 1, 0, false),
            },
            Fusion::Concat => FusionWeights::Concat {
                fuse: Conv2d::new(
                    store,
                    rng,
                    &format!("{name}.concat_fuse"),
                    2 * d,
                    d,
                    1,
                    1,
                    0,
                    true,
                ),
            },
        };
        Ok(Self {
            cfg,
            extract1,
            extract2,
            fusion,
            refine_reduce: Conv2d::new(
                store,
                rng,
                &format!("{name}.refine_reduce"),
                2 * d,
                d,
                1,
                1,
                0,
                true,
            ),
            refine1: ResBlock::new(store, rng, &format!("{name}.refine1"), d),
            refine2: ResBlock::new(store, rng, &format!("{name}.refine2"), d),
        })
    }

    /// `f_k -> f'_k`: two residual blocks.
    pub fn extract_features<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        f: ArrayView3<S>,
    ) -> Array3<S> {
        let h = self.extract1.apply(store, f);
        self.extract2.apply(store, h.view())
    }

    /// Cross-view context for view `k` given all views' features and their
    /// precomputed sum: `(sum - f'_k) / (K - 1)`.
    fn fused_other<S: Scalar>(sum: &Array3<S>, own: &Array3<S>, views: usize) -> Array3<S> {
        let inv = S::from_f64(1.0 / (views as f64 - 1.0));
        (sum - own).mapv(|v| v * inv)
    }

    /// Attention (or concat) fusion of own features with the other-view
    /// average; returns the context map and attention instrumentation.
    pub fn fuse_context<'a, S: Scalar>(
        &self,
        store: &ParamStore<S>,
        own: ArrayView3<'a, S>,
        others: ArrayView3<'a, S>,
    ) -> Result<(Array3<S>, Option<AttnStats>)> {
        match &self.fusion {
            FusionWeights::Concat { fuse } => {
                let both = ndarray::concatenate(Axis(0), &[own, others])
                    .expect("concat fusion shapes");
                Ok((fuse.apply(store, both.view()), None))
            }
            FusionWeights::Attention { wq, wk, wv, wo } => {
                let (_, h, w) = own.dim();
                let q3 = wq.apply(store, own);
                let k3 = wk.apply(store, others);
                let v3 = wv.apply(store, others);
                let n = h * w;
                let q = q3.to_shape((self.cfg.d1_total(), n)).unwrap().to_owned();
                let k = k3.to_shape((self.cfg.d1_total(), n)).unwrap().to_owned();
                let v = v3.to_shape((self.cfg.d2_total(), n)).unwrap().to_owned();
                let (a, stats) =
                    efficient_cross_attention(q.view(), k.view(), v.view(), self.cfg.heads)?;
                let a3 = a
                    .into_shape_with_order((self.cfg.d2_total(), h, w))
                    .unwrap();
                Ok((wo.apply(store, a3.view()), Some(stats)))
            }
        }
    }

    /// `f*_k = f_k + F(context ++ f'_k)`.
    pub fn refine<'a, S: Scalar>(
        &self,
        store: &ParamStore<S>,
        f: ArrayView3<S>,
        context: ArrayView3<'a, S>,
        own_features: ArrayView3<'a, S>,
    ) -> Array3<S> {
        let cat = ndarray::concatenate(Axis(0), &[context, own_features])
            .expect("refine concat shapes");
        let h = self.refine_reduce.apply(store, cat.view());
        let h = crate::nn::leaky_relu_arr(&h);
        let h = self.refine1.apply(store, h.view());
        let h = self.refine2.apply(store, h.view());
        &h + &f
    }

    /// Full module over all views (pure path). `K = 1` bypasses with a
    /// warning: there is no other view to borrow context from.
    pub fn forward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        views: &[Array3<S>],
    ) -> Result<(Vec<Array3<S>>, Option<AttnStats>)> {
        if views.is_empty() {
            return Err(Error::Shape("jct: empty view list".into()));
        }
        if views.len() == 1 {
            log::warn!("joint context transfer with a single view is an identity bypass");
            return Ok((views.to_vec(), None));
        }
        let feats: Vec<Array3<S>> = views
            .iter()
            .map(|f| self.extract_features(store, f.view()))
            .collect();
        let mut sum = feats[0].clone();
        for f in &feats[1..] {
            sum += f;
        }
        let mut out = Vec::with_capacity(views.len());
        let mut stats_out = None;
        for (k, f) in views.iter().enumerate() {
            let others = Self::fused_other(&sum, &feats[k], views.len());
            let (ctx, stats) = self.fuse_context(store, feats[k].view(), others.view())?;
            if stats.is_some() {
                stats_out = stats;
            }
            out.push(self.refine(store, f.view(), ctx.view(), feats[k].view()));
        }
        Ok((out, stats_out))
    }

    /// Traced counterpart of [`Jct::forward`] for training.
    pub fn trace_forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        views: &[Var],
    ) -> Result<Vec<Var>> {
        if views.is_empty() {
            return Err(Error::Shape("jct: empty view list".into()));
        }
        if views.len() == 1 {
            log::warn!("joint context transfer with a single view is an identity bypass");
            return Ok(views.to_vec());
        }
        let feats: Vec<Var> = views
            .iter()
            .map(|&f| {
                let h = self.extract1.trace(tape, store, f);
                self.extract2.trace(tape, store, h)
            })
            .collect();
        let sum = tape.add_n(&feats);
        let inv = S::from_f64(1.0 / (views.len() as f64 - 1.0));
        let mut out = Vec::with_capacity(views.len());
        for (k, &f) in views.iter().enumerate() {
            let diff = tape.sub(sum, feats[k]);
            let others = tape.scale(diff, inv);
            let ctx = match &self.fusion {
                FusionWeights::Concat { fuse } => {
                    let both = tape.concat(0, &[feats[k], others]);
                    fuse.trace(tape, store, both)
                }
                FusionWeights::Attention { wq, wk, wv, wo } => {
                    let shape = tape.value(feats[k]).shape().to_vec();
                    let (h, w) = (shape[1], shape[2]);
                    let n = h * w;
                    let q3 = wq.trace(tape, store, feats[k]);
                    let k3 = wk.trace(tape, store, others);
                    let v3 = wv.trace(tape, store, others);
                    let q = tape.reshape(q3, &[self.cfg.d1_total(), n]);
                    let kk = tape.reshape(k3, &[self.cfg.d1_total(), n]);
                    let v = tape.reshape(v3, &[self.cfg.d2_total(), n]);
                    let (d1h, d2h) = (
                        self.cfg.d1_total() / self.cfg.heads,
                        self.cfg.d2_total() / self.cfg.heads,
                    );
                    let mut head_outs = Vec::with_capacity(self.cfg.heads);
                    for hd in 0..self.cfg.heads {
                        let qh = tape.slice_axis(q, 0, hd * d1h, d1h);
                        let kh = tape.slice_axis(kk, 0, hd * d1h, d1h);
                        let vh = tape.slice_axis(v, 0, hd * d2h, d2h);
                        let qs = tape.softmax(qh, 0);
                        let ks = tape.softmax(kh, 1);
                        let vt = tape.permute(vh, &[1, 0]);
                        let g = tape.matmul(ks, vt); // (d1h, d2h)
                        let gt = tape.permute(g, &[1, 0]);
                        let a = tape.matmul(gt, qs); // (d2h, n)
                        head_outs.push(a);
                    }
                    let cat = tape.concat(0, &head_outs);
                    let a3 = tape.reshape(cat, &[self.cfg.d2_total(), h, w]);
                    wo.trace(tape, store, a3)
                }
            };
            let cat = tape.concat(0, &[ctx, feats[k]]);
            let r = self.refine_reduce.trace(tape, store, cat);
            let r = tape.leaky_relu(r, S::from_f64(LEAKY_SLOPE));
            let r = self.refine1.trace(tape, store, r);
            let r = self.refine2.trace(tape, store, r);
            out.push(tape.add(r, f));
        }
        Ok(out)
    }
}

/// Standalone fusion of per-view feature maps: element `k` is the mean of
/// every other view's map. Requires at least two views.
pub fn fuse_views<S: Scalar>(features: &[Array3<S>]) -> Result<Vec<Array3<S>>> {
    if features.len() < 2 {
        return Err(Error::Shape(
            "fuse_views requires at least two views".into(),
        ));
    }
    let mut sum = features[0].clone();
    for f in &features[1..] {
        sum += f;
    }
    Ok(features
        .iter()
        .map(|f| Jct::fused_other(&sum, f, features.len()))
        .collect())
}
