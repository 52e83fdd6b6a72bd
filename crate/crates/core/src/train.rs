//! Rate-distortion training: loss surrogate, optimizer, and epoch loop.
//!
//! The loss is `total = lambda * distortion + rate` with the rate term
//! estimated from additive-noise quantization and the distortion term from
//! a straight-through rounding of the latents, so both the decoder and the
//! encoder receive gradients. Training is deterministic for a fixed seed:
//! group order, augmentation, and noise draws all derive from one seeded
//! generator, and batch gradients reduce in group order regardless of how
//! the per-group work is scheduled across threads.

use crate::data::{augment_group, DatasetIndex};
use crate::entropy::context::is_anchor;
use crate::entropy::{ContextKind, LIKELIHOOD_FLOOR};
use crate::error::{io_err, Error, Result};
use crate::graph::{Tape, Var};
use crate::model::{Model, ModelConfig, Variant, ENCODER_SIDE_PREFIXES, TOTAL_STRIDE};
use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;
use ndarray::{Array3, ArrayD};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::Write as _;
use std::path::Path;

/// Weight grid trading rate against squared-error distortion.
pub const LAMBDA_GRID: [f64; 5] = [256.0, 512.0, 1024.0, 2048.0, 4096.0];
/// Initial learning rate of the main schedule.
pub const BASE_LR: f64 = 1e-4;
/// Initial learning rate when fine-tuning for the structural metric.
pub const MS_SSIM_FINE_TUNE_LR: f64 = 5e-5;
/// Global gradient-norm clip.
pub const GRAD_CLIP_NORM: f64 = 1.0;

/// Distortion measure optimized during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Mean squared error in `[0, 1]` pixel scale.
    Mse,
    /// One minus the five-scale structural similarity score.
    MsSsim,
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" | "psnr" => Ok(Metric::Mse),
            "msssim" => Ok(Metric::MsSsim),
            other => Err(Error::Config(format!(
                "unknown metric '{other}' (expected psnr or msssim)"
            ))),
        }
    }
}

// ---- loss -------------------------------------------------------------

/// One evaluated loss: `total = lambda * distortion + rate_bpp` exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub distortion: f64,
    pub rate_bpp: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Combine distortion and total rate into the training objective.
/// `pixels` is the group's pixel count summed over views.
pub fn rd_loss(distortion: f64, rate_bits: f64, lambda: f64, pixels: usize) -> Result<LossBreakdown> {
    if !(lambda > 0.0) || pixels == 0 {
        return Err(Error::Config(format!(
            "rd_loss needs lambda > 0 and pixels > 0 (got {lambda}, {pixels})"
        )));
    }
    let rate_bpp = rate_bits / pixels as f64;
    let total = lambda * distortion + rate_bpp;
    if !total.is_finite() || !distortion.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            step: 0,
            detail: format!("non-finite loss (distortion {distortion}, rate {rate_bpp} bpp)"),
        });
    }
    Ok(LossBreakdown {
        distortion,
        rate_bpp,
        lambda,
        total,
    })
}

/// Stepped learning-rate schedule: the base rate halves every 100 epochs
/// three times and stays constant from epoch 300 on.
pub fn lr_schedule(base_lr: f64, epoch: usize) -> f64 {
    base_lr / f64::powi(2.0, (epoch / 100).min(3) as i32)
}

// ---- variant construction ---------------------------------------------

/// Build a freshly initialized model for a named wiring variant. The
/// frozen-encoder variant copies the encoder-side weights (analysis,
/// hyperprior, context, entropy parameters, prior) from a trained
/// separate-decoder model and marks them non-trainable.
pub fn build_variant<S: Scalar>(
    cfg: &ModelConfig,
    seed: u64,
    source: Option<&Model<S>>,
) -> Result<Model<S>> {
    if cfg.variant == Variant::FrozenEncoder {
        let Some(src) = source else {
            return Err(Error::Config(
                "frozen_encoder needs a trained sep_enc_dec source checkpoint".into(),
            ));
        };
        if src.cfg.variant != Variant::SepEncDec {
            return Err(Error::Config(format!(
                "frozen_encoder must start from a sep_enc_dec checkpoint, got {}",
                src.cfg.variant
            )));
        }
        if src.cfg.latent_channels != cfg.latent_channels
            || src.cfg.hyper_channels != cfg.hyper_channels
        {
            return Err(Error::Incompatible(format!(
                "source channels ({}, {}) differ from target ({}, {})",
                src.cfg.latent_channels,
                src.cfg.hyper_channels,
                cfg.latent_channels,
                cfg.hyper_channels
            )));
        }
        let mut model = Model::<S>::new(*cfg, seed)?;
        for prefix in ENCODER_SIDE_PREFIXES {
            model.store.copy_values_by_prefix(&src.store, prefix)?;
            model.store.set_trainable_by_prefix(prefix, false);
        }
        return Ok(model);
    }
    if source.is_some() {
        return Err(Error::Config(format!(
            "variant {} does not take a source checkpoint",
            cfg.variant
        )));
    }
    Model::new(*cfg, seed)
}

// ---- training forward -------------------------------------------------

fn bits_from_likelihood<S: Scalar>(tape: &mut Tape<S>, p: Var) -> Var {
    let pf = tape.lower_bound(p, S::from_f64(LIKELIHOOD_FLOOR));
    let l = tape.ln(pf);
    let s = tape.sum_all(l);
    tape.scale(s, S::from_f64(-std::f64::consts::LOG2_E))
}

fn noise_array<S: Scalar>(rng: &mut ChaCha8Rng, dim: (usize, usize, usize)) -> Array3<S> {
    Array3::from_shape_fn(dim, |_| S::from_f64(rng.gen::<f64>() - 0.5))
}

fn anchor_mask<S: Scalar>(c: usize, h: usize, w: usize) -> Array3<S> {
    Array3::from_shape_fn((c, h, w), |(_, i, j)| {
        if is_anchor(i, j) {
            S::one()
        } else {
            S::zero()
        }
    })
}

/// Trace the full training objective for one group onto `tape`. Returns
/// the loss node and its evaluated breakdown. The rate term sees
/// noise-quantized latents through the context model (restricted to the
/// anchor half for the checkerboard variant, matching what the decoder
/// conditions on); the reconstruction path sees straight-through rounded
/// latents, so gradients reach the encoder through both terms.
pub fn trace_group_loss<S: Scalar>(
    tape: &mut Tape<S>,
    model: &Model<S>,
    views: &[Array3<S>],
    lambda: f64,
    metric: Metric,
    noise_rng: &mut ChaCha8Rng,
) -> Result<(Var, LossBreakdown)> {
    let Some(first) = views.first() else {
        return Err(Error::Shape("empty group".into()));
    };
    let (c, h, w) = first.dim();
    if c != 3 {
        return Err(Error::Shape(format!("views must be RGB, got {c} channels")));
    }
    if h % TOTAL_STRIDE != 0 || w % TOTAL_STRIDE != 0 {
        return Err(Error::Shape(format!(
            "training patches must align to the {TOTAL_STRIDE}-pixel stride, got {h}x{w}"
        )));
    }
    if views.iter().any(|v| v.dim() != first.dim()) {
        return Err(Error::Shape("views must share one shape".into()));
    }
    let k = views.len();
    let pixels = k * h * w;

    let xs: Vec<Var> = views.iter().map(|v| tape.constant3(v.clone())).collect();
    let ys = model.trace_analysis(tape, &xs)?;
    let prior = model.prior_vars(tape);

    let mut bit_terms = Vec::with_capacity(2 * k);
    let mut y_hats = Vec::with_capacity(k);
    for &y in &ys {
        let ydim = {
            let s = tape.value(y).shape();
            (s[0], s[1], s[2])
        };
        let z = model.trace_hyper_analysis(tape, y);
        let zdim = {
            let s = tape.value(z).shape();
            (s[0], s[1], s[2])
        };
        // noise draws in a fixed order: y first, then z
        let uy = tape.constant3(noise_array(noise_rng, ydim));
        let uz = tape.constant3(noise_array(noise_rng, zdim));
        let y_t = tape.add(y, uy);
        let z_t = tape.add(z, uz);

        let pz = tape.factorized_likelihood(z_t, &prior);
        bit_terms.push(bits_from_likelihood(tape, pz));

        let z_hat = tape.round_ste(z);
        let hyper = model.trace_hyper_synthesis(tape, z_hat);

        let ctx_in = match model.cfg.variant.context_kind() {
            ContextKind::Autoregressive => y_t,
            ContextKind::Checkerboard => {
                let mask = tape.constant3(anchor_mask(ydim.0, ydim.1, ydim.2));
                tape.mul(y_t, mask)
            }
        };
        let ctx = model.trace_context(tape, ctx_in);
        let (mu, sigma) = model.trace_entropy_params(tape, hyper, ctx);
        let py = tape.gaussian_likelihood(y_t, mu, sigma);
        bit_terms.push(bits_from_likelihood(tape, py));

        let centered = tape.sub(y, mu);
        let rounded = tape.round_ste(centered);
        y_hats.push(tape.add(rounded, mu));
    }

    let recons = model.trace_synthesis(tape, &y_hats)?;
    let per_view: Vec<Var> = recons
        .iter()
        .zip(&xs)
        .map(|(&xh, &x)| match metric {
            Metric::Mse => {
                let d = tape.sub(xh, x);
                let sq = tape.mul(d, d);
                Ok(tape.mean_all(sq))
            }
            Metric::MsSsim => {
                let s = crate::metrics::ms_ssim_trace(tape, x, xh)?;
                let n = tape.neg(s);
                Ok(tape.add_const(n, S::one()))
            }
        })
        .collect::<Result<_>>()?;
    let d_sum = tape.add_n(&per_view);
    let distortion = tape.scale(d_sum, S::from_f64(1.0 / k as f64));

    let bits = tape.add_n(&bit_terms);
    let rate = tape.scale(bits, S::from_f64(1.0 / pixels as f64));
    let ld = tape.scale(distortion, S::from_f64(lambda));
    let loss = tape.add(ld, rate);

    let breakdown = rd_loss(
        Scalar::to_f64(tape.scalar_value(distortion)),
        Scalar::to_f64(tape.scalar_value(bits)),
        lambda,
        pixels,
    )?;
    Ok((loss, breakdown))
}

// ---- optimizer --------------------------------------------------------

/// Adam with bias correction; update moments are kept per parameter.
pub struct Adam<S: Scalar> {
    m: Vec<ArrayD<S>>,
    v: Vec<ArrayD<S>>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        let zeros: Vec<ArrayD<S>> = (0..store.len())
            .map(|i| ArrayD::zeros(store.get(ParamId(i)).raw_dim()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Apply one update from per-parameter gradients (indexed by
    /// parameter id; missing or non-trainable entries are skipped).
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[Option<ArrayD<S>>], lr: f64) {
        self.t += 1;
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one = S::one();
        let corr1 = 1.0 - self.beta1.powi(self.t);
        let corr2 = 1.0 - self.beta2.powi(self.t);
        let scale = S::from_f64(lr / corr1);
        let corr2_sqrt = S::from_f64(corr2.sqrt());
        let eps = S::from_f64(self.eps);
        for (idx, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let id = ParamId(idx);
            if !store.is_trainable(id) {
                continue;
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = b1 * *m + (one - b1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = b2 * *v + (one - b2) * g * g;
            });
            let value = store.get_mut(id);
            ndarray::Zip::from(value).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p = *p - scale * m / (v.sqrt() / corr2_sqrt + eps);
            });
        }
    }
}

/// L2 norm over the trainable entries of a gradient set.
pub fn global_grad_norm<S: Scalar>(store: &ParamStore<S>, grads: &[Option<ArrayD<S>>]) -> f64 {
    let mut acc = 0.0f64;
    for (idx, grad) in grads.iter().enumerate() {
        let Some(g) = grad else { continue };
        if !store.is_trainable(ParamId(idx)) {
            continue;
        }
        acc += g.iter().map(|&x| {
            let x = Scalar::to_f64(x);
            x * x
        }).sum::<f64>();
    }
    acc.sqrt()
}

// ---- epoch loop -------------------------------------------------------

/// Loop hyperparameters; the model wiring lives in [`ModelConfig`].
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Square patch side; must be a positive multiple of the total stride.
    pub crop: usize,
    pub base_lr: f64,
    pub grad_clip: f64,
    pub metric: Metric,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 2048.0,
            epochs: 1,
            batch_size: 8,
            crop: 256,
            base_lr: BASE_LR,
            grad_clip: GRAD_CLIP_NORM,
            metric: Metric::Mse,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.crop == 0 || self.crop % TOTAL_STRIDE != 0 {
            return Err(Error::Config(format!(
                "crop must be a positive multiple of {TOTAL_STRIDE}, got {}",
                self.crop
            )));
        }
        if self.metric == Metric::MsSsim && self.crop < crate::metrics::MS_SSIM_MIN_SIDE {
            return Err(Error::Config(format!(
                "structural-metric training needs crop >= {}, got {}",
                crate::metrics::MS_SSIM_MIN_SIDE,
                self.crop
            )));
        }
        if !(self.base_lr > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("base_lr and grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// One optimizer step's log record.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lambda: f64,
    pub variant: Variant,
    pub loss: f64,
    pub distortion: f64,
    pub rate_bpp: f64,
    pub lr: f64,
}

/// Header of the step-metrics CSV.
pub const STEP_CSV_HEADER: &str = "epoch,step,lambda,variant,loss,distortion_mse,rate_bpp,lr";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.lambda,
            self.variant,
            self.loss,
            self.distortion,
            self.rate_bpp,
            self.lr
        )
    }
}

fn accumulate_group_grads<S: Scalar>(
    tape: &Tape<S>,
    loss: Var,
    n_params: usize,
) -> Vec<Option<ArrayD<S>>> {
    let grads = tape.backward(loss);
    let mut out: Vec<Option<ArrayD<S>>> = vec![None; n_params];
    for &(id, var) in tape.params_used() {
        if let Some(g) = grads.get(var) {
            match &mut out[id.0] {
                Some(acc) => *acc += g,
                slot => *slot = Some(g.clone()),
            }
        }
    }
    out
}

/// Train `model` in place over the dataset; returns the per-step records.
/// Deterministic for a fixed config. `log` appends CSV rows; `checkpoint`
/// is rewritten before the first epoch and after every completed epoch,
/// so on divergence it retains the last finite weights.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    cfg: &TrainConfig,
    index: &DatasetIndex,
    log: Option<&Path>,
    checkpoint: Option<&Path>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if index.groups.is_empty() {
        return Err(Error::Schema("dataset has no groups".into()));
    }
    let mut log_file = match log {
        Some(p) => {
            let fresh = !p.exists() || std::fs::metadata(p).map(|m| m.len() == 0).unwrap_or(true);
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(io_err(p))?;
            if fresh {
                writeln!(f, "{STEP_CSV_HEADER}").map_err(io_err(p))?;
            }
            Some((f, p.to_path_buf()))
        }
        None => None,
    };
    let save = |model: &Model<S>| -> Result<()> {
        if let Some(p) = checkpoint {
            crate::data::save_checkpoint(p, model, cfg.lambda as f32)?;
        }
        Ok(())
    };
    save(model)?;

    let n_params = model.store.len();
    let mut adam = Adam::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::new();

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(cfg.base_lr, epoch);
        let mut order: Vec<usize> = (0..index.groups.len()).collect();
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            // draw all per-group randomness up front so the parallel map
            // cannot perturb the stream
            let jobs: Vec<(usize, u64, u64)> = chunk
                .iter()
                .map(|&g| (g, rng.gen(), rng.gen()))
                .collect();
            let results: Vec<Result<(Vec<Option<ArrayD<S>>>, LossBreakdown)>> = jobs
                .par_iter()
                .map(|&(g, aug_seed, noise_seed)| {
                    let views: Vec<Array3<S>> = index.load_group(g)?;
                    let mut aug_rng = ChaCha8Rng::seed_from_u64(aug_seed);
                    let views = augment_group(&views, cfg.crop, &mut aug_rng)?;
                    let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);
                    let mut tape = Tape::new();
                    let (loss, bd) = trace_group_loss(
                        &mut tape,
                        model,
                        &views,
                        cfg.lambda,
                        cfg.metric,
                        &mut noise,
                    )?;
                    Ok((accumulate_group_grads(&tape, loss, n_params), bd))
                })
                .collect();

            // ordered, sequential reduction keeps the update deterministic
            let mut grads: Vec<Option<ArrayD<S>>> = vec![None; n_params];
            let mut d_sum = 0.0;
            let mut r_sum = 0.0;
            let batch = chunk.len();
            for res in results {
                let (g, bd) = res.map_err(|e| match e {
                    Error::Diverged { detail, .. } => Error::Diverged { epoch, step, detail },
                    other => other,
                })?;
                d_sum += bd.distortion;
                r_sum += bd.rate_bpp;
                for (slot, part) in grads.iter_mut().zip(g) {
                    match (slot.as_mut(), part) {
                        (Some(acc), Some(p)) => *acc += &p,
                        (None, Some(p)) => *slot = Some(p),
                        _ => {}
                    }
                }
            }
            let inv = S::from_f64(1.0 / batch as f64);
            for g in grads.iter_mut().flatten() {
                g.mapv_inplace(|x| x * inv);
            }

            let norm = global_grad_norm(&model.store, &grads);
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("non-finite gradient norm {norm}"),
                });
            }
            if norm > cfg.grad_clip {
                let f = S::from_f64(cfg.grad_clip / norm);
                for g in grads.iter_mut().flatten() {
                    g.mapv_inplace(|x| x * f);
                }
            }
            adam.step(&mut model.store, &grads, lr);

            let distortion = d_sum / batch as f64;
            let rate_bpp = r_sum / batch as f64;
            let loss = cfg.lambda * distortion + rate_bpp;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("non-finite loss (D {distortion}, R {rate_bpp})"),
                });
            }
            let rec = StepRecord {
                epoch,
                step,
                lambda: cfg.lambda,
                variant: model.cfg.variant,
                loss,
                distortion,
                rate_bpp,
                lr,
            };
            if let Some((f, p)) = &mut log_file {
                writeln!(f, "{}", rec.csv_row()).map_err(io_err(p.as_path()))?;
            }
            records.push(rec);
        }
        save(model)?;
    }
    Ok(records)
}
