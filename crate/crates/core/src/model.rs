//! The multi-view codec model: per-view analysis/synthesis transforms, the
//! hyperprior, the causal context model, and the conditional entropy
//! parameter network, assembled per variant.
//!
//! Encoding is distributed: each view runs the same analysis transform and
//! hyper encoder independently, with no access to other views. Decoding is
//! joint: all views' latents are synthesized together, exchanging
//! information through joint-context-transfer modules placed before the
//! first and third upsampling layers. Ablation variants move or remove
//! those modules, swap the causal context model, or change the fusion.
//!
//! Latents are `M` channels at 1/16 spatial resolution; hyper-latents are
//! `N` channels at 1/64. The entropy parameter network maps the
//! concatenated hyper features (`2M`) and causal context (`2M`) through
//! three 1x1 convolutions (`4M -> 3M -> 2M -> 2M`) to a per-element mean
//! and scale; scales are `max(|raw|, SIGMA_FLOOR)`.

use crate::entropy::factorized::{self, LayerView};
use crate::entropy::{context::context_mask, ContextKind, SIGMA_FLOOR};
use crate::error::{Error, Result};
use crate::graph::{FactorizedVars, Tape, Var};
use crate::jct::{AttnStats, Fusion, Jct, JctConfig};
use crate::nn::{leaky_relu_arr, Conv2d, ConvT2d, Gdn, ParamId, ParamStore, LEAKY_SLOPE};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Array3, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::str::FromStr;
use std::sync::Arc;

/// Latent spatial stride of the analysis transform (four stride-2 layers).
pub const LATENT_STRIDE: usize = 16;
/// Total stride including the hyper encoder; inputs are padded to
/// multiples of this.
pub const TOTAL_STRIDE: usize = 64;

/// Model variants. The wire byte is stable across releases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Full model: distributed encoders, joint decoder with attention
    /// fusion, serial autoregressive context.
    Ldmic,
    /// Full model with the two-pass checkerboard context (parallel decode).
    LdmicFast,
    /// Separate encoders *and* separate decoders (no cross-view modules).
    SepEncDec,
    /// Joint encoder and joint decoder (non-distributed upper reference).
    JointEncDec,
    /// Encoder and entropy model frozen from a separately trained
    /// single-view model; only the joint decoder trains.
    FrozenEncoder,
    /// Attention fusion replaced by concatenation + 1x1 conv.
    ConcatFusion,
}

pub const ALL_VARIANTS: [Variant; 6] = [
    Variant::Ldmic,
    Variant::LdmicFast,
    Variant::SepEncDec,
    Variant::JointEncDec,
    Variant::FrozenEncoder,
    Variant::ConcatFusion,
];

impl Variant {
    pub fn wire_byte(self) -> u8 {
        match self {
            Variant::Ldmic => 0,
            Variant::LdmicFast => 1,
            Variant::SepEncDec => 2,
            Variant::JointEncDec => 3,
            Variant::FrozenEncoder => 4,
            Variant::ConcatFusion => 5,
        }
    }

    pub fn from_wire_byte(b: u8) -> Result<Self> {
        ALL_VARIANTS
            .iter()
            .copied()
            .find(|v| v.wire_byte() == b)
            .ok_or_else(|| Error::Parse(format!("unknown variant byte {b}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ldmic => "ldmic",
            Variant::LdmicFast => "ldmic_fast",
            Variant::SepEncDec => "sep_enc_dec",
            Variant::JointEncDec => "joint_enc_dec",
            Variant::FrozenEncoder => "frozen_encoder",
            Variant::ConcatFusion => "concat_fusion",
        }
    }

    /// True when each view is encoded with no access to the others.
    pub fn is_distributed_encoder(self) -> bool {
        !matches!(self, Variant::JointEncDec)
    }

    pub fn context_kind(self) -> ContextKind {
        match self {
            Variant::LdmicFast => ContextKind::Checkerboard,
            _ => ContextKind::Autoregressive,
        }
    }

    pub fn has_decoder_jct(self) -> bool {
        !matches!(self, Variant::SepEncDec)
    }

    pub fn has_encoder_jct(self) -> bool {
        matches!(self, Variant::JointEncDec)
    }

    pub fn fusion(self) -> Fusion {
        match self {
            Variant::ConcatFusion => Fusion::Concat,
            _ => Fusion::Attention,
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ALL_VARIANTS
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant '{s}' (expected one of: {})",
                    ALL_VARIANTS.map(|v| v.name()).join(", ")
                ))
            })
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture hyper-parameters.
#[derive(Debug, Clone, Copy)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Latent channels `M`.
    pub latent_channels: usize,
    /// Hyper-latent channels `N`.
    pub hyper_channels: usize,
    /// Attention heads in the joint-context-transfer modules.
    pub heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Ldmic,
            latent_channels: 192,
            hyper_channels: 128,
            heads: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels < 8 || self.latent_channels % 8 != 0 {
            return Err(Error::Config(format!(
                "latent channels must be a positive multiple of 8, got {}",
                self.latent_channels
            )));
        }
        if self.hyper_channels == 0 {
            return Err(Error::Config("hyper channels must be positive".into()));
        }
        self.jct_config().validate()
    }

    fn jct_config(&self) -> JctConfig {
        JctConfig {
            channels: self.latent_channels,
            heads: self.heads,
            fusion: self.variant.fusion(),
        }
    }
}

/// Raw-parameter handles of the factorized hyper-latent prior.
#[derive(Debug, Clone)]
pub struct PriorParams {
    pub h: Vec<ParamId>,
    pub b: Vec<ParamId>,
    pub a: Vec<Option<ParamId>>,
}

/// The complete parameterized codec for one variant.
#[derive(Debug)]
pub struct Model<S: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParamStore<S>,
    pub a_conv: Vec<Conv2d>,
    pub a_gdn: Vec<Gdn>,
    /// Encoder-side joint context transfer (joint-encoder variant only),
    /// applied after the second and fourth analysis layers.
    pub enc_jct: Option<(Jct, Jct)>,
    pub ha_conv: Vec<Conv2d>,
    pub hs_up1: ConvT2d,
    pub hs_up2: ConvT2d,
    pub hs_out: Conv2d,
    pub ctx_conv: Conv2d,
    pub ep_conv: Vec<Conv2d>,
    pub s_deconv: Vec<ConvT2d>,
    pub s_igdn: Vec<Gdn>,
    /// Decoder-side joint context transfer, applied before the first and
    /// third upsampling layers.
    pub dec_jct: Option<(Jct, Jct)>,
    pub prior: PriorParams,
}

/// Parameter-name prefixes of everything a decoder does *not* own: the
/// analysis transform, hyper transforms, context model, entropy parameter
/// network, and hyper-latent prior. The frozen-encoder variant copies and
/// freezes exactly these.
pub const ENCODER_SIDE_PREFIXES: [&str; 6] = [
    "analysis.",
    "hyper_analysis.",
    "hyper_synthesis.",
    "context.",
    "ep.",
    "prior.",
];

pub const DECODER_SIDE_PREFIX: &str = "synthesis.";

impl<S: Scalar> Model<S> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let m = cfg.latent_channels;
        let n = cfg.hyper_channels;
        let jcfg = cfg.jct_config();

        // analysis: conv1 gdn1 conv2 gdn2 [jct] conv3 gdn3 conv4 [jct]
        let mut a_conv = Vec::new();
        let mut a_gdn = Vec::new();
        a_conv.push(Conv2d::new(&mut store, &mut rng, "analysis.conv1", 3, m, 5, 2, 2, true));
        a_gdn.push(Gdn::new(&mut store, "analysis.gdn1", m, false));
        a_conv.push(Conv2d::new(&mut store, &mut rng, "analysis.conv2", m, m, 5, 2, 2, true));
        a_gdn.push(Gdn::new(&mut store, "analysis.gdn2", m, false));
        let enc_jct = if cfg.variant.has_encoder_jct() {
            let j1 = Jct::new(&mut store, &mut rng, "analysis.jct1", jcfg)?;
            Some(j1)
        } else {
            None
        };
        a_conv.push(Conv2d::new(&mut store, &mut rng, "analysis.conv3", m, m, 5, 2, 2, true));
        a_gdn.push(Gdn::new(&mut store, "analysis.gdn3", m, false));
        a_conv.push(Conv2d::new(&mut store, &mut rng, "analysis.conv4", m, m, 5, 2, 2, true));
        let enc_jct = match enc_jct {
            Some(j1) => {
                let j2 = Jct::new(&mut store, &mut rng, "analysis.jct2", jcfg)?;
                Some((j1, j2))
            }
            None => None,
        };

        // hyper encoder: 3x3 s1, then two 5x5 s2
        let ha_conv = vec![
            Conv2d::new(&mut store, &mut rng, "hyper_analysis.conv1", m, n, 3, 1, 1, true),
            Conv2d::new(&mut store, &mut rng, "hyper_analysis.conv2", n, n, 5, 2, 2, true),
            Conv2d::new(&mut store, &mut rng, "hyper_analysis.conv3", n, n, 5, 2, 2, true),
        ];

        // hyper decoder: mirrored, widening to 2M conditioning channels
        let mid = m + m / 2;
        let hs_up1 = ConvT2d::new(&mut store, &mut rng, "hyper_synthesis.up1", n, m, 5, 2, 2, 1, true);
        let hs_up2 = ConvT2d::new(&mut store, &mut rng, "hyper_synthesis.up2", m, mid, 5, 2, 2, 1, true);
        let hs_out = Conv2d::new(&mut store, &mut rng, "hyper_synthesis.out", mid, 2 * m, 3, 1, 1, true);

        // causal context over decoded latents
        let ctx_conv = Conv2d::new(&mut store, &mut rng, "context.conv", m, 2 * m, 5, 1, 2, true);

        // entropy parameters: 1x1 chain 4M -> 3M -> 2M -> 2M
        let ep_conv = vec![
            Conv2d::new(&mut store, &mut rng, "ep.conv1", 4 * m, 3 * m, 1, 1, 0, true),
            Conv2d::new(&mut store, &mut rng, "ep.conv2", 3 * m, 2 * m, 1, 1, 0, true),
            Conv2d::new(&mut store, &mut rng, "ep.conv3", 2 * m, 2 * m, 1, 1, 0, true),
        ];

        // hyper-latent prior
        let owned = factorized::init_layers::<S, _>(&mut rng, n, factorized::DEFAULT_FILTERS, 10.0);
        let mut prior = PriorParams {
            h: Vec::new(),
            b: Vec::new(),
            a: Vec::new(),
        };
        for (i, h) in owned.h.iter().enumerate() {
            prior
                .h
                .push(store.register(format!("prior.h{i}"), h.clone().into_dyn()));
        }
        for (i, b) in owned.b.iter().enumerate() {
            prior
                .b
                .push(store.register(format!("prior.b{i}"), b.clone().into_dyn()));
        }
        for (i, a) in owned.a.iter().enumerate() {
            prior.a.push(
                a.as_ref()
                    .map(|a| store.register(format!("prior.a{i}"), a.clone().into_dyn())),
            );
        }

        // synthesis: [jct] deconv1 igdn1 deconv2 igdn2 [jct] deconv3 igdn3 deconv4
        let dec_jct = if cfg.variant.has_decoder_jct() {
            let j1 = Jct::new(&mut store, &mut rng, "synthesis.jct1", jcfg)?;
            let j2 = Jct::new(&mut store, &mut rng, "synthesis.jct2", jcfg)?;
            Some((j1, j2))
        } else {
            None
        };
        let s_deconv = vec![
            ConvT2d::new(&mut store, &mut rng, "synthesis.deconv1", m, m, 5, 2, 2, 1, true),
            ConvT2d::new(&mut store, &mut rng, "synthesis.deconv2", m, m, 5, 2, 2, 1, true),
            ConvT2d::new(&mut store, &mut rng, "synthesis.deconv3", m, m, 5, 2, 2, 1, true),
            ConvT2d::new(&mut store, &mut rng, "synthesis.deconv4", m, 3, 5, 2, 2, 1, true),
        ];
        let s_igdn = vec![
            Gdn::new(&mut store, "synthesis.igdn1", m, true),
            Gdn::new(&mut store, "synthesis.igdn2", m, true),
            Gdn::new(&mut store, "synthesis.igdn3", m, true),
        ];

        Ok(Self {
            cfg,
            store,
            a_conv,
            a_gdn,
            enc_jct,
            ha_conv,
            hs_up1,
            hs_up2,
            hs_out,
            ctx_conv,
            ep_conv,
            s_deconv,
            s_igdn,
            dec_jct,
            prior,
        })
    }

    /// Kernel mask of the causal context model for this variant.
    pub fn context_mask_arr(&self) -> Array2<S> {
        context_mask(self.cfg.variant.context_kind(), self.ctx_conv.k)
    }

    // ---- analysis ----------------------------------------------------

    fn analysis_front(&self, x: ArrayView3<S>) -> Array3<S> {
        let h = self.a_conv[0].apply(&self.store, x);
        let h = self.a_gdn[0].apply(&self.store, h.view());
        let h = self.a_conv[1].apply(&self.store, h.view());
        self.a_gdn[1].apply(&self.store, h.view())
    }

    fn analysis_back(&self, h: ArrayView3<S>) -> Array3<S> {
        let h = self.a_conv[2].apply(&self.store, h);
        let h = self.a_gdn[2].apply(&self.store, h.view());
        self.a_conv[3].apply(&self.store, h.view())
    }

    /// Independent single-view analysis transform (distributed encoding).
    /// Errors for the joint-encoder variant, whose encoder needs all views.
    pub fn analysis_apply(&self, x: ArrayView3<S>) -> Result<Array3<S>> {
        if self.cfg.variant.has_encoder_jct() {
            return Err(Error::Variant(format!(
                "variant {} encodes views jointly; single-view analysis is undefined",
                self.cfg.variant
            )));
        }
        let h = self.analysis_front(x);
        Ok(self.analysis_back(h.view()))
    }

    /// Joint analysis over all views (joint-encoder variant only).
    pub fn joint_analysis_apply(&self, xs: &[Array3<S>]) -> Result<Vec<Array3<S>>> {
        let Some((jct1, jct2)) = &self.enc_jct else {
            return Err(Error::Variant(format!(
                "variant {} uses distributed encoding; joint analysis is undefined",
                self.cfg.variant
            )));
        };
        let fronts: Vec<Array3<S>> = xs.iter().map(|x| self.analysis_front(x.view())).collect();
        let (mixed, _) = jct1.forward(&self.store, &fronts)?;
        let backs: Vec<Array3<S>> = mixed.iter().map(|h| self.analysis_back(h.view())).collect();
        let (out, _) = jct2.forward(&self.store, &backs)?;
        Ok(out)
    }

    /// Traced analysis for all views of a group (training path). Applies
    /// the encoder-side context transfer when the variant has one.
    pub fn trace_analysis(&self, tape: &mut Tape<S>, xs: &[Var]) -> Result<Vec<Var>> {
        let fronts: Vec<Var> = xs
            .iter()
            .map(|&x| {
                let h = self.a_conv[0].trace(tape, &self.store, x);
                let h = self.a_gdn[0].trace(tape, &self.store, h);
                let h = self.a_conv[1].trace(tape, &self.store, h);
                self.a_gdn[1].trace(tape, &self.store, h)
            })
            .collect();
        let fronts = match &self.enc_jct {
            Some((jct1, _)) => jct1.trace_forward(tape, &self.store, &fronts)?,
            None => fronts,
        };
        let backs: Vec<Var> = fronts
            .iter()
            .map(|&h| {
                let h = self.a_conv[2].trace(tape, &self.store, h);
                let h = self.a_gdn[2].trace(tape, &self.store, h);
                self.a_conv[3].trace(tape, &self.store, h)
            })
            .collect();
        match &self.enc_jct {
            Some((_, jct2)) => jct2.trace_forward(tape, &self.store, &backs),
            None => Ok(backs),
        }
    }

    // ---- hyperprior --------------------------------------------------

    pub fn hyper_analysis_apply(&self, y: ArrayView3<S>) -> Array3<S> {
        let h = self.ha_conv[0].apply(&self.store, y);
        let h = leaky_relu_arr(&h);
        let h = self.ha_conv[1].apply(&self.store, h.view());
        let h = leaky_relu_arr(&h);
        self.ha_conv[2].apply(&self.store, h.view())
    }

    pub fn trace_hyper_analysis(&self, tape: &mut Tape<S>, y: Var) -> Var {
        let slope = S::from_f64(LEAKY_SLOPE);
        let h = self.ha_conv[0].trace(tape, &self.store, y);
        let h = tape.leaky_relu(h, slope);
        let h = self.ha_conv[1].trace(tape, &self.store, h);
        let h = tape.leaky_relu(h, slope);
        self.ha_conv[2].trace(tape, &self.store, h)
    }

    pub fn hyper_synthesis_apply(&self, z: ArrayView3<S>) -> Array3<S> {
        let h = self.hs_up1.apply(&self.store, z);
        let h = leaky_relu_arr(&h);
        let h = self.hs_up2.apply(&self.store, h.view());
        let h = leaky_relu_arr(&h);
        self.hs_out.apply(&self.store, h.view())
    }

    pub fn trace_hyper_synthesis(&self, tape: &mut Tape<S>, z: Var) -> Var {
        let slope = S::from_f64(LEAKY_SLOPE);
        let h = self.hs_up1.trace(tape, &self.store, z);
        let h = tape.leaky_relu(h, slope);
        let h = self.hs_up2.trace(tape, &self.store, h);
        let h = tape.leaky_relu(h, slope);
        self.hs_out.trace(tape, &self.store, h)
    }

    // ---- context + entropy parameters --------------------------------

    /// Full-image causal context: the masked conv over decoded (or
    /// surrogate) latents. Causality lives in the mask, so evaluating on
    /// the complete latent plane equals the sequential evaluation.
    pub fn context_apply(&self, y_hat: ArrayView3<S>) -> Array3<S> {
        let mask = self.context_mask_arr();
        self.ctx_conv.apply_masked(&self.store, y_hat, &mask)
    }

    pub fn trace_context(&self, tape: &mut Tape<S>, y_hat: Var) -> Var {
        let mask = Arc::new(self.context_mask_arr());
        self.ctx_conv.trace_masked(tape, &self.store, y_hat, mask)
    }

    /// `(hyper 2M, ctx 2M) -> (mu M, sigma M)`; `sigma` is floored.
    pub fn entropy_params_apply<'a>(
        &self,
        hyper: ArrayView3<'a, S>,
        ctx: ArrayView3<'a, S>,
    ) -> (Array3<S>, Array3<S>) {
        let cat = ndarray::concatenate(Axis(0), &[hyper, ctx]).expect("ep concat shapes");
        let h = self.ep_conv[0].apply(&self.store, cat.view());
        let h = leaky_relu_arr(&h);
        let h = self.ep_conv[1].apply(&self.store, h.view());
        let h = leaky_relu_arr(&h);
        let out = self.ep_conv[2].apply(&self.store, h.view());
        let m = self.cfg.latent_channels;
        let mu = out.slice(ndarray::s![..m, .., ..]).to_owned();
        let floor = S::from_f64(SIGMA_FLOOR);
        let sigma = out
            .slice(ndarray::s![m.., .., ..])
            .mapv(|v| v.abs().max(floor));
        (mu, sigma)
    }

    /// Traced entropy parameters; the scale uses `lower_bound` so the
    /// gradient can still push a clipped scale back above the floor.
    pub fn trace_entropy_params(
        &self,
        tape: &mut Tape<S>,
        hyper: Var,
        ctx: Var,
    ) -> (Var, Var) {
        let slope = S::from_f64(LEAKY_SLOPE);
        let cat = tape.concat(0, &[hyper, ctx]);
        let h = self.ep_conv[0].trace(tape, &self.store, cat);
        let h = tape.leaky_relu(h, slope);
        let h = self.ep_conv[1].trace(tape, &self.store, h);
        let h = tape.leaky_relu(h, slope);
        let out = self.ep_conv[2].trace(tape, &self.store, h);
        let m = self.cfg.latent_channels;
        let mu = tape.slice_axis(out, 0, 0, m);
        let raw = tape.slice_axis(out, 0, m, m);
        let raw = tape.abs(raw);
        let sigma = tape.lower_bound(raw, S::from_f64(SIGMA_FLOOR));
        (mu, sigma)
    }

    // ---- synthesis ---------------------------------------------------

    /// Joint synthesis of all views' quantized latents into images.
    /// Returns attention instrumentation from the context-transfer sites
    /// when the variant has them.
    pub fn joint_synthesis_apply(
        &self,
        ys: &[Array3<S>],
    ) -> Result<(Vec<Array3<S>>, Option<AttnStats>)> {
        let mut stats = None;
        let feats: Vec<Array3<S>> = match &self.dec_jct {
            Some((jct1, _)) => {
                let (f, s) = jct1.forward(&self.store, ys)?;
                if s.is_some() {
                    stats = s;
                }
                f
            }
            None => ys.to_vec(),
        };
        let mids: Vec<Array3<S>> = feats
            .iter()
            .map(|y| {
                let h = self.s_deconv[0].apply(&self.store, y.view());
                let h = self.s_igdn[0].apply(&self.store, h.view());
                let h = self.s_deconv[1].apply(&self.store, h.view());
                self.s_igdn[1].apply(&self.store, h.view())
            })
            .collect();
        let mids: Vec<Array3<S>> = match &self.dec_jct {
            Some((_, jct2)) => {
                let (f, s) = jct2.forward(&self.store, &mids)?;
                if s.is_some() {
                    stats = s;
                }
                f
            }
            None => mids,
        };
        let outs = mids
            .iter()
            .map(|h| {
                let h = self.s_deconv[2].apply(&self.store, h.view());
                let h = self.s_igdn[2].apply(&self.store, h.view());
                self.s_deconv[3].apply(&self.store, h.view())
            })
            .collect();
        Ok((outs, stats))
    }

    pub fn trace_synthesis(&self, tape: &mut Tape<S>, ys: &[Var]) -> Result<Vec<Var>> {
        let feats: Vec<Var> = match &self.dec_jct {
            Some((jct1, _)) => jct1.trace_forward(tape, &self.store, ys)?,
            None => ys.to_vec(),
        };
        let mids: Vec<Var> = feats
            .iter()
            .map(|&y| {
                let h = self.s_deconv[0].trace(tape, &self.store, y);
                let h = self.s_igdn[0].trace(tape, &self.store, h);
                let h = self.s_deconv[1].trace(tape, &self.store, h);
                self.s_igdn[1].trace(tape, &self.store, h)
            })
            .collect();
        let mids: Vec<Var> = match &self.dec_jct {
            Some((_, jct2)) => jct2.trace_forward(tape, &self.store, &mids)?,
            None => mids,
        };
        Ok(mids
            .iter()
            .map(|&h| {
                let h = self.s_deconv[2].trace(tape, &self.store, h);
                let h = self.s_igdn[2].trace(tape, &self.store, h);
                self.s_deconv[3].trace(tape, &self.store, h)
            })
            .collect())
    }

    // ---- prior -------------------------------------------------------

    /// Borrowed views of the hyper-latent prior parameters.
    pub fn prior_views(&self) -> Vec<LayerView<'_, S>> {
        (0..self.prior.h.len())
            .map(|i| LayerView {
                h: self
                    .store
                    .get(self.prior.h[i])
                    .view()
                    .into_dimensionality()
                    .unwrap(),
                b: self
                    .store
                    .get(self.prior.b[i])
                    .view()
                    .into_dimensionality()
                    .unwrap(),
                a: self.prior.a[i].map(|a| {
                    self.store.get(a).view().into_dimensionality().unwrap()
                }),
            })
            .collect()
    }

    /// Prior parameters as tape variables (training path).
    pub fn prior_vars(&self, tape: &mut Tape<S>) -> Vec<FactorizedVars> {
        (0..self.prior.h.len())
            .map(|i| FactorizedVars {
                h: tape.param(&self.store, self.prior.h[i]),
                b: tape.param(&self.store, self.prior.b[i]),
                a: self.prior.a[i].map(|a| tape.param(&self.store, a)),
            })
            .collect()
    }

    /// Weight/bias of each 1x1 entropy-parameter conv as dense matrices,
    /// for per-position evaluation during sequential decoding.
    pub fn ep_dense(&self) -> Vec<(Array2<S>, Array1<S>)> {
        self.ep_conv
            .iter()
            .map(|c| {
                let w = self
                    .store
                    .get(c.w)
                    .view()
                    .into_shape_with_order((c.out_c, c.in_c))
                    .unwrap()
                    .to_owned();
                let b = c
                    .b
                    .map(|b| {
                        self.store
                            .get(b)
                            .view()
                            .into_dimensionality::<ndarray::Ix1>()
                            .unwrap()
                            .to_owned()
                    })
                    .unwrap_or_else(|| Array1::zeros(c.out_c));
                (w, b)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            latent_channels: 16,
            hyper_channels: 8,
            heads: 2,
        }
    }

    fn rand_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array3<f32> {
        Array3::from_shape_fn((3, h, w), |_| rng.gen::<f32>())
    }

    #[test]
    fn variant_wire_bytes_roundtrip() {
        for v in ALL_VARIANTS {
            assert_eq!(Variant::from_wire_byte(v.wire_byte()).unwrap(), v);
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(Variant::from_wire_byte(6).is_err());
        assert!("nope".parse::<Variant>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = ModelConfig::default();
        c.latent_channels = 100; // not a multiple of 8
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.hyper_channels = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.heads = 5; // 48 % 5 != 0
        assert!(c.validate().is_err());
    }

    #[test]
    fn transform_shapes_chain_correctly() {
        let model = Model::<f32>::new(small_cfg(Variant::Ldmic), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_image(&mut rng, 64, 128);
        let y = model.analysis_apply(x.view()).unwrap();
        assert_eq!(y.dim(), (16, 4, 8));
        let z = model.hyper_analysis_apply(y.view());
        assert_eq!(z.dim(), (8, 1, 2));
        let hyper = model.hyper_synthesis_apply(z.mapv(|v| v.round()).view());
        assert_eq!(hyper.dim(), (32, 4, 8));
        let ctx = model.context_apply(y.mapv(|v| v.round()).view());
        assert_eq!(ctx.dim(), (32, 4, 8));
        let (mu, sigma) = model.entropy_params_apply(hyper.view(), ctx.view());
        assert_eq!(mu.dim(), (16, 4, 8));
        assert_eq!(sigma.dim(), (16, 4, 8));
        assert!(sigma.iter().all(|&s| s >= crate::entropy::SIGMA_FLOOR as f32));
        let ys = vec![y.clone(), y];
        let (xs_hat, stats) = model.joint_synthesis_apply(&ys).unwrap();
        assert_eq!(xs_hat.len(), 2);
        assert_eq!(xs_hat[0].dim(), (3, 64, 128));
        let stats = stats.expect("attention sites must report stats");
        // site before deconv3 runs at quarter resolution: n = 16 * 32
        assert_eq!(stats.n, 16 * 32);
    }

    #[test]
    fn distributed_encoding_ignores_other_views() {
        // encoding the same view alongside different companions must
        // produce bit-identical latents for every distributed variant
        for variant in ALL_VARIANTS {
            if !variant.is_distributed_encoder() {
                continue;
            }
            let model = Model::<f32>::new(small_cfg(variant), 3).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let x = rand_image(&mut rng, 64, 64);
            let y1 = model.analysis_apply(x.view()).unwrap();
            let y2 = model.analysis_apply(x.view()).unwrap();
            assert_eq!(y1, y2, "variant {variant}");
        }
    }

    #[test]
    fn joint_encoder_variant_gates_single_view_analysis() {
        let model = Model::<f32>::new(small_cfg(Variant::JointEncDec), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_image(&mut rng, 64, 64);
        assert!(matches!(
            model.analysis_apply(x.view()),
            Err(Error::Variant(_))
        ));
        let xs = vec![x.clone(), x];
        let ys = model.joint_analysis_apply(&xs).unwrap();
        assert_eq!(ys.len(), 2);
        assert_eq!(ys[0].dim(), (16, 4, 4));

        // and the distributed variants gate joint analysis
        let model = Model::<f32>::new(small_cfg(Variant::Ldmic), 5).unwrap();
        assert!(matches!(
            model.joint_analysis_apply(&xs),
            Err(Error::Variant(_))
        ));
    }

    #[test]
    fn sep_variant_has_no_cross_view_modules() {
        let model = Model::<f32>::new(small_cfg(Variant::SepEncDec), 7).unwrap();
        assert!(model.dec_jct.is_none());
        assert!(model.enc_jct.is_none());
        // reconstruction of view 0 must not depend on view 1's latent
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y0 = Array3::from_shape_fn((16, 4, 4), |_| rng.gen::<f32>() - 0.5);
        let y1a = Array3::from_shape_fn((16, 4, 4), |_| rng.gen::<f32>() - 0.5);
        let y1b = Array3::from_shape_fn((16, 4, 4), |_| rng.gen::<f32>() - 0.5);
        let (ra, _) = model.joint_synthesis_apply(&[y0.clone(), y1a]).unwrap();
        let (rb, _) = model.joint_synthesis_apply(&[y0, y1b]).unwrap();
        assert_eq!(ra[0], rb[0]);
    }

    #[test]
    fn joint_decoder_mixes_views() {
        let model = Model::<f32>::new(small_cfg(Variant::Ldmic), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let y0 = Array3::from_shape_fn((16, 4, 4), |_| rng.gen::<f32>() - 0.5);
        let y1a = Array3::from_shape_fn((16, 4, 4), |_| rng.gen::<f32>() - 0.5);
        let y1b = Array3::from_shape_fn((16, 4, 4), |_| rng.gen::<f32>() * 3.0);
        let (ra, _) = model.joint_synthesis_apply(&[y0.clone(), y1a]).unwrap();
        let (rb, _) = model.joint_synthesis_apply(&[y0, y1b]).unwrap();
        let diff: f32 = ra[0]
            .iter()
            .zip(rb[0].iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-4, "joint decoder must use cross-view context");
    }

    #[test]
    fn pure_and_traced_paths_agree() {
        for variant in [Variant::Ldmic, Variant::LdmicFast, Variant::SepEncDec, Variant::ConcatFusion] {
            let model = Model::<f32>::new(small_cfg(variant), 11).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let xs: Vec<Array3<f32>> = (0..2).map(|_| rand_image(&mut rng, 64, 64)).collect();
            let ys_pure: Vec<Array3<f32>> = xs
                .iter()
                .map(|x| model.analysis_apply(x.view()).unwrap())
                .collect();
            let z_pure = model.hyper_analysis_apply(ys_pure[0].view());
            let hyper_pure = model.hyper_synthesis_apply(z_pure.view());
            let ctx_pure = model.context_apply(ys_pure[0].view());
            let (mu_pure, sigma_pure) =
                model.entropy_params_apply(hyper_pure.view(), ctx_pure.view());
            let (recon_pure, _) = model.joint_synthesis_apply(&ys_pure).unwrap();

            let mut tape = crate::graph::Tape::<f32>::new();
            let xv: Vec<_> = xs.iter().map(|x| tape.constant3(x.clone())).collect();
            let yv = model.trace_analysis(&mut tape, &xv).unwrap();
            let zv = model.trace_hyper_analysis(&mut tape, yv[0]);
            let hv = model.trace_hyper_synthesis(&mut tape, zv);
            let cv = model.trace_context(&mut tape, yv[0]);
            let (muv, sigmav) = model.trace_entropy_params(&mut tape, hv, cv);
            let rv = model.trace_synthesis(&mut tape, &yv).unwrap();

            let close = |a: &Array3<f32>, b: &ndarray::ArrayD<f32>| {
                for (x, y) in a.iter().zip(b.iter()) {
                    assert!(
                        (x - y).abs() <= 2e-4 * (1.0 + x.abs()),
                        "variant {variant}: {x} vs {y}"
                    );
                }
            };
            close(&ys_pure[0], tape.value(yv[0]));
            close(&z_pure, tape.value(zv));
            close(&hyper_pure, tape.value(hv));
            close(&ctx_pure, tape.value(cv));
            close(&mu_pure, tape.value(muv));
            close(&sigma_pure, tape.value(sigmav));
            close(&recon_pure[0], tape.value(rv[0]));
        }
    }

    #[test]
    fn model_init_is_deterministic() {
        let a = Model::<f32>::new(small_cfg(Variant::Ldmic), 42).unwrap();
        let b = Model::<f32>::new(small_cfg(Variant::Ldmic), 42).unwrap();
        assert_eq!(a.store.bit_digest(""), b.store.bit_digest(""));
        let c = Model::<f32>::new(small_cfg(Variant::Ldmic), 43).unwrap();
        assert_ne!(a.store.bit_digest(""), c.store.bit_digest(""));
    }

    #[test]
    fn frozen_encoder_prefixes_cover_entropy_path() {
        let sep = Model::<f32>::new(small_cfg(Variant::SepEncDec), 13).unwrap();
        let mut frz = Model::<f32>::new(small_cfg(Variant::FrozenEncoder), 14).unwrap();
        let mut copied = 0;
        for p in ENCODER_SIDE_PREFIXES {
            copied += frz.store.copy_values_by_prefix(&sep.store, p).unwrap();
        }
        assert!(copied > 0);
        for p in ENCODER_SIDE_PREFIXES {
            assert_eq!(
                frz.store.bit_digest(p),
                sep.store.bit_digest(p),
                "prefix {p} must copy bit-exactly"
            );
        }
        // the frozen model's decoder keeps its own (different) parameters
        assert_ne!(
            frz.store.bit_digest(DECODER_SIDE_PREFIX),
            sep.store.bit_digest(DECODER_SIDE_PREFIX)
        );
    }

    #[test]
    fn ep_dense_matches_conv() {
        let model = Model::<f32>::new(small_cfg(Variant::Ldmic), 15).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let hyper = Array3::from_shape_fn((32, 3, 3), |_| rng.gen::<f32>() - 0.5);
        let ctx = Array3::from_shape_fn((32, 3, 3), |_| rng.gen::<f32>() - 0.5);
        let (mu, sigma) = model.entropy_params_apply(hyper.view(), ctx.view());
        let dense = model.ep_dense();
        // evaluate one position by hand through the dense chain
        let (pi, pj) = (1usize, 2usize);
        let mut v = ndarray::Array1::<f32>::zeros(64);
        for c in 0..32 {
            v[c] = hyper[(c, pi, pj)];
            v[32 + c] = ctx[(c, pi, pj)];
        }
        let mut h = v;
        for (li, (w, b)) in dense.iter().enumerate() {
            h = w.dot(&h) + b;
            if li < 2 {
                h.mapv_inplace(|x| if x >= 0.0 { x } else { 0.01 * x });
            }
        }
        for c in 0..16 {
            assert!((h[c] - mu[(c, pi, pj)]).abs() < 1e-4);
            let s = h[16 + c].abs().max(crate::entropy::SIGMA_FLOOR as f32);
            assert!((s - sigma[(c, pi, pj)]).abs() < 1e-4);
        }
    }
}
