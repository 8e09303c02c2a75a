//! The model zoo: the scale-shift flow primitive, the I-frame hyper-prior
//! autoencoder, and the P-frame transforms TAT, SSF, STAT and STAT-SSF.
//!
//! Every P-frame variant decodes
//! `x̂_t = μ̂_t + σ̂_t ⊙ g_v(v̂_t [, ŵ_t])` with `(μ̂_t, σ̂_t)` computed from
//! `x̂_{t-1}` and (except TAT) the decoded motion latent `ŵ_t`:
//!
//! | variant  | μ̂                         | σ̂                     | g_v input |
//! |----------|---------------------------|-----------------------|-----------|
//! | TAT      | x̂ + CNN(x̂)               | gate(CNN(x̂))         | v̂        |
//! | SSF      | warp(x̂, g_w(ŵ))          | 1                     | v̂        |
//! | STAT     | x̂ + CNN(x̂, g_w(ŵ))       | gate(CNN(x̂, g_w(ŵ))) | v̂, ŵ     |
//! | STAT-SSF | warp(x̂, g_w(ŵ)[..3])     | gate(CNN(x̂, g_w(ŵ))) | v̂, ŵ     |
//!
//! The encoder only ever sees `x_t`, `x̂_{t-1}` and already-quantized
//! latents, so it can replay the decoder exactly.

use crate::entropy::{DiscretizedGaussian, FactorizedPrior, HyperSynthesis, Quantizer};
use crate::error::{dim_err, Error, Result};
use crate::nn::{
    analysis_spec, hyper_analysis_spec, pixel_cnn_spec, synthesis_spec, ConvStack, Init, ParamStore,
};
use crate::range_coder::FreqTable;
use crate::scale_space::{build_scale_space_volume, scale_space_warp, FlowField, DEFAULT_SCALE_DEPTH, DEFAULT_SIGMA0};
use crate::tensor::{softplus_inverse, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Floor of the gate `σ̂ = softplus(.) + SIGMA_MIN`.
pub const SIGMA_MIN: f64 = 1e-3;
/// Initial bias of the raw scale channel of the flow head; the scale
/// starts near level 0 (a sharp warp).
pub const FLOW_SCALE_BIAS: f64 = -4.0;
/// Initial scale of the factorized hyper-latent densities.
pub const HYPER_PRIOR_INIT_SCALE: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Tat,
    Ssf,
    Stat,
    StatSsf,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Tat, Variant::Ssf, Variant::Stat, Variant::StatSsf];

    pub fn id(self) -> u8 {
        match self {
            Variant::Tat => 0,
            Variant::Ssf => 1,
            Variant::Stat => 2,
            Variant::StatSsf => 3,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::CorruptStream(format!("unknown variant id {id}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Tat => "tat",
            Variant::Ssf => "ssf",
            Variant::Stat => "stat",
            Variant::StatSsf => "stat-ssf",
        }
    }

    /// Whether the variant has a motion latent `w`.
    pub fn has_w(self) -> bool {
        self != Variant::Tat
    }

    /// Whether `μ̂` is a scale-space warp.
    pub fn warps(self) -> bool {
        matches!(self, Variant::Ssf | Variant::StatSsf)
    }

    /// Whether `σ̂` is learned (otherwise it is 1).
    pub fn gated(self) -> bool {
        self != Variant::Ssf
    }

    /// Whether the residual decoder also reads `ŵ`.
    pub fn residual_reads_w(self) -> bool {
        matches!(self, Variant::Stat | Variant::StatSsf)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase().replace('_', "-"))
            .ok_or_else(|| Error::Usage(format!("unknown variant {s:?} (tat, ssf, stat, stat-ssf)")))
    }
}

/// Architecture and variant selection. Serialized into checkpoints; its
/// hash is written into every bitstream header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub structured_prior: bool,
    /// Channels of the backbone blocks.
    pub width: usize,
    /// Channels of `w`, `v` and the I-frame latent.
    pub latent: usize,
    /// Channels of the hyper-latents.
    pub hyper: usize,
    /// Stride-2 blocks in each encoder/decoder.
    pub blocks: usize,
    /// Width of the full-resolution `h_μ` / `h_σ` networks.
    pub gate_width: usize,
    /// Extra feature channels produced by `g_w` for STAT and STAT-SSF.
    pub features: usize,
    pub sigma0: f64,
    pub scale_depth: usize,
    /// Seed of the parameter initialization.
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(variant: Variant, structured_prior: bool) -> Self {
        Self {
            variant,
            structured_prior,
            width: 64,
            latent: 32,
            hyper: 32,
            blocks: 4,
            gate_width: 16,
            features: 3,
            sigma0: DEFAULT_SIGMA0,
            scale_depth: DEFAULT_SCALE_DEPTH,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.structured_prior && !self.variant.has_w() {
            return Err(Error::Usage("the structured prior needs a motion latent; TAT has none".into()));
        }
        if self.width == 0 || self.latent == 0 || self.hyper == 0 || self.blocks == 0 || self.gate_width == 0 {
            return Err(Error::Usage("channel widths and block count must be positive".into()));
        }
        if self.features == 0 && self.variant == Variant::Stat {
            return Err(Error::Usage("STAT needs at least one g_w feature channel".into()));
        }
        if !(self.sigma0 > 0.0) || self.scale_depth == 0 {
            return Err(Error::Usage("sigma0 must be > 0 and scale depth >= 1".into()));
        }
        Ok(())
    }

    /// Frame sides must be multiples of this.
    pub fn frame_multiple(&self) -> usize {
        let mut m = 1usize << (self.blocks + 1);
        if self.variant.warps() {
            m = m.max(1 << (self.scale_depth - 1));
        }
        m
    }

    pub fn check_frame(&self, h: usize, w: usize) -> Result<()> {
        let m = self.frame_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Usage(format!("frame size {w}x{h} must be a positive multiple of {m}")));
        }
        Ok(())
    }

    pub fn latent_shape(&self, n: usize, h: usize, w: usize) -> [usize; 4] {
        [n, self.latent, h >> self.blocks, w >> self.blocks]
    }

    pub fn hyper_shape(&self, n: usize, h: usize, w: usize) -> [usize; 4] {
        [n, self.hyper, h >> (self.blocks + 1), w >> (self.blocks + 1)]
    }

    fn flow_channels(&self) -> usize {
        match self.variant {
            Variant::Tat => 0,
            Variant::Ssf => 3,
            Variant::Stat => self.features,
            Variant::StatSsf => 3 + self.features,
        }
    }

    /// FNV-1a of the canonical JSON form.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        json.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

/// Prediction `μ̂` and gate `σ̂` of a scale-shift flow step.
#[derive(Clone, Debug)]
pub struct ScaleShift {
    pub mu: Var,
    pub sigma: Var,
}

impl ScaleShift {
    pub fn new(mu: Var, sigma: Var) -> Result<Self> {
        if mu.shape() != sigma.shape() {
            return Err(dim_err!("mu {:?} vs sigma {:?}", mu.shape(), sigma.shape()));
        }
        check_positive(&sigma)?;
        Ok(Self { mu, sigma })
    }

    fn check(&self, x: &Var) -> Result<()> {
        if x.shape() != self.mu.shape() {
            return Err(dim_err!("input {:?} vs scale-shift {:?}", x.shape(), self.mu.shape()));
        }
        check_positive(&self.sigma)
    }
}

fn check_positive(sigma: &Var) -> Result<()> {
    match sigma.value().data().iter().find(|&&s| !(s > 0.0)) {
        Some(s) => Err(Error::Domain(format!("scale must be positive, found {s}"))),
        None => Ok(()),
    }
}

/// `x = μ + σ ⊙ y`.
pub fn maf_forward(y: &Var, ss: &ScaleShift) -> Result<Var> {
    ss.check(y)?;
    ss.mu.add(&ss.sigma.mul(y)?)
}

/// `y = (x - μ) / σ`.
pub fn maf_inverse(x: &Var, ss: &ScaleShift) -> Result<Var> {
    ss.check(x)?;
    x.sub(&ss.mu)?.div(&ss.sigma)
}

/// Which latent a coded tensor is, in bitstream order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LatentKind {
    /// I-frame hyper-latent.
    Hyper,
    /// I-frame latent.
    Latent,
    WHyper,
    W,
    VHyper,
    V,
}

impl LatentKind {
    pub fn name(self) -> &'static str {
        match self {
            LatentKind::Hyper => "hyper",
            LatentKind::Latent => "latent",
            LatentKind::WHyper => "w-hyper",
            LatentKind::W => "w",
            LatentKind::VHyper => "v-hyper",
            LatentKind::V => "v",
        }
    }
}

/// Entropy model of one coded tensor.
#[derive(Clone, Debug)]
pub enum LatentModel {
    Factorized(FactorizedPrior),
    Gaussian(DiscretizedGaussian),
}

impl LatentModel {
    /// Elementwise bits of `hat`.
    pub fn bits(&self, ps: &ParamStore, hat: &Var) -> Result<Var> {
        match self {
            LatentModel::Factorized(p) => p.bits(ps, hat),
            LatentModel::Gaussian(g) => g.bits(hat),
        }
    }

    /// Frequency tables for every element of a `shape` tensor over the
    /// support `lo..=hi`.
    pub fn tables(&self, ps: &ParamStore, shape: &[usize], lo: i32, hi: i32) -> Result<Vec<FreqTable>> {
        let n: usize = shape.iter().product();
        match self {
            LatentModel::Gaussian(g) => {
                if g.mean.shape() != shape {
                    return Err(dim_err!("model {:?} vs tensor {:?}", g.mean.shape(), shape));
                }
                (0..n).map(|i| g.table(i, lo, hi)).collect()
            }
            LatentModel::Factorized(p) => {
                if shape.len() != 4 || shape[1] != p.channels {
                    return Err(dim_err!("factorized model over {} channels vs {:?}", p.channels, shape));
                }
                let per_channel = (0..p.channels)
                    .map(|c| p.table(ps, c, lo, hi))
                    .collect::<Result<Vec<_>>>()?;
                let plane = shape[2] * shape[3];
                Ok((0..n).map(|i| per_channel[(i / plane) % p.channels].clone()).collect())
            }
        }
    }
}

/// A quantized tensor with the model it is coded under.
#[derive(Clone, Debug)]
pub struct CodedLatent {
    pub kind: LatentKind,
    /// Continuous encoder output.
    pub mean: Var,
    /// Noisy (training) or rounded (coding) value.
    pub hat: Var,
    pub model: LatentModel,
    /// Total bits under `model`.
    pub bits: Var,
}

/// Result of passing one frame through a model.
#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub recon: Var,
    /// Coded tensors in bitstream order.
    pub latents: Vec<CodedLatent>,
    /// P-frames only.
    pub prediction: Option<ScaleShift>,
}

impl FrameOutput {
    pub fn bits(&self) -> Result<Var> {
        let mut total = Var::scalar(0.0);
        for l in &self.latents {
            total = total.add(&l.bits)?;
        }
        Ok(total)
    }

    pub fn latent(&self, kind: LatentKind) -> Option<&CodedLatent> {
        self.latents.iter().find(|l| l.kind == kind)
    }
}

/// Continuous and quantized latents of a P-frame (`w` parts absent for TAT).
#[derive(Clone, Debug)]
pub struct LatentBundle {
    pub w_mean: Option<Tensor>,
    pub v_mean: Tensor,
    pub w_hyper_mean: Option<Tensor>,
    pub v_hyper_mean: Tensor,
    pub w_hat: Option<Tensor>,
    pub v_hat: Tensor,
    pub w_hyper_hat: Option<Tensor>,
    pub v_hyper_hat: Tensor,
}

/// Analysis, synthesis and hyper-prior of one latent.
#[derive(Clone, Debug)]
struct Branch {
    enc: ConvStack,
    dec: ConvStack,
    hyper_enc: ConvStack,
    prior: FactorizedPrior,
    hyper_dec: HyperSynthesis,
}

struct BranchSpec {
    enc_in: usize,
    dec_in: usize,
    dec_out: usize,
    dec_last: Init,
    cond: Option<(usize, usize)>,
}

impl Branch {
    fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig, spec: BranchSpec) -> Result<Self> {
        let (w, l, hy, b) = (cfg.width, cfg.latent, cfg.hyper, cfg.blocks);
        Ok(Self {
            enc: ConvStack::new(ps, rng, &format!("{name}.enc"), &analysis_spec(spec.enc_in, w, l, b), Init::Kaiming)?,
            dec: ConvStack::new(
                ps,
                rng,
                &format!("{name}.dec"),
                &synthesis_spec(spec.dec_in, w, spec.dec_out, b),
                spec.dec_last,
            )?,
            hyper_enc: ConvStack::new(ps, rng, &format!("{name}.hyper_enc"), &hyper_analysis_spec(l, hy), Init::Kaiming)?,
            prior: FactorizedPrior::new(ps, rng, &format!("{name}.prior"), hy, HYPER_PRIOR_INIT_SCALE)?,
            hyper_dec: HyperSynthesis::new(
                ps,
                rng,
                &format!("{name}.hyper_dec"),
                hy,
                l,
                spec.cond,
                cfg.structured_prior,
            )?,
        })
    }

    /// Quantize and rate `mean` and its hyper-latent.
    fn code(
        &self,
        ps: &ParamStore,
        q: &mut Quantizer<'_>,
        mean: &Var,
        kinds: (LatentKind, LatentKind),
        cond: Option<(&Var, &Var)>,
    ) -> Result<(CodedLatent, CodedLatent)> {
        let hyper_mean = self.hyper_enc.forward(ps, mean)?;
        let hyper_hat = q.apply(&hyper_mean)?;
        let hyper_model = LatentModel::Factorized(self.prior.clone());
        let hyper_bits = hyper_model.bits(ps, &hyper_hat)?.sum()?;
        let model = LatentModel::Gaussian(self.hyper_dec.forward(ps, &hyper_hat, cond)?);
        let hat = q.apply(mean)?;
        let bits = model.bits(ps, &hat)?.sum()?;
        Ok((
            CodedLatent { kind: kinds.0, mean: hyper_mean, hat: hyper_hat, model: hyper_model, bits: hyper_bits },
            CodedLatent { kind: kinds.1, mean: mean.clone(), hat, model, bits },
        ))
    }
}

#[derive(Clone, Debug)]
struct PFrameNet {
    w: Option<Branch>,
    v: Branch,
    mu: Option<ConvStack>,
    sigma: Option<ConvStack>,
}

/// A complete codec model: I-frame autoencoder plus one P-frame variant.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    iframe: Branch,
    pframe: PFrameNet,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamStore::new();
        let cfg = &config;
        let (l, gw, f) = (cfg.latent, cfg.gate_width, cfg.features);
        let iframe = Branch::new(
            &mut ps,
            &mut rng,
            "i",
            cfg,
            BranchSpec { enc_in: 3, dec_in: l, dec_out: 3, dec_last: Init::Kaiming, cond: None },
        )?;
        let variant = cfg.variant;
        let w = if variant.has_w() {
            let branch = Branch::new(
                &mut ps,
                &mut rng,
                "p.w",
                cfg,
                BranchSpec { enc_in: 6, dec_in: l, dec_out: cfg.flow_channels(), dec_last: Init::Zero, cond: None },
            )?;
            if variant.warps() {
                let mut b = Tensor::zeros(&[cfg.flow_channels()]);
                b.data_mut()[2] = FLOW_SCALE_BIAS;
                ps.replace(branch.dec.last().bias, b)?;
            }
            Some(branch)
        } else {
            None
        };
        let ctx = match variant {
            Variant::Tat => 3,
            Variant::Ssf => 0,
            Variant::Stat => 3 + f,
            Variant::StatSsf => 3 + 3 + f,
        };
        let mu = match variant {
            Variant::Tat | Variant::Stat => {
                Some(ConvStack::new(&mut ps, &mut rng, "p.mu", &pixel_cnn_spec(ctx, gw, 3), Init::Zero)?)
            }
            _ => None,
        };
        let sigma = if variant.gated() {
            let stack = ConvStack::new(&mut ps, &mut rng, "p.sigma", &pixel_cnn_spec(ctx, gw, 3), Init::Zero)?;
            ps.replace(stack.last().bias, Tensor::full(&[3], softplus_inverse(1.0 - SIGMA_MIN)))?;
            Some(stack)
        } else {
            None
        };
        let v = Branch::new(
            &mut ps,
            &mut rng,
            "p.v",
            cfg,
            BranchSpec {
                enc_in: 3,
                dec_in: if variant.residual_reads_w() { 2 * l } else { l },
                dec_out: 3,
                dec_last: Init::Kaiming,
                cond: variant.has_w().then_some((cfg.hyper, l)),
            },
        )?;
        Ok(Self { config, params: ps, iframe, pframe: PFrameNet { w, v, mu, sigma } })
    }

    fn check_input(&self, x: &Var) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(dim_err!("frames must be [N, 3, H, W], got {:?}", s));
        }
        self.config.check_frame(s[2], s[3])
    }

    /// Code the first frame of a clip without temporal context.
    pub fn iframe(&self, x: &Var, q: &mut Quantizer<'_>) -> Result<FrameOutput> {
        self.check_input(x)?;
        let ps = &self.params;
        let mean = self.iframe.enc.forward(ps, x)?;
        let (hyper, latent) = self.iframe.code(ps, q, &mean, (LatentKind::Hyper, LatentKind::Latent), None)?;
        let recon = self.iframe.dec.forward(ps, &latent.hat)?;
        Ok(FrameOutput { recon, latents: vec![hyper, latent], prediction: None })
    }

    /// Code frame `x` given the previous reconstruction.
    pub fn pframe(&self, x: &Var, prev: &Var, q: &mut Quantizer<'_>) -> Result<FrameOutput> {
        self.check_input(x)?;
        if prev.shape() != x.shape() {
            return Err(dim_err!("previous reconstruction {:?} vs frame {:?}", prev.shape(), x.shape()));
        }
        let ps = &self.params;
        let net = &self.pframe;
        let mut latents = Vec::with_capacity(4);
        let w_pair = match &net.w {
            Some(wb) => {
                let mean = wb.enc.forward(ps, &Var::concat(&[x.clone(), prev.clone()], 1)?)?;
                let (wh, w) = wb.code(ps, q, &mean, (LatentKind::WHyper, LatentKind::W), None)?;
                let pair = (wh.hat.clone(), w.hat.clone());
                latents.push(wh);
                latents.push(w);
                Some(pair)
            }
            None => None,
        };
        let w_hat = w_pair.as_ref().map(|p| &p.1);
        let ss = self.predict(prev, w_hat)?;
        let y = maf_inverse(x, &ss)?;
        let v_mean = net.v.enc.forward(ps, &y)?;
        let cond = w_pair.as_ref().map(|(a, b)| (a, b));
        let (vh, v) = net.v.code(ps, q, &v_mean, (LatentKind::VHyper, LatentKind::V), cond)?;
        let recon = self.synthesize(&ss, &v.hat, w_hat)?;
        latents.push(vh);
        latents.push(v);
        Ok(FrameOutput { recon, latents, prediction: Some(ss) })
    }

    /// `(μ̂, σ̂)` from the previous reconstruction and `ŵ`.
    pub fn predict(&self, prev: &Var, w_hat: Option<&Var>) -> Result<ScaleShift> {
        let ps = &self.params;
        let net = &self.pframe;
        let variant = self.config.variant;
        let gw = match (&net.w, w_hat) {
            (Some(wb), Some(w)) => Some(wb.dec.forward(ps, w)?),
            (None, None) => None,
            _ => return Err(Error::Usage(format!("{variant} needs ŵ iff it has a motion latent"))),
        };
        let ctx = match (&gw, variant) {
            (None, _) => prev.clone(),
            (Some(g), _) => Var::concat(&[prev.clone(), g.clone()], 1)?,
        };
        let mu = match (&net.mu, &gw) {
            (Some(cnn), _) => prev.add(&cnn.forward(ps, &ctx)?)?,
            (None, Some(g)) => {
                let flow = FlowField::from_network(&g.narrow(1, 0, 3)?, self.config.scale_depth)?;
                let volume = build_scale_space_volume(prev, self.config.sigma0, self.config.scale_depth)?;
                scale_space_warp(&volume, &flow)?
            }
            (None, None) => return Err(Error::Usage("prediction network missing".into())),
        };
        let sigma = match &net.sigma {
            Some(cnn) => cnn.forward(ps, &ctx)?.softplus()?.add_scalar(SIGMA_MIN)?,
            None => Var::constant(Tensor::ones(mu.shape())),
        };
        ScaleShift::new(mu, sigma)
    }

    /// `x̂ = μ̂ + σ̂ ⊙ g_v(v̂ [, ŵ])`.
    pub fn synthesize(&self, ss: &ScaleShift, v_hat: &Var, w_hat: Option<&Var>) -> Result<Var> {
        let input = match (self.config.variant.residual_reads_w(), w_hat) {
            (true, Some(w)) => Var::concat(&[v_hat.clone(), w.clone()], 1)?,
            (true, None) => return Err(Error::Usage("residual decoder needs ŵ".into())),
            (false, _) => v_hat.clone(),
        };
        let y = self.pframe.v.dec.forward(&self.params, &input)?;
        maf_forward(&y, ss)
    }

    /// TAT analysis: `z̄ = f_z((x - h_μ(x̂)) / h_σ(x̂))`.
    pub fn tat_encode(&self, x: &Var, prev: &Var) -> Result<Var> {
        self.require(&[Variant::Tat])?;
        let ss = self.predict(prev, None)?;
        self.pframe.v.enc.forward(&self.params, &maf_inverse(x, &ss)?)
    }

    /// TAT synthesis: `x̂ = h_μ(x̂_prev) + h_σ(x̂_prev) ⊙ g_z(ẑ)`.
    pub fn tat_decode(&self, z_hat: &Var, prev: &Var) -> Result<Var> {
        self.require(&[Variant::Tat])?;
        let ss = self.predict(prev, None)?;
        self.synthesize(&ss, z_hat, None)
    }

    /// SSF synthesis: `x̂ = warp(x̂_prev, g_w(ŵ)) + g_v(v̂)`.
    pub fn ssf_reconstruct(&self, prev: &Var, w_hat: &Var, v_hat: &Var) -> Result<Var> {
        self.require(&[Variant::Ssf])?;
        let ss = self.predict(prev, Some(w_hat))?;
        self.synthesize(&ss, v_hat, Some(w_hat))
    }

    /// STAT / STAT-SSF synthesis: `x̂ = h_μ(x̂_prev, ŵ) + h_σ(x̂_prev, ŵ) ⊙ g_v(v̂, ŵ)`.
    pub fn stat_reconstruct(&self, prev: &Var, w_hat: &Var, v_hat: &Var) -> Result<Var> {
        self.require(&[Variant::Stat, Variant::StatSsf])?;
        let ss = self.predict(prev, Some(w_hat))?;
        self.synthesize(&ss, v_hat, Some(w_hat))
    }

    /// Deterministic P-frame latents with rounding.
    pub fn encode_latents(&self, x: &Var, prev: &Var) -> Result<LatentBundle> {
        let out = self.pframe(x, prev, &mut Quantizer::Round)?;
        let get = |k| out.latent(k).map(|l: &CodedLatent| (l.mean.value().clone(), l.hat.value().clone()));
        let (v_mean, v_hat) = get(LatentKind::V).expect("v is always coded");
        let (v_hyper_mean, v_hyper_hat) = get(LatentKind::VHyper).expect("v hyper is always coded");
        let w = get(LatentKind::W);
        let wh = get(LatentKind::WHyper);
        Ok(LatentBundle {
            w_mean: w.as_ref().map(|p| p.0.clone()),
            w_hat: w.map(|p| p.1),
            w_hyper_mean: wh.as_ref().map(|p| p.0.clone()),
            w_hyper_hat: wh.map(|p| p.1),
            v_mean,
            v_hat,
            v_hyper_mean,
            v_hyper_hat,
        })
    }

    fn require(&self, variants: &[Variant]) -> Result<()> {
        if variants.contains(&self.config.variant) {
            Ok(())
        } else {
            Err(Error::Usage(format!("operation not defined for {}", self.config.variant)))
        }
    }

    /// Latent kinds of a frame in bitstream order.
    pub fn frame_kinds(&self, intra: bool) -> &'static [LatentKind] {
        use LatentKind::*;
        if intra {
            &[Hyper, Latent]
        } else if self.config.variant.has_w() {
            &[WHyper, W, VHyper, V]
        } else {
            &[VHyper, V]
        }
    }

    /// Step-wise decoder for one frame; `prev` is `None` for an I-frame.
    pub fn frame_decoder(&self, prev: Option<Var>, h: usize, w: usize) -> Result<FrameDecoder<'_>> {
        self.config.check_frame(h, w)?;
        if let Some(p) = &prev {
            if p.shape() != [1, 3, h, w] {
                return Err(dim_err!("previous reconstruction {:?} vs frame {}x{}", p.shape(), w, h));
            }
        }
        Ok(FrameDecoder { model: self, kinds: self.frame_kinds(prev.is_none()), prev, h, w, hats: Vec::new() })
    }
}

/// Rebuilds a frame from its decoded tensors in bitstream order. Each
/// model it hands out depends only on tensors already pushed.
pub struct FrameDecoder<'m> {
    model: &'m Model,
    kinds: &'static [LatentKind],
    prev: Option<Var>,
    h: usize,
    w: usize,
    hats: Vec<Var>,
}

impl FrameDecoder<'_> {
    /// The next tensor to decode: its kind, shape and entropy model.
    pub fn next(&self) -> Result<Option<(LatentKind, [usize; 4], LatentModel)>> {
        let Some(&kind) = self.kinds.get(self.hats.len()) else {
            return Ok(None);
        };
        let m = self.model;
        let cfg = &m.config;
        let ps = &m.params;
        let (hyper_shape, latent_shape) = (cfg.hyper_shape(1, self.h, self.w), cfg.latent_shape(1, self.h, self.w));
        let found = |k: LatentKind| -> Result<&Var> {
            self.kinds
                .iter()
                .position(|&x| x == k)
                .and_then(|i| self.hats.get(i))
                .ok_or_else(|| Error::Usage(format!("{} not decoded yet", k.name())))
        };
        let entry = match kind {
            LatentKind::Hyper => (hyper_shape, LatentModel::Factorized(m.iframe.prior.clone())),
            LatentKind::Latent => (
                latent_shape,
                LatentModel::Gaussian(m.iframe.hyper_dec.forward(ps, found(LatentKind::Hyper)?, None)?),
            ),
            LatentKind::WHyper => (hyper_shape, LatentModel::Factorized(m.w_branch()?.prior.clone())),
            LatentKind::W => (
                latent_shape,
                LatentModel::Gaussian(m.w_branch()?.hyper_dec.forward(ps, found(LatentKind::WHyper)?, None)?),
            ),
            LatentKind::VHyper => (hyper_shape, LatentModel::Factorized(m.pframe.v.prior.clone())),
            LatentKind::V => {
                let cond = if cfg.variant.has_w() {
                    Some((found(LatentKind::WHyper)?, found(LatentKind::W)?))
                } else {
                    None
                };
                let g = m.pframe.v.hyper_dec.forward(ps, found(LatentKind::VHyper)?, cond)?;
                (latent_shape, LatentModel::Gaussian(g))
            }
        };
        Ok(Some((kind, entry.0, entry.1)))
    }

    pub fn push(&mut self, hat: Tensor) -> Result<()> {
        let Some((kind, shape)) = self.peek_shape() else {
            return Err(Error::Usage("all tensors of the frame are already decoded".into()));
        };
        if hat.shape() != shape {
            return Err(dim_err!("{} has shape {:?}, expected {:?}", kind.name(), hat.shape(), shape));
        }
        self.hats.push(Var::constant(hat));
        Ok(())
    }

    fn peek_shape(&self) -> Option<(LatentKind, [usize; 4])> {
        let kind = *self.kinds.get(self.hats.len())?;
        let cfg = &self.model.config;
        let shape = match kind {
            LatentKind::Hyper | LatentKind::WHyper | LatentKind::VHyper => cfg.hyper_shape(1, self.h, self.w),
            _ => cfg.latent_shape(1, self.h, self.w),
        };
        Some((kind, shape))
    }

    /// Reconstruction once every tensor has been pushed.
    pub fn finish(self) -> Result<Var> {
        if self.hats.len() != self.kinds.len() {
            return Err(Error::Usage(format!(
                "frame needs {} tensors, got {}",
                self.kinds.len(),
                self.hats.len()
            )));
        }
        let m = self.model;
        match &self.prev {
            None => m.iframe.dec.forward(&m.params, &self.hats[1]),
            Some(prev) => {
                let (w_hat, v_hat) = if m.config.variant.has_w() {
                    (Some(&self.hats[1]), &self.hats[3])
                } else {
                    (None, &self.hats[1])
                };
                let ss = m.predict(prev, w_hat)?;
                m.synthesize(&ss, v_hat, w_hat)
            }
        }
    }
}

impl Model {
    fn w_branch(&self) -> Result<&Branch> {
        self.pframe
            .w
            .as_ref()
            .ok_or_else(|| Error::Usage(format!("{} has no motion latent", self.config.variant)))
    }
}
