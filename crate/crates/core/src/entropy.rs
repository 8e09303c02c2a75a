//! Quantization proxies and the entropy models of latents and hyper-latents.
//!
//! Training sees additive uniform noise and coding sees rounding; both go
//! through [`Quantizer`] so the same model code serves both. Rates are
//! always `-log2` of a probability mass floored at [`PMF_FLOOR`], the
//! smallest nonzero mass a 16-bit frequency table can represent.

use crate::error::{dim_err, Error, Result};
use crate::nn::{Conv2d, ConvSpec, Init, ParamId, ParamStore, LEAKY_SLOPE};
use crate::range_coder::FreqTable;
use crate::tensor::{normal_cdf, sigmoid, softplus_inverse, Tensor, Var};
use rand::{Rng, RngCore};
use std::f64::consts::LN_2;

/// Smallest probability a symbol is charged for.
pub const PMF_FLOOR: f64 = 1.0 / 65536.0;
/// Lower bound on the scale of every conditional Gaussian.
pub const SCALE_FLOOR: f64 = 0.04;
/// Symbols (and support bounds) must fit in an `i16`.
pub const MAX_SYMBOL: i32 = i16::MAX as i32 - 1;
/// Tail mass left outside the searched support of a factorized prior.
pub const TAIL_MASS: f64 = 1e-9;

/// `z + u` with `u ~ U[-0.5, 0.5)` drawn per element. The noise is a
/// constant, so the gradient with respect to `z` is the identity.
pub fn quantize_train<R: Rng + ?Sized>(z: &Var, rng: &mut R) -> Result<Var> {
    let noise = Tensor::from_fn(z.shape(), |_| rng.gen::<f64>() - 0.5);
    z.add(&Var::constant(noise))
}

/// Round half away from zero.
pub fn quantize_eval(z: &Tensor) -> Tensor {
    z.map(f64::round)
}

/// Integer symbols of a rounded tensor; errors name the first offending
/// element.
pub fn to_symbols(t: &Tensor) -> Result<Vec<i32>> {
    t.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v.fract() != 0.0 || v.abs() > MAX_SYMBOL as f64 {
                Err(Error::Coding(format!(
                    "latent element {i} of tensor {:?} has value {v}, outside the coder alphabet [-{MAX_SYMBOL}, {MAX_SYMBOL}]",
                    t.shape()
                )))
            } else {
                Ok(v as i32)
            }
        })
        .collect()
}

/// The quantization applied to continuous latents.
pub enum Quantizer<'a> {
    /// Training proxy: additive uniform noise from the given source.
    Noise(&'a mut dyn RngCore),
    /// Coding: rounding, cut from the tape.
    Round,
}

impl Quantizer<'_> {
    pub fn apply(&mut self, z: &Var) -> Result<Var> {
        match self {
            Quantizer::Noise(rng) => quantize_train(z, rng),
            Quantizer::Round => Ok(Var::constant(quantize_eval(z.value()))),
        }
    }

    pub fn is_noise(&self) -> bool {
        matches!(self, Quantizer::Noise(_))
    }
}

/// Elementwise `-log2(max(p, PMF_FLOOR))`.
pub fn bits_from_pmf(p: &Var) -> Result<Var> {
    p.lower_bound(PMF_FLOOR)?.ln()?.mul_scalar(-1.0 / LN_2)
}

/// Mass of integer `k` under N(mean, scale²) integrated over `[k-0.5, k+0.5]`.
/// Evaluated on the side of the mean where the CDF is small, which keeps
/// far-tail masses accurate.
pub fn gaussian_pmf(k: f64, mean: f64, scale: f64) -> f64 {
    let d = (k - mean).abs();
    normal_cdf((0.5 - d) / scale) - normal_cdf((-0.5 - d) / scale)
}

/// Pmf over `lo..=hi` with all mass below `lo` folded into `lo` and all
/// mass above `hi` folded into `hi`.
pub fn gaussian_folded_pmf(mean: f64, scale: f64, lo: i32, hi: i32) -> Vec<f64> {
    if lo == hi {
        return vec![1.0];
    }
    (lo..=hi)
        .map(|k| {
            let k = k as f64;
            if k == lo as f64 {
                normal_cdf((k + 0.5 - mean) / scale)
            } else if k == hi as f64 {
                normal_cdf((mean - k + 0.5) / scale)
            } else {
                gaussian_pmf(k, mean, scale)
            }
        })
        .collect()
}

/// Elementwise Gaussian integrated over unit bins.
#[derive(Clone, Debug)]
pub struct DiscretizedGaussian {
    pub mean: Var,
    pub scale: Var,
}

impl DiscretizedGaussian {
    pub fn new(mean: Var, scale: Var) -> Result<Self> {
        if mean.shape() != scale.shape() {
            return Err(dim_err!("mean {:?} vs scale {:?}", mean.shape(), scale.shape()));
        }
        if scale.value().data().iter().any(|&s| s <= 0.0) {
            return Err(Error::Domain("discretized Gaussian scale must be positive".into()));
        }
        Ok(Self { mean, scale })
    }

    /// `Φ((0.5 - |y-μ|)/σ) - Φ((-0.5 - |y-μ|)/σ)`, equal to the bin mass
    /// `Φ((y+0.5-μ)/σ) - Φ((y-0.5-μ)/σ)` by symmetry.
    pub fn pmf(&self, y: &Var) -> Result<Var> {
        let d = y.sub(&self.mean)?.abs()?.neg()?;
        let upper = d.add_scalar(0.5)?.div(&self.scale)?.normal_cdf()?;
        let lower = d.add_scalar(-0.5)?.div(&self.scale)?.normal_cdf()?;
        upper.sub(&lower)
    }

    pub fn bits(&self, y: &Var) -> Result<Var> {
        bits_from_pmf(&self.pmf(y)?)
    }

    /// Frequency table for element `i` over `lo..=hi`.
    pub fn table(&self, i: usize, lo: i32, hi: i32) -> Result<FreqTable> {
        let (m, s) = (self.mean.value().data()[i], self.scale.value().data()[i]);
        FreqTable::from_pmf(lo, &gaussian_folded_pmf(m, s, lo, hi))
    }
}

const FILTERS: [usize; 5] = [1, 3, 3, 3, 1];

/// Per-channel learned density for hyper-latents: a monotone
/// `R -> (0, 1)` cumulative built from four small positive-weight layers
/// with tanh gates and a final sigmoid.
#[derive(Clone, Debug)]
pub struct FactorizedPrior {
    pub channels: usize,
    matrices: Vec<ParamId>,
    biases: Vec<ParamId>,
    factors: Vec<ParamId>,
}

impl FactorizedPrior {
    /// `init_scale` is roughly the initial width of each channel's density.
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        init_scale: f64,
    ) -> Result<Self> {
        if init_scale <= 0.0 {
            return Err(Error::Domain("factorized prior init scale must be positive".into()));
        }
        let layers = FILTERS.len() - 1;
        let scale = init_scale.powf(1.0 / layers as f64);
        let (mut matrices, mut biases, mut factors) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..layers {
            let (fin, fout) = (FILTERS[i], FILTERS[i + 1]);
            let init = softplus_inverse(1.0 / scale / fout as f64);
            matrices.push(ps.add(&format!("{name}.matrix{i}"), Tensor::full(&[channels, fout, fin], init))?);
            biases.push(ps.add(
                &format!("{name}.bias{i}"),
                Tensor::uniform(&[channels, fout, 1], -0.5, 0.5, rng),
            )?);
            if i + 1 < layers {
                factors.push(ps.add(&format!("{name}.factor{i}"), Tensor::zeros(&[channels, fout, 1]))?);
            }
        }
        Ok(Self { channels, matrices, biases, factors })
    }

    /// Logit of the cumulative at `x: [C, 1, n]`.
    fn logits(&self, ps: &ParamStore, x: &Var) -> Result<Var> {
        let mut h = x.clone();
        for i in 0..self.matrices.len() {
            h = ps.get(self.matrices[i]).softplus()?.bmm(&h)?.add(ps.get(self.biases[i]))?;
            if let Some(&f) = self.factors.get(i) {
                h = h.add(&ps.get(f).tanh()?.mul(&h.tanh()?)?)?;
            }
        }
        Ok(h)
    }

    /// Bin masses of `y: [N, C, H, W]`, same shape as `y`.
    pub fn pmf(&self, ps: &ParamStore, y: &Var) -> Result<Var> {
        let s = y.shape().to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(dim_err!("factorized prior over {} channels got {:?}", self.channels, s));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let flat = y.reshape(&[n, c, hw])?.transpose01()?.reshape(&[c, 1, n * hw])?;
        let lower = self.logits(ps, &flat.add_scalar(-0.5)?)?;
        let upper = self.logits(ps, &flat.add_scalar(0.5)?)?;
        // Evaluate on the side where both sigmoids are small.
        let sign = lower
            .value()
            .zip_map(upper.value(), |l, u| if l + u > 0.0 { -1.0 } else { 1.0 })?;
        let sign = Var::constant(sign);
        let p = upper
            .mul(&sign)?
            .sigmoid()?
            .sub(&lower.mul(&sign)?.sigmoid()?)?
            .mul(&sign)?;
        p.reshape(&[c, n, hw])?.transpose01()?.reshape(&s)
    }

    pub fn bits(&self, ps: &ParamStore, y: &Var) -> Result<Var> {
        bits_from_pmf(&self.pmf(ps, y)?)
    }

    /// Cumulative of channel `c` at each point of `xs`.
    pub fn cdf(&self, ps: &ParamStore, c: usize, xs: &[f64]) -> Result<Vec<f64>> {
        if c >= self.channels {
            return Err(Error::Usage(format!("channel {c} of {}", self.channels)));
        }
        let narrow = |id: ParamId| ps.get(id).narrow(0, c, 1);
        let x = Var::constant(Tensor::new(&[1, 1, xs.len()], xs.to_vec())?);
        let mut h = x;
        for i in 0..self.matrices.len() {
            h = narrow(self.matrices[i])?.softplus()?.bmm(&h)?.add(&narrow(self.biases[i])?)?;
            if let Some(&f) = self.factors.get(i) {
                h = h.add(&narrow(f)?.tanh()?.mul(&h.tanh()?)?)?;
            }
        }
        Ok(h.value().data().iter().map(|&l| sigmoid(l)).collect())
    }

    /// Pmf of channel `c` over `lo..=hi` with tails folded into the edges.
    pub fn folded_pmf(&self, ps: &ParamStore, c: usize, lo: i32, hi: i32) -> Result<Vec<f64>> {
        if lo == hi {
            return Ok(vec![1.0]);
        }
        let edges: Vec<f64> = (lo..hi).map(|k| k as f64 + 0.5).collect();
        let cdf = self.cdf(ps, c, &edges)?;
        let mut pmf = Vec::with_capacity(cdf.len() + 1);
        let mut prev = 0.0;
        for &v in &cdf {
            pmf.push((v - prev).max(0.0));
            prev = v;
        }
        pmf.push((1.0 - prev).max(0.0));
        Ok(pmf)
    }

    pub fn table(&self, ps: &ParamStore, c: usize, lo: i32, hi: i32) -> Result<FreqTable> {
        FreqTable::from_pmf(lo, &self.folded_pmf(ps, c, lo, hi)?)
    }

    /// Smallest integer range `[lo, hi]` such that less than [`TAIL_MASS`]
    /// lies below `lo - 0.5` and above `hi + 0.5` in channel `c`.
    pub fn tail_bounds(&self, ps: &ParamStore, c: usize) -> Result<(i32, i32)> {
        let limit = MAX_SYMBOL;
        let mut lo = 0;
        while self.cdf(ps, c, &[lo as f64 - 0.5])?[0] >= TAIL_MASS {
            lo -= 1;
            if lo < -limit {
                return Err(Error::Numeric(format!("channel {c} lower tail beyond {limit}")));
            }
        }
        let mut hi = 0;
        while 1.0 - self.cdf(ps, c, &[hi as f64 + 0.5])?[0] >= TAIL_MASS {
            hi += 1;
            if hi > limit {
                return Err(Error::Numeric(format!("channel {c} upper tail beyond {limit}")));
            }
        }
        Ok((lo, hi))
    }
}

/// Hyper-decoder producing the Gaussian parameters of a latent from its
/// decoded hyper-latent.
///
/// With conditioning configured, the w-side inputs (`ŵʰ` at hyper
/// resolution, then `ŵ` at latent resolution) are concatenated after the
/// shared inputs. With `structured == false` those inputs are replaced by
/// zeros, which is exactly the unconditional hyper-decoder.
#[derive(Clone, Debug)]
pub struct HyperSynthesis {
    deconv: Conv2d,
    head: Conv2d,
    latent: usize,
    cond: Option<(usize, usize)>,
    pub structured: bool,
}

impl HyperSynthesis {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        hyper: usize,
        latent: usize,
        cond: Option<(usize, usize)>,
        structured: bool,
    ) -> Result<Self> {
        let (ch, cl) = cond.unwrap_or((0, 0));
        let deconv = Conv2d::new(
            ps,
            rng,
            &format!("{name}.0"),
            ConvSpec::deconv(hyper + ch, hyper, 5, 2),
            Init::Kaiming,
        )?;
        let head = Conv2d::new(
            ps,
            rng,
            &format!("{name}.1"),
            ConvSpec::conv(hyper + cl, 2 * latent, 3, 1),
            Init::Kaiming,
        )?;
        Ok(Self { deconv, head, latent, cond, structured: structured && cond.is_some() })
    }

    /// `w` is `(ŵʰ, ŵ)`, required iff conditioning is configured.
    pub fn forward(&self, ps: &ParamStore, hyper_hat: &Var, w: Option<(&Var, &Var)>) -> Result<DiscretizedGaussian> {
        let h = match self.cond {
            None => self.deconv.forward(ps, hyper_hat)?,
            Some((ch, cl)) => {
                let (wh, wl) = w.ok_or_else(|| Error::Usage("conditioned hyper-decoder needs w".into()))?;
                let wh = self.masked(wh, ch)?;
                let h = self.deconv.forward(ps, &Var::concat(&[hyper_hat.clone(), wh], 1)?)?;
                let h = h.leaky_relu(LEAKY_SLOPE)?;
                let wl = self.masked(wl, cl)?;
                return self.params(&self.head.forward(ps, &Var::concat(&[h, wl], 1)?)?);
            }
        };
        self.params(&self.head.forward(ps, &h.leaky_relu(LEAKY_SLOPE)?)?)
    }

    fn masked(&self, x: &Var, channels: usize) -> Result<Var> {
        if x.shape().len() != 4 || x.shape()[1] != channels {
            return Err(dim_err!("conditioning input {:?} needs {} channels", x.shape(), channels));
        }
        Ok(if self.structured {
            x.clone()
        } else {
            Var::constant(Tensor::zeros(x.shape()))
        })
    }

    fn params(&self, raw: &Var) -> Result<DiscretizedGaussian> {
        let mean = raw.narrow(1, 0, self.latent)?;
        let scale = raw.narrow(1, self.latent, self.latent)?.softplus()?.add_scalar(SCALE_FLOOR)?;
        DiscretizedGaussian::new(mean, scale)
    }
}
