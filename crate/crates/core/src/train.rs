//! Rate-distortion training: loss, Adam, schedule and the training loop.

use crate::data::SyntheticSource;
use crate::entropy::Quantizer;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Tensor, Var};
use crate::transforms::{FrameOutput, Model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Rate weight of `D + beta * R`.
    pub beta: f64,
    pub steps: usize,
    pub lr_initial: f64,
    pub lr_decayed: f64,
    /// First step at `lr_decayed`; 85% of `steps` when absent.
    pub decay_step: Option<usize>,
    pub crop: usize,
    /// Crop used for the last `final_fraction` of the steps.
    pub final_crop: usize,
    pub final_fraction: f64,
    pub frames_per_clip: usize,
    pub batch: usize,
    pub seed: u64,
    /// Steps between loss-log rows.
    pub log_every: usize,
    pub source: SyntheticSource,
    /// Where to dump the offending batch if the loss stops being finite.
    pub nan_dump_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.01,
            steps: 2000,
            lr_initial: 1e-4,
            lr_decayed: 1e-5,
            decay_step: None,
            crop: 64,
            final_crop: 96,
            final_fraction: 0.05,
            frames_per_clip: 3,
            batch: 4,
            seed: 0,
            log_every: 10,
            source: SyntheticSource::default(),
            nan_dump_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Usage(format!("train config: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Parse by extension: `.toml` or `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => Self::from_toml(&text),
            Some("json") => Self::from_json(&text),
            _ => Err(Error::Usage(format!("{}: config must be .toml or .json", path.display()))),
        }
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Usage("beta must be > 0".into()));
        }
        if self.frames_per_clip < 2 {
            return Err(Error::Usage("frames_per_clip must be >= 2".into()));
        }
        if self.batch == 0 {
            return Err(Error::Usage("batch must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.final_fraction) {
            return Err(Error::Usage("final_fraction must lie in [0, 1]".into()));
        }
        model.config.check_frame(self.crop, self.crop)?;
        if self.final_steps() > 0 {
            model.config.check_frame(self.final_crop, self.final_crop)?;
        }
        Ok(())
    }

    pub fn decay_step(&self) -> usize {
        self.decay_step
            .unwrap_or_else(|| (0.85 * self.steps as f64).round() as usize)
    }

    fn final_steps(&self) -> usize {
        (self.final_fraction * self.steps as f64).ceil() as usize
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.decay_step() {
            self.lr_initial
        } else {
            self.lr_decayed
        }
    }

    pub fn crop_at(&self, step: usize) -> usize {
        if step + self.final_steps() >= self.steps && self.final_steps() > 0 {
            self.final_crop
        } else {
            self.crop
        }
    }
}

/// `D + beta * R` and its parts.
#[derive(Clone, Debug)]
pub struct RdLoss {
    pub loss: Var,
    /// Mean squared error over every pixel of every frame.
    pub distortion: f64,
    /// Bits per pixel.
    pub rate: f64,
    pub bits: f64,
}

/// Combine reconstructions and total bits into the R-D loss. `frames` and
/// `recons` are `[N, 3, H, W]` per time step.
pub fn rd_terms(frames: &[Var], recons: &[Var], bits: &Var, beta: f64) -> Result<RdLoss> {
    if frames.is_empty() || frames.len() != recons.len() {
        return Err(Error::Usage("rd loss needs one reconstruction per frame".into()));
    }
    let s = frames[0].shape();
    let pixels = (frames.len() * s[0] * s[2] * s[3]) as f64;
    let mut se = Var::scalar(0.0);
    for (x, r) in frames.iter().zip(recons) {
        se = se.add(&r.sub(x)?.square()?.sum()?)?;
    }
    let d = se.mul_scalar(1.0 / (pixels * s[1] as f64))?;
    let r = bits.mul_scalar(1.0 / pixels)?;
    let loss = d.add(&r.mul_scalar(beta)?)?;
    Ok(RdLoss { distortion: d.item()?, rate: r.item()?, bits: bits.item()?, loss })
}

/// Run a clip (`[N, 3, H, W]` per time step) through the model: I-frame
/// first, then P-frames on the previous reconstruction.
pub fn run_clip(model: &Model, frames: &[Var], q: &mut Quantizer<'_>) -> Result<Vec<FrameOutput>> {
    let mut outs: Vec<FrameOutput> = Vec::with_capacity(frames.len());
    for (t, x) in frames.iter().enumerate() {
        let out = match outs.last() {
            None => model.iframe(x, q)?,
            Some(prev) => model.pframe(x, &prev.recon, q)?,
        };
        debug_assert!(t == outs.len());
        outs.push(out);
    }
    Ok(outs)
}

/// R-D loss of a clip with the given quantizer.
pub fn rd_loss(model: &Model, frames: &[Tensor], beta: f64, q: &mut Quantizer<'_>) -> Result<RdLoss> {
    if frames.len() < 2 {
        return Err(Error::Usage("rd loss needs at least two frames".into()));
    }
    let xs: Vec<Var> = frames.iter().map(|f| Var::constant(f.clone())).collect();
    let outs = run_clip(model, &xs, q)?;
    let mut bits = Var::scalar(0.0);
    for o in &outs {
        bits = bits.add(&o.bits()?)?;
    }
    let recons: Vec<Var> = outs.into_iter().map(|o| o.recon).collect();
    rd_terms(&xs, &recons, &bits, beta)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(shapes: &[&[usize]]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn for_params(ps: &ParamStore) -> Self {
        let shapes: Vec<Vec<usize>> = ps.iter().map(|p| p.value.shape().to_vec()).collect();
        Self::new(&shapes.iter().map(|s| s.as_slice()).collect::<Vec<_>>())
    }

    /// One update of `params` in place. A missing gradient counts as zero.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Usage("optimizer state does not match the parameters".into()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = params[i].data_mut();
            if p.len() != m.len() {
                return Err(Error::Usage(format!("parameter {i} changed shape")));
            }
            let g = grads[i].as_ref().map(|g| g.data());
            for j in 0..p.len() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Update every parameter of `ps` from its stored gradient.
    pub fn step_store(&mut self, ps: &mut ParamStore, lr: f64) -> Result<()> {
        let grads = ps.grads();
        let mut values: Vec<Tensor> = ps.iter().map(|p| p.value.value().clone()).collect();
        self.step(&mut values, &grads, lr)?;
        for (i, v) in values.into_iter().enumerate() {
            ps.set(i, v)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub distortion: f64,
    pub rate: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    /// Loss on the fixed validation batch before the first step.
    pub initial_loss: f64,
    /// Loss on the same batch (same noise) after the last step.
    pub final_loss: f64,
}

pub fn loss_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,loss,D,R,lr\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.9e},{:.9e},{:.9e},{:e}", r.step, r.loss, r.distortion, r.rate, r.lr);
    }
    s
}

const VALIDATION_STREAM: u64 = 0x5eed_0f_7a11;

fn validation_loss(model: &Model, cfg: &TrainConfig, batch: &[Tensor]) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ VALIDATION_STREAM);
    crate::tensor::no_grad(|| rd_loss(model, batch, cfg.beta, &mut Quantizer::Noise(&mut rng))?.loss.item())
}

/// The error for a non-finite loss or gradient at `stage`, after dumping
/// the batch that produced it when a dump directory is configured.
fn diverged(cfg: &TrainConfig, stage: &str, cause: &str, batch: &[Tensor]) -> Error {
    let mut msg = format!("training diverged at {stage}: {cause}");
    if let Some(dir) = &cfg.nan_dump_dir {
        match dump_batch(dir, stage, batch) {
            Ok(()) => {
                let _ = write!(msg, "; batch dumped to {}", dir.display());
            }
            Err(e) => {
                let _ = write!(msg, "; dumping the batch failed: {e}");
            }
        }
    }
    Error::Numeric(msg)
}

fn dump_batch(dir: &Path, stage: &str, batch: &[Tensor]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (t, frame) in batch.iter().enumerate() {
        let s = frame.shape();
        for n in 0..s[0] {
            crate::data::write_ppm(&dir.join(format!("{}_clip{n}_frame{t}.ppm", stage.replace(' ', "_"))), &frame.select0(n)?)?;
        }
    }
    Ok(())
}

/// Train `model` in place. `on_log` sees every logged row as it happens.
/// Deterministic given the model and config.
pub fn train(model: &mut Model, cfg: &TrainConfig, mut on_log: impl FnMut(&LogRow)) -> Result<TrainReport> {
    cfg.validate(model)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ VALIDATION_STREAM);
    let val_batch = cfg.source.batch(&mut val_rng, cfg.batch, cfg.frames_per_clip, cfg.crop)?;
    let initial_loss = validation_loss(model, cfg, &val_batch)
        .map_err(|e| diverged(cfg, "initial validation", &e.to_string(), &val_batch))?;
    let mut adam = Adam::for_params(&model.params);
    let mut log = Vec::new();
    for step in 0..cfg.steps {
        let batch = cfg.source.batch(&mut data_rng, cfg.batch, cfg.frames_per_clip, cfg.crop_at(step))?;
        let result = rd_loss(model, &batch, cfg.beta, &mut Quantizer::Noise(&mut noise_rng))
            .and_then(|l| l.loss.backward().map(|_| l));
        let parts = match result {
            Ok(p) if p.loss.value().is_finite() => p,
            Ok(_) => return Err(diverged(cfg, &format!("step {step}"), "non-finite loss", &batch)),
            Err(e) => return Err(diverged(cfg, &format!("step {step}"), &e.to_string(), &batch)),
        };
        if model.params.grads().iter().flatten().any(|g| !g.is_finite()) {
            return Err(diverged(cfg, &format!("step {step}"), "non-finite gradient", &batch));
        }
        let lr = cfg.lr_at(step);
        adam.step_store(&mut model.params, lr)?;
        if step % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps {
            let row = LogRow { step, loss: parts.loss.item()?, distortion: parts.distortion, rate: parts.rate, lr };
            on_log(&row);
            log.push(row);
        }
    }
    let final_loss = validation_loss(model, cfg, &val_batch)
        .map_err(|e| diverged(cfg, "final validation", &e.to_string(), &val_batch))?;
    Ok(TrainReport { log, initial_loss, final_loss })
}
