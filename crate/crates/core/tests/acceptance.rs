//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Arguments are substring filters on criterion names; without any, every
//! criterion runs. Report artifacts go to `target/acceptance/`.

mod common;

use common::*;
use rand::Rng;
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::time::{Duration, Instant};
use stavc::codec::{encode_video, verify_sync};
use stavc::data::{natural_image, Clip, SyntheticSource};
use stavc::entropy::{
    gaussian_folded_pmf, gaussian_pmf, quantize_eval, DiscretizedGaussian, FactorizedPrior, HyperSynthesis, Quantizer,
    SCALE_FLOOR,
};
use stavc::eval::{evaluate, psnr, RdPoint};
use stavc::nn::{hyper_analysis_spec, ConvStack, Init, ParamStore};
use stavc::scale_space::{
    build_scale_space_volume, create_gaussian_kernel, gaussian_blur, scale_space_warp, FlowField,
};
use stavc::train::{loss_csv, train, Adam, TrainConfig};
use stavc::transforms::{maf_forward, maf_inverse, Model, ModelConfig, ScaleShift, Variant};
use stavc::{no_grad, Tensor, Var};

/// Architecture used wherever the suite trains: the default topology at
/// half width and one block fewer, so the 2000-step run fits a CPU budget.
fn desk_config(variant: Variant, structured: bool) -> ModelConfig {
    ModelConfig {
        width: 32,
        latent: 16,
        hyper: 16,
        blocks: 3,
        gate_width: 16,
        features: 4,
        ..ModelConfig::new(variant, structured)
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn artifacts() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance");
    std::fs::create_dir_all(&dir).expect("artifact directory");
    dir
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut worst_op = ("", 0.0f64);
    for (name, inputs, f) in op_cases() {
        let e = max_grad_error(&inputs, f);
        if e >= worst_op.1 {
            worst_op = (name, e);
        }
    }
    let frames: Vec<Tensor> = (0..2).map(|t| uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng(20 + t))).collect();
    let mut model = gradient_test_model(&frames);
    let (e2e, checked) = rd_loss_grad_error(&mut model, &frames, 4, E2E_FD_STEP);
    let elapsed = start.elapsed();
    outcome(
        worst_op.1 < 1e-4 && e2e < 1e-3 && elapsed < Duration::from_secs(60),
        format!(
            "{} ops, worst {} rel err {:.2e} (< 1e-4, step {FD_STEP:e}); STAT-SSF rd_loss 2x16x16, {checked} coords, \
             worst rel err {e2e:.2e} (< 1e-3, step {E2E_FD_STEP:e}); {:.1}s",
            op_cases().len(),
            worst_op.0,
            worst_op.1,
            secs(elapsed)
        ),
    )
}

fn flow_invertibility() -> Outcome {
    let mut g = rng(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let shape = [1, 3, 8, 8];
        let y = uniform(&shape, -10.0, 10.0, &mut g);
        let mu = uniform(&shape, -5.0, 5.0, &mut g);
        let sigma = uniform(&shape, 0.1, 10.0, &mut g);
        let ss = ScaleShift::new(Var::constant(mu), Var::constant(sigma)).unwrap();
        let y = Var::constant(y);
        let back = maf_inverse(&maf_forward(&y, &ss).unwrap(), &ss).unwrap();
        worst = worst.max(back.value().zip_map(y.value(), |a, b| (a - b).abs()).unwrap().max_abs());
    }
    outcome(worst <= 1e-5, format!("100 cases, sigma in [0.1, 10], sup error {worst:.2e} (<= 1e-5)"))
}

fn min_time(reps: usize, mut f: impl FnMut()) -> Duration {
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed()
        })
        .min()
        .unwrap()
}

/// Direct blur with the full 2D kernel, edge-replicate padding. Timing
/// baseline only.
fn dense_blur(img: &Tensor, kernel: &stavc::scale_space::GaussianKernel) -> Tensor {
    let shape = img.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let planes = img.len() / (h * w);
    let taps = &kernel.taps;
    let r = kernel.radius() as isize;
    let dense: Vec<f64> = taps.iter().flat_map(|a| taps.iter().map(move |b| a * b)).collect();
    let n = taps.len();
    let src = img.data();
    let mut out = Tensor::zeros(shape);
    let dst = out.data_mut();
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ky in 0..n {
                    let sy = (y as isize + ky as isize - r).clamp(0, h as isize - 1) as usize;
                    let row = &src[base + sy * w..base + (sy + 1) * w];
                    let kr = &dense[ky * n..(ky + 1) * n];
                    for (kx, &k) in kr.iter().enumerate() {
                        let sx = (x as isize + kx as isize - r).clamp(0, w as isize - 1) as usize;
                        acc += k * row[sx];
                    }
                }
                dst[base + y * w + x] = acc;
            }
        }
    }
    out
}

fn scale_space_oracle() -> Outcome {
    let start = Instant::now();
    let size = 128;
    let images: Vec<Var> = (1..=3)
        .map(|s| {
            let img = natural_image(s, size, size).unwrap();
            Var::constant(img.reshape(&[1, 3, size, size]).unwrap())
        })
        .collect();
    let mut worst = (f64::INFINITY, 0.0, 0, 0);
    let mut speedups = Vec::new();
    for sigma0 in [1.0, 1.5] {
        for depth in 1..=4usize {
            for img in &images {
                let vol = build_scale_space_volume(img, sigma0, depth).unwrap();
                for k in 1..=depth {
                    let kernel = create_gaussian_kernel(vol.composed_variances[k].sqrt()).unwrap();
                    let direct = gaussian_blur(img, &kernel).unwrap();
                    let p = psnr(direct.value(), vol.levels[k].value()).unwrap();
                    if p < worst.0 {
                        worst = (p, sigma0, depth, k);
                    }
                }
            }
        }
        // Construction cost of the whole volume against one direct blur at
        // the top composed sigma, both as a dense 2D kernel and separably.
        let timing_img = Var::constant(natural_image(9, 256, 256).unwrap().reshape(&[1, 3, 256, 256]).unwrap());
        let top = *stavc::scale_space::composed_variances(sigma0, 4).last().unwrap();
        let kernel = create_gaussian_kernel(top.sqrt()).unwrap();
        let pyramid = min_time(5, || {
            build_scale_space_volume(&timing_img, sigma0, 4).unwrap();
        });
        let dense = min_time(2, || {
            dense_blur(timing_img.value(), &kernel);
        });
        let separable = min_time(5, || {
            gaussian_blur(&timing_img, &kernel).unwrap();
        });
        speedups.push((sigma0, secs(dense) / secs(pyramid), secs(separable) / secs(pyramid)));
    }
    let elapsed = start.elapsed();
    let min_speedup = speedups.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    outcome(
        worst.0 >= 30.0 && min_speedup >= 5.0 && elapsed < Duration::from_secs(60),
        format!(
            "3 images, sigma0 in {{1, 1.5}}, M <= 4: min PSNR {:.2} dB (sigma0 {}, M {}, level {}) (>= 30); \
             top-level speedup {} (>= 5x vs dense); {:.1}s",
            worst.0,
            worst.1,
            worst.2,
            worst.3,
            speedups
                .iter()
                .map(|(s, d, x)| format!("sigma0 {s}: {d:.0}x vs dense kernel ({x:.1}x vs separable)"))
                .collect::<Vec<_>>()
                .join(", "),
            secs(elapsed)
        ),
    )
}

fn warp_identities() -> Outcome {
    let (h, w) = (32, 32);
    let x = uniform(&[2, 3, h, w], 0.0, 1.0, &mut rng(3));
    let vol = build_scale_space_volume(&Var::constant(x.clone()), 1.5, 4).unwrap();
    let zero = scale_space_warp(&vol, &FlowField::constant(2, h, w, 0.0, 0.0, 0.0)).unwrap();
    let exact = zero.value() == &x;
    let mut worst: f64 = 0.0;
    let shifts = [(1i64, 0i64), (0, 1), (-2, 3), (4, -1), (-3, -3)];
    for (dx, dy) in shifts {
        let out = scale_space_warp(&vol, &FlowField::constant(2, h, w, dx as f64, dy as f64, 0.0)).unwrap();
        for plane in 0..6 {
            for i in 4..h as i64 - 4 {
                for j in 4..w as i64 - 4 {
                    let got = out.value().data()[(plane * h + i as usize) * w + j as usize];
                    let want = x.data()[(plane * h + (i + dy) as usize) * w + (j + dx) as usize];
                    worst = worst.max((got - want).abs());
                }
            }
        }
    }
    outcome(
        exact && worst == 0.0,
        format!("zero flow exact: {exact}; {} integer shifts, interior max error {worst:e}", shifts.len()),
    )
}

fn combos() -> Vec<(Variant, bool)> {
    Variant::ALL
        .iter()
        .flat_map(|&v| [(v, false), (v, true)])
        .filter(|&(v, s)| !(v == Variant::Tat && s))
        .collect()
}

fn test_clips(count: u64, frames: usize) -> Vec<Clip> {
    let source = SyntheticSource { seed: 1234, ..SyntheticSource::default() };
    (0..count).map(|i| source.generate_clip(i, frames, 64, 64).unwrap()).collect()
}

fn codec_soundness() -> Outcome {
    let start = Instant::now();
    let clip = &test_clips(1, 10)[0];
    let mut failures = Vec::new();
    let mut worst_excess: f64 = f64::NEG_INFINITY;
    let mut coded = 0;
    for (variant, structured) in combos() {
        let fresh = Model::new(desk_config(variant, structured)).unwrap();
        let mut trained = fresh.clone();
        let cfg = TrainConfig {
            steps: 40,
            crop: 32,
            final_crop: 32,
            batch: 2,
            frames_per_clip: 2,
            lr_initial: 1e-3,
            lr_decayed: 1e-3,
            seed: 77,
            ..TrainConfig::default()
        };
        train(&mut trained, &cfg, |_| {}).unwrap();
        for (label, model) in [("random", &fresh), ("trained", &trained)] {
            let tag = format!("{variant}/{}/{label}", if structured { "structured" } else { "factorized" });
            let encoded = match encode_video(model, &clip.frames, 0.01) {
                Ok(e) => e,
                Err(e) => {
                    failures.push(format!("{tag}: encode failed: {e}"));
                    continue;
                }
            };
            match verify_sync(model, &encoded) {
                Ok(d) if d.frames == encoded.recons => {}
                Ok(_) => failures.push(format!("{tag}: decoded frames differ")),
                Err(e) => failures.push(format!("{tag}: {e}")),
            }
            for c in &encoded.chunks {
                let excess = (c.actual_bits - c.estimated_bits).abs() - (0.01 * c.estimated_bits + 128.0);
                worst_excess = worst_excess.max(excess);
                if !c.within_tolerance() {
                    failures.push(format!("{tag}: {c:?}"));
                }
            }
            coded += 1;
        }
    }
    let tat_structured_rejected =
        matches!(Model::new(desk_config(Variant::Tat, true)), Err(stavc::Error::Usage(_)));
    if !tat_structured_rejected {
        failures.push("TAT with the structured prior was accepted".into());
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(300);
    let mut detail = format!(
        "{} variant x prior combos x {{random, trained}} = {coded} models, 10x64x64: bit-exact decode, \
         chunk size within 1% + 128 bits (worst margin {:.1} bits); TAT has no motion latent, so TAT with the \
         structured prior is rejected as a usage error: {tat_structured_rejected}; {:.0}s",
        combos().len(),
        -worst_excess,
        secs(elapsed)
    );
    if !failures.is_empty() {
        detail.push_str(&format!("; failures: {}", failures.join("; ")));
    }
    outcome(pass, detail)
}

fn entropy_normalization() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut g = rng(6);
    let mut scales: Vec<f64> = (0..=40).map(|i| SCALE_FLOOR * (64.0f64 / SCALE_FLOOR).powf(i as f64 / 40.0)).collect();
    scales.push(64.0);
    for &scale in &scales {
        for _ in 0..5 {
            let mean: f64 = g.gen_range(-20.0..20.0);
            let lo = (mean - 20.0 * scale).floor() as i32 - 1;
            let hi = (mean + 20.0 * scale).ceil() as i32 + 1;
            let bins: f64 = (lo..=hi).map(|k| gaussian_pmf(k as f64, mean, scale)).sum();
            let folded: f64 = gaussian_folded_pmf(mean, scale, lo, hi).iter().sum();
            let ks: Vec<f64> = (lo..=hi).map(f64::from).collect();
            let n = ks.len();
            let model = DiscretizedGaussian::new(
                Var::constant(Tensor::full(&[n], mean)),
                Var::constant(Tensor::full(&[n], scale)),
            )
            .unwrap();
            let tape = model.pmf(&Var::constant(Tensor::new(&[n], ks).unwrap())).unwrap().value().sum();
            worst = worst.max((bins - 1.0).abs()).max((folded - 1.0).abs()).max((tape - 1.0).abs());
        }
    }
    let mut worst_f: f64 = 0.0;
    for (i, &scale) in scales.iter().enumerate().step_by(4) {
        let mut ps = ParamStore::new();
        let prior = FactorizedPrior::new(&mut ps, &mut rng(i as u64), "f", 3, scale).unwrap();
        for c in 0..3 {
            let (lo, hi) = prior.tail_bounds(&ps, c).unwrap();
            let folded: f64 = prior.folded_pmf(&ps, c, lo, hi).unwrap().iter().sum();
            let n = (hi - lo + 1) as usize;
            let ys = Tensor::from_fn(&[1, 3, 1, n], |j| (lo + (j % n) as i32) as f64);
            let pmf = prior.pmf(&ps, &Var::constant(ys)).unwrap();
            let bins: f64 = pmf.value().data()[c * n..(c + 1) * n].iter().sum();
            worst_f = worst_f.max((folded - 1.0).abs()).max((bins - 1.0).abs());
        }
    }
    outcome(
        worst < 1e-6 && worst_f < 1e-6,
        format!(
            "{} scales in [0.04, 64]: Gaussian max |sum - 1| {worst:.2e}; factorized max |sum - 1| {worst_f:.2e} (< 1e-6)",
            scales.len()
        ),
    )
}

fn same_params(a: &Model, b: &Model) -> bool {
    a.params.iter().zip(b.params.iter()).all(|(p, q)| p.value.value() == q.value.value())
}

fn desk_training() -> Outcome {
    let start = Instant::now();
    let cfg = TrainConfig::default();
    let mut model = Model::new(desk_config(Variant::StatSsf, true)).unwrap();
    let report = train(&mut model, &cfg, |row| {
        if row.step % 200 == 0 {
            println!("    step {:>4}  loss {:.5}  D {:.5}  R {:.4}", row.step, row.loss, row.distortion, row.rate);
        }
    })
    .unwrap();
    let elapsed = start.elapsed();
    let dir = artifacts();
    std::fs::write(dir.join("stat_ssf_loss.csv"), loss_csv(&report.log)).unwrap();
    stavc::checkpoint::save(
        &dir.join("stat_ssf_2000.ckpt"),
        &model,
        &stavc::checkpoint::CheckpointMeta::new(&model.config, cfg.beta, cfg.steps as u64),
    )
    .unwrap();

    // Reproducibility: the same seed gives bit-identical weights and logs.
    let short = TrainConfig { steps: 20, log_every: 1, ..TrainConfig::default() };
    let mut a = Model::new(desk_config(Variant::StatSsf, true)).unwrap();
    let mut b = Model::new(desk_config(Variant::StatSsf, true)).unwrap();
    let ra = train(&mut a, &short, |_| {}).unwrap();
    let rb = train(&mut b, &short, |_| {}).unwrap();
    let reproducible = same_params(&a, &b) && loss_csv(&ra.log) == loss_csv(&rb.log);
    // Before the short run's decay both schedules coincide, so shared steps
    // must log identical losses.
    let shared: Vec<_> = report.log.iter().filter(|r| r.step < short.decay_step()).collect();
    let prefix_matches = !shared.is_empty()
        && shared.iter().all(|y| ra.log.iter().any(|x| x.step == y.step && x.loss.to_bits() == y.loss.to_bits()));

    let ratio = report.final_loss / report.initial_loss;
    outcome(
        ratio < 0.5 && reproducible && elapsed < Duration::from_secs(3600),
        format!(
            "STAT-SSF, beta 0.01, {} steps: validation rd_loss {:.4} -> {:.4} ({:.1}% of initial, < 50%); \
             two seeded 20-step runs bit-identical: {reproducible} (log prefix matches the long run: {prefix_matches}); \
             {:.0}s",
            cfg.steps,
            report.initial_loss,
            report.final_loss,
            100.0 * ratio,
            secs(elapsed)
        ),
    )
}

fn comparative_report() -> Outcome {
    let start = Instant::now();
    let steps = 300;
    let cfg = TrainConfig { steps, ..TrainConfig::default() };
    let clips = test_clips(3, 10);
    let mut rows: Vec<(Variant, f64, RdPoint)> = Vec::new();
    for variant in [Variant::StatSsf, Variant::Ssf, Variant::Tat] {
        let mut model = Model::new(desk_config(variant, false)).unwrap();
        let report = train(&mut model, &cfg, |_| {}).unwrap();
        let points: Vec<RdPoint> = clips.iter().map(|c| evaluate(&model, c, cfg.beta, false).unwrap()).collect();
        let n = points.len() as f64;
        let mean = RdPoint {
            variant: variant.name().to_string(),
            beta: cfg.beta,
            bpp: points.iter().map(|p| p.bpp).sum::<f64>() / n,
            psnr: points.iter().map(|p| p.psnr).sum::<f64>() / n,
            frames: points.iter().map(|p| p.frames).sum(),
            seconds: 0.0,
        };
        rows.push((variant, report.final_loss, mean));
    }
    let mut table = String::from("variant,beta,steps,val_loss,bpp,psnr,frames\n");
    for (v, loss, p) in &rows {
        table.push_str(&format!("{},{},{steps},{loss:.5},{:.4},{:.3},{}\n", v.name(), p.beta, p.bpp, p.psnr, p.frames));
    }
    std::fs::write(artifacts().join("comparative.csv"), &table).unwrap();
    for line in table.lines() {
        println!("    {line}");
    }
    let loss = |v: Variant| rows.iter().find(|r| r.0 == v).unwrap().1;
    let ordering = if loss(Variant::StatSsf) <= loss(Variant::Ssf) { "STAT-SSF <= SSF" } else { "STAT-SSF > SSF" };
    outcome(
        rows.len() == 3,
        format!(
            "table emitted for STAT-SSF, SSF, TAT at beta {} after {steps} steps each (report only; \
             validation-loss ordering {ordering}); {:.0}s",
            cfg.beta,
            secs(start.elapsed())
        ),
    )
}

/// Correlated latents: `w` with a smooth spatially varying scale, `v` a
/// noisy linear function of `w` whose gain alternates in sign by channel.
fn correlated_latents(rng: &mut ChaCha8Rng, n: usize, c: usize, s: usize) -> (Tensor, Tensor) {
    let mut w = Tensor::zeros(&[n, c, s, s]);
    let mut v = Tensor::zeros(&[n, c, s, s]);
    for b in 0..n {
        let (fx, fy, ph): (f64, f64, f64) = (rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4), rng.gen_range(0.0..6.3));
        for ch in 0..c {
            let gain = if ch % 2 == 0 { 1.0 } else { -0.7 };
            for y in 0..s {
                for x in 0..s {
                    let i = ((b * c + ch) * s + y) * s + x;
                    let scale = 3.0 + 2.5 * (fx * x as f64 + fy * y as f64 + ph).sin();
                    let z: f64 = rng.sample(StandardNormal);
                    let e: f64 = rng.sample(StandardNormal);
                    w.data_mut()[i] = scale * z;
                    v.data_mut()[i] = gain * scale * z + 0.5 * e;
                }
            }
        }
    }
    (w, v)
}

struct VEntropyModel {
    ps: ParamStore,
    w_hyper_enc: ConvStack,
    hyper_enc: ConvStack,
    prior: FactorizedPrior,
    hyper_dec: HyperSynthesis,
}

impl VEntropyModel {
    fn new(latent: usize, hyper: usize, structured: bool) -> Self {
        let mut ps = ParamStore::new();
        let mut g = rng(31);
        let w_hyper_enc =
            ConvStack::new(&mut ps, &mut g, "w_hyper_enc", &hyper_analysis_spec(latent, hyper), Init::Kaiming).unwrap();
        let hyper_enc =
            ConvStack::new(&mut ps, &mut g, "hyper_enc", &hyper_analysis_spec(latent, hyper), Init::Kaiming).unwrap();
        let prior = FactorizedPrior::new(&mut ps, &mut g, "prior", hyper, 10.0).unwrap();
        let hyper_dec =
            HyperSynthesis::new(&mut ps, &mut g, "hyper_dec", hyper, latent, Some((hyper, latent)), structured).unwrap();
        Self { ps, w_hyper_enc, hyper_enc, prior, hyper_dec }
    }

    /// Bits of `v` given `ŵ`, per latent element: with the hyper-latent
    /// side information, and for the latent alone.
    fn bits(&self, w_hat: &Var, v: &Var, q: &mut Quantizer<'_>) -> (Var, Var) {
        let ps = &self.ps;
        // ŵʰ comes from a fixed encoder: both priors see the same side input.
        let wh = Var::constant(quantize_eval(self.w_hyper_enc.forward(ps, w_hat).unwrap().value()));
        let vh = q.apply(&self.hyper_enc.forward(ps, v).unwrap()).unwrap();
        let hyper_bits = self.prior.bits(ps, &vh).unwrap().sum().unwrap();
        let gauss = self.hyper_dec.forward(ps, &vh, Some((&wh, w_hat))).unwrap();
        let v_hat = q.apply(v).unwrap();
        let bits = gauss.bits(&v_hat).unwrap().sum().unwrap();
        let per = 1.0 / v.value().len() as f64;
        (bits.add(&hyper_bits).unwrap().mul_scalar(per).unwrap(), bits.mul_scalar(per).unwrap())
    }
}

fn structured_prior_gain() -> Outcome {
    let start = Instant::now();
    let (latent, hyper, size, steps) = (8, 8, 16, 600);
    let mut held_rng = rng(42);
    let (w_test, v_test) = correlated_latents(&mut held_rng, 8, latent, size);
    let w_test_hat = Var::constant(quantize_eval(&w_test));
    let mut results = Vec::new();
    for structured in [false, true] {
        let mut m = VEntropyModel::new(latent, hyper, structured);
        let mut adam = Adam::for_params(&m.ps);
        let mut noise = rng(43);
        let mut batches = rng(41);
        for _ in 0..steps {
            let (w, v) = correlated_latents(&mut batches, 4, latent, size);
            let (loss, _) = m.bits(&Var::constant(quantize_eval(&w)), &Var::constant(v), &mut Quantizer::Noise(&mut noise));
            loss.backward().unwrap();
            adam.step_store(&mut m.ps, 1e-3).unwrap();
        }
        let (total, latent_only) = no_grad(|| m.bits(&w_test_hat, &Var::constant(v_test.clone()), &mut Quantizer::Round));
        results.push((total.item().unwrap(), latent_only.item().unwrap()));
    }
    let (factorized, structured) = (results[0].0, results[1].0);
    let (factorized_v, structured_v) = (results[0].1, results[1].1);
    let elapsed = start.elapsed();
    outcome(
        structured < factorized && structured_v < factorized_v && elapsed < Duration::from_secs(1800),
        format!(
            "v = gain * w + noise, {steps} steps each: held-out bits per v element {structured:.4} (structured) vs \
             {factorized:.4} (factorized) with side information, gain {:.1}%; latent only {structured_v:.4} vs \
             {factorized_v:.4}; {:.0}s",
            100.0 * (1.0 - structured / factorized),
            secs(elapsed)
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: Vec<Criterion> = vec![
        ("1 gradient integrity", gradient_integrity),
        ("2 flow invertibility", flow_invertibility),
        ("3 scale-space oracle", scale_space_oracle),
        ("4 warp identities", warp_identities),
        ("5 codec soundness", codec_soundness),
        ("6 entropy normalization", entropy_normalization),
        ("7 desk-scale training", desk_training),
        ("8 comparative report", comparative_report),
        ("9 structured-prior rate gain", structured_prior_gain),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (name, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let o = run();
        if !o.pass {
            failed += 1;
        }
        println!("{} [{name}] {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
