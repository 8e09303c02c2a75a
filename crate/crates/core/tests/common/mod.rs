//! Shared oracles for the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stavc::{Tensor, Var};

pub const FD_STEP: f64 = 1e-3;
/// The full loss is piecewise smooth (leaky ReLU, trilinear stencils); a
/// step of 1e-3 straddles kinks, 1e-5 stays inside one smooth piece.
pub const E2E_FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values with magnitude in `[0.1, 1.1)` and random sign, kept away
/// from the kinks of relu-like ops.
pub fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = 0.1 + rng.gen::<f64>();
        if rng.gen_bool(0.5) { m } else { -m }
    })
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Largest relative error between the tape gradient and central
/// differences of `sum(f(inputs) * r)` for a fixed random `r`. Relative
/// error is `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn max_grad_error(inputs: &[Tensor], f: impl Fn(&[Var]) -> stavc::Result<Var>) -> f64 {
    let probe_shape = {
        let vars: Vec<Var> = inputs.iter().map(|t| Var::constant(t.clone())).collect();
        f(&vars).expect("forward").shape().to_vec()
    };
    let r = uniform(&probe_shape, -1.0, 1.0, &mut rng(0xfd));
    let scalar = |ts: &[Tensor]| -> f64 {
        let vars: Vec<Var> = ts.iter().map(|t| Var::constant(t.clone())).collect();
        let out = f(&vars).expect("forward");
        out.value().data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let leaves: Vec<Var> = inputs.iter().map(|t| Var::leaf(t.clone(), true)).collect();
    let out = f(&leaves).expect("forward");
    out.mul(&Var::constant(r.clone())).unwrap().sum().unwrap().backward().unwrap();
    let mut worst: f64 = 0.0;
    for (k, leaf) in leaves.iter().enumerate() {
        let g = leaf.grad().unwrap_or_else(|| Tensor::zeros(leaf.shape()));
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (scalar(&plus) - scalar(&minus)) / (2.0 * FD_STEP);
            let a = g.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
        }
    }
    worst
}

pub type OpFn = Box<dyn Fn(&[Var]) -> stavc::Result<Var>>;

/// Every differentiable op with a small randomized input set.
pub fn op_cases() -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    use stavc::scale_space::{
        build_scale_space_volume, create_gaussian_kernel, downsample2x, gaussian_blur, scale_space_warp, upsample2x,
        FlowField,
    };
    use stavc::transforms::{maf_forward, maf_inverse, ScaleShift};
    let mut g = rng(7);
    let a = |s: &[usize], g: &mut ChaCha8Rng| away_from_zero(s, g);
    let pos = |s: &[usize], g: &mut ChaCha8Rng| uniform(s, 0.5, 2.0, g);
    let img = |g: &mut ChaCha8Rng| uniform(&[1, 2, 8, 8], 0.0, 1.0, g);
    let mut cases: Vec<(&'static str, Vec<Tensor>, OpFn)> = vec![
        ("add_broadcast", vec![a(&[2, 3, 2], &mut g), a(&[1, 3, 1], &mut g)], Box::new(|v| v[0].add(&v[1]))),
        ("sub_broadcast", vec![a(&[2, 3], &mut g), a(&[1, 3], &mut g)], Box::new(|v| v[0].sub(&v[1]))),
        ("mul", vec![a(&[2, 3], &mut g), a(&[2, 3], &mut g)], Box::new(|v| v[0].mul(&v[1]))),
        ("div", vec![a(&[2, 3], &mut g), pos(&[2, 3], &mut g)], Box::new(|v| v[0].div(&v[1]))),
        ("neg", vec![a(&[5], &mut g)], Box::new(|v| v[0].neg())),
        ("add_scalar", vec![a(&[5], &mut g)], Box::new(|v| v[0].add_scalar(0.3))),
        ("mul_scalar", vec![a(&[5], &mut g)], Box::new(|v| v[0].mul_scalar(-1.7))),
        ("square", vec![a(&[5], &mut g)], Box::new(|v| v[0].square())),
        ("exp", vec![a(&[5], &mut g)], Box::new(|v| v[0].exp())),
        ("ln", vec![pos(&[5], &mut g)], Box::new(|v| v[0].ln())),
        ("abs", vec![a(&[5], &mut g)], Box::new(|v| v[0].abs())),
        ("tanh", vec![a(&[5], &mut g)], Box::new(|v| v[0].tanh())),
        ("sigmoid", vec![a(&[5], &mut g)], Box::new(|v| v[0].sigmoid())),
        ("softplus", vec![a(&[5], &mut g)], Box::new(|v| v[0].softplus())),
        ("relu", vec![a(&[6], &mut g)], Box::new(|v| v[0].relu())),
        ("leaky_relu", vec![a(&[6], &mut g)], Box::new(|v| v[0].leaky_relu(0.2))),
        ("normal_cdf", vec![a(&[5], &mut g)], Box::new(|v| v[0].normal_cdf())),
        ("lower_bound_above", vec![pos(&[5], &mut g)], Box::new(|v| v[0].lower_bound(0.1))),
        ("sum", vec![a(&[2, 3], &mut g)], Box::new(|v| v[0].sum())),
        ("mean", vec![a(&[2, 3], &mut g)], Box::new(|v| v[0].mean())),
        ("reshape", vec![a(&[2, 3], &mut g)], Box::new(|v| v[0].reshape(&[3, 2])?.mul(&v[0].reshape(&[3, 2])?))),
        ("transpose01", vec![a(&[2, 3, 2], &mut g)], Box::new(|v| v[0].transpose01())),
        ("concat", vec![a(&[1, 2, 2], &mut g), a(&[1, 1, 2], &mut g)], Box::new(|v| Var::concat(&[v[0].clone(), v[1].clone()], 1))),
        ("narrow", vec![a(&[2, 4, 2], &mut g)], Box::new(|v| v[0].narrow(1, 1, 2))),
        ("bmm", vec![a(&[2, 2, 3], &mut g), a(&[2, 3, 2], &mut g)], Box::new(|v| v[0].bmm(&v[1]))),
        (
            "conv2d",
            vec![a(&[2, 2, 6, 6], &mut g), a(&[3, 2, 3, 3], &mut g), a(&[3], &mut g)],
            Box::new(|v| v[0].conv2d(&v[1], Some(&v[2]), 2, 1)),
        ),
        (
            "conv2d_k5s2",
            vec![a(&[1, 1, 8, 8], &mut g), a(&[2, 1, 5, 5], &mut g), a(&[2], &mut g)],
            Box::new(|v| v[0].conv2d(&v[1], Some(&v[2]), 2, 2)),
        ),
        (
            "conv2d_transpose",
            vec![a(&[1, 2, 3, 3], &mut g), a(&[2, 3, 5, 5], &mut g), a(&[3], &mut g)],
            Box::new(|v| v[0].conv2d_transpose(&v[1], Some(&v[2]), 2, 2, 1)),
        ),
        ("gaussian_blur", vec![img(&mut g)], Box::new(|v| gaussian_blur(&v[0], &create_gaussian_kernel(1.5)?))),
        ("downsample2x", vec![img(&mut g)], Box::new(|v| downsample2x(&v[0]))),
        ("upsample2x", vec![uniform(&[1, 2, 4, 4], 0.0, 1.0, &mut g)], Box::new(|v| upsample2x(&v[0]))),
        (
            "scale_space_volume",
            vec![uniform(&[1, 1, 8, 8], 0.0, 1.0, &mut g)],
            Box::new(|v| {
                let vol = build_scale_space_volume(&v[0], 1.0, 3)?;
                Var::concat(&vol.levels, 1)
            }),
        ),
        (
            "maf_forward",
            vec![a(&[2, 3], &mut g), a(&[2, 3], &mut g), pos(&[2, 3], &mut g)],
            Box::new(|v| maf_forward(&v[0], &ScaleShift::new(v[1].clone(), v[2].clone())?)),
        ),
        (
            "maf_inverse",
            vec![a(&[2, 3], &mut g), a(&[2, 3], &mut g), pos(&[2, 3], &mut g)],
            Box::new(|v| maf_inverse(&v[0], &ScaleShift::new(v[1].clone(), v[2].clone())?)),
        ),
        (
            "gaussian_bits",
            vec![uniform(&[6], -3.0, 3.0, &mut g), a(&[6], &mut g), uniform(&[6], 0.3, 3.0, &mut g)],
            Box::new(|v| stavc::entropy::DiscretizedGaussian::new(v[1].clone(), v[2].clone())?.bits(&v[0])),
        ),
    ];
    // Flow coordinates chosen off the integer lattice so the stencil is
    // locally fixed under the finite-difference step.
    let (h, w) = (8, 8);
    let frac = |g: &mut ChaCha8Rng, lo: f64, hi: f64| {
        Tensor::from_fn(&[1, 1, h, w], |_| {
            let v: f64 = g.gen_range(lo..hi);
            v.floor() + 0.1 + 0.8 * v.fract()
        })
    };
    cases.push((
        "scale_space_warp",
        vec![uniform(&[1, 2, h, w], 0.0, 1.0, &mut g), frac(&mut g, -1.5, 1.5), frac(&mut g, -1.5, 1.5), frac(&mut g, 0.0, 2.9)],
        Box::new(|v| {
            let vol = build_scale_space_volume(&v[0], 1.0, 3)?;
            scale_space_warp(&vol, &FlowField::new(v[1].clone(), v[2].clone(), v[3].clone())?)
        }),
    ));
    cases
}

/// Small STAT-SSF model with the structured prior.
pub fn small_config(variant: stavc::transforms::Variant, structured: bool) -> stavc::transforms::ModelConfig {
    stavc::transforms::ModelConfig {
        width: 4,
        latent: 3,
        hyper: 2,
        blocks: 2,
        gate_width: 4,
        features: 2,
        scale_depth: 3,
        ..stavc::transforms::ModelConfig::new(variant, structured)
    }
}

/// Move every parameter off its initial value so zero-initialized heads
/// leave the kinks of the warp stencil.
pub fn jitter(model: &mut stavc::transforms::Model, scale: f64, seed: u64) {
    let mut g = rng(seed);
    for i in 0..model.params.len() {
        let v = model.params.iter().nth(i).unwrap().value.value().clone();
        let noise = uniform(v.shape(), -scale, scale, &mut g);
        let noisy = v.zip_map(&noise, |x, n| x + n).unwrap();
        model.params.set(i, noisy).unwrap();
    }
}

/// Fix a test point for the end-to-end gradient check: jittered weights,
/// displacements off the integer lattice and the frame border, and wide
/// latent scales so no probability floor is active.
pub fn gradient_test_model(frames: &[Tensor]) -> stavc::transforms::Model {
    use stavc::transforms::{Model, Variant};
    let mut model = Model::new(small_config(Variant::StatSsf, true)).unwrap();
    jitter(&mut model, 0.05, 11);
    let flow = Tensor::new(&[5], vec![0.37, 0.41, 0.3, 0.0, 0.0]).unwrap();
    model.params.set_by_name("p.w.dec.1.bias", flow).unwrap();
    for branch in ["i", "p.w", "p.v"] {
        let name = format!("{branch}.hyper_dec.1.bias");
        let b = model.params.find(&name).unwrap().value.value().clone();
        let half = b.len() / 2;
        let wide = Tensor::from_fn(b.shape(), |k| if k < half { b.data()[k] } else { 3.0 });
        model.params.set_by_name(&name, wide).unwrap();
    }
    assert_eq!(floored_masses(&model, frames), 0, "test point has floored masses");
    model
}

/// Number of coded elements whose modelled mass is below the floor.
pub fn floored_masses(model: &stavc::transforms::Model, frames: &[Tensor]) -> usize {
    use stavc::entropy::{Quantizer, PMF_FLOOR};
    use stavc::transforms::LatentModel;
    let xs: Vec<Var> = frames.iter().map(|f| Var::constant(f.clone())).collect();
    let mut r = rng(99);
    let outs = stavc::train::run_clip(model, &xs, &mut Quantizer::Noise(&mut r)).unwrap();
    let mut count = 0;
    for l in outs.iter().flat_map(|o| &o.latents) {
        let p = match &l.model {
            LatentModel::Factorized(f) => f.pmf(&model.params, &l.hat).unwrap(),
            LatentModel::Gaussian(g) => g.pmf(&l.hat).unwrap(),
        };
        count += p.value().data().iter().filter(|&&x| x < PMF_FLOOR).count();
    }
    count
}

/// Worst relative error of the tape gradient of the R-D loss against
/// central differences, over `per_tensor` entries of every parameter.
pub fn rd_loss_grad_error(model: &mut stavc::transforms::Model, frames: &[Tensor], per_tensor: usize, h: f64) -> (f64, usize) {
    use stavc::entropy::Quantizer;
    use stavc::train::rd_loss;
    let eval = |m: &stavc::transforms::Model| {
        let mut r = rng(99);
        rd_loss(m, frames, 0.01, &mut Quantizer::Noise(&mut r)).unwrap()
    };
    let loss = eval(model);
    loss.loss.backward().unwrap();
    let grads = model.params.grads();
    let mut pick = rng(3);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for i in 0..model.params.len() {
        let base = model.params.iter().nth(i).unwrap().value.value().clone();
        for _ in 0..per_tensor.min(base.len()) {
            let j = pick.gen_range(0..base.len());
            let mut p = base.clone();
            p.data_mut()[j] += h;
            model.params.set(i, p.clone()).unwrap();
            let lp = stavc::no_grad(|| eval(model).loss.item().unwrap());
            p.data_mut()[j] -= 2.0 * h;
            model.params.set(i, p).unwrap();
            let lm = stavc::no_grad(|| eval(model).loss.item().unwrap());
            model.params.set(i, base.clone()).unwrap();
            let numeric = (lp - lm) / (2.0 * h);
            let a = grads[i].as_ref().map_or(0.0, |g| g.data()[j]);
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
            checked += 1;
        }
    }
    (worst, checked)
}
