mod common;

use common::*;
use stavc::entropy::FactorizedPrior;
use stavc::nn::ParamStore;
use stavc::{Tensor, Var};

#[test]
fn every_op_matches_central_differences() {
    for (name, inputs, f) in op_cases() {
        let err = max_grad_error(&inputs, f);
        assert!(err < 1e-4, "{name}: relative error {err:e}");
    }
}

#[test]
fn factorized_prior_bits_gradient_reaches_parameters() {
    let mut ps = ParamStore::new();
    let prior = FactorizedPrior::new(&mut ps, &mut rng(1), "p", 2, 10.0).unwrap();
    let y = Var::constant(uniform(&[1, 2, 2, 2], -3.0, 3.0, &mut rng(2)));
    prior.bits(&ps, &y).unwrap().sum().unwrap().backward().unwrap();
    let base = ps.iter().next().unwrap().value.value().clone();
    let grad = ps.grads()[0].clone().unwrap();
    for j in 0..base.len() {
        let mut at = |d: f64| {
            let mut p = base.clone();
            p.data_mut()[j] += d;
            ps.set(0, p).unwrap();
            prior.bits(&ps, &y).unwrap().sum().unwrap().item().unwrap()
        };
        let numeric = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
        let a = grad.data()[j];
        assert!((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3) < 1e-4, "{j}: {a} vs {numeric}");
    }
}

#[test]
fn stat_ssf_rd_loss_matches_central_differences() {
    let frames: Vec<Tensor> = (0..2).map(|t| uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng(20 + t))).collect();
    let mut model = gradient_test_model(&frames);
    let (err, checked) = rd_loss_grad_error(&mut model, &frames, 4, E2E_FD_STEP);
    assert!(checked > 100);
    assert!(err < 1e-3, "relative error {err:e}");
}
