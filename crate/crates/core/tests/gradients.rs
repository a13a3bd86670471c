//! Backpropagation against central finite differences in 64-bit.

mod common;

use common::*;
use plume::loss::{inverse_loss_grad, mse_grad, nll_grad, LossConfig};
use plume::model::ModelConfig;

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn nll_only() -> LossConfig {
    LossConfig {
        inverse_weight: 0.0,
        ..LossConfig::default()
    }
}

fn check_all_groups(cfg: ModelConfig, loss: LossConfig, seed: u64) {
    let model = tiny_model(cfg, seed);
    let p = tiny_problem(seed + 100);
    for g in 0..model.params().len() {
        let idx = slice_indices(&model, g, 10);
        let (err, scale) = fd_rel_error(&model, &p, &loss, &idx, H);
        if scale < 1e-10 {
            continue;
        }
        assert!(err < TOL, "parameter group {g}: relative error {err:.3e} (|grad| {scale:.3e})");
    }
}

#[test]
fn nll_output_gradient() {
    let mu = vec![0.3, -0.2, 1.1, 0.0];
    let s2 = vec![0.5, 2.0, 0.1, 1.3];
    let y = vec![0.1, 0.4, 1.0, -0.7];
    let (_, dmu, ds) = nll_grad(&mu, &s2, &y);
    for i in 0..4 {
        let f = |m: &[f64], s: &[f64]| nll_grad(m, s, &y).0;
        let (mut a, mut b) = (mu.clone(), mu.clone());
        a[i] += H;
        b[i] -= H;
        assert!(((f(&a, &s2) - f(&b, &s2)) / (2.0 * H) - dmu[i]).abs() < 1e-9);
        let (mut a, mut b) = (s2.clone(), s2.clone());
        a[i] += H;
        b[i] -= H;
        assert!(((f(&mu, &a) - f(&mu, &b)) / (2.0 * H) - ds[i]).abs() < 1e-6 * (1.0 + ds[i].abs()));
    }
    let (_, dm) = mse_grad(&mu, &y);
    for i in 0..4 {
        let (mut a, mut b) = (mu.clone(), mu.clone());
        a[i] += H;
        b[i] -= H;
        assert!(((mse_grad(&a, &y).0 - mse_grad(&b, &y).0) / (2.0 * H) - dm[i]).abs() < 1e-9);
    }
}

#[test]
fn inverse_output_gradient() {
    let p = tiny_problem(7);
    let det: Vec<f64> = (0..16).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
    let (_, g) = inverse_loss_grad(&det, &p.target, 5.0, 0.5);
    for i in 0..16 {
        let (mut a, mut b) = (det.clone(), det.clone());
        a[i] += H;
        b[i] -= H;
        let num = (inverse_loss_grad(&a, &p.target, 5.0, 0.5).0.total() - inverse_loss_grad(&b, &p.target, 5.0, 0.5).0.total()) / (2.0 * H);
        assert!((num - g[i]).abs() <= 1e-6 * (1.0 + g[i].abs()), "entry {i}: {num} vs {}", g[i]);
    }
}

#[test]
fn nll_through_network() {
    check_all_groups(tiny_config(), nll_only(), 1);
}

#[test]
fn inverse_through_network() {
    let loss = LossConfig {
        inverse_weight: 1.0,
        ..LossConfig::default()
    };
    check_all_groups(tiny_config(), loss, 2);
}

#[test]
fn mse_variant_through_network() {
    let loss = LossConfig {
        nll: false,
        ..LossConfig::default()
    };
    check_all_groups(tiny_config(), loss, 3);
}

#[test]
fn homoscedastic_and_shared_sigma() {
    let cfg = ModelConfig {
        heteroscedastic: false,
        shared_sigma: true,
        ..tiny_config()
    };
    check_all_groups(cfg, LossConfig::default(), 4);
}

#[test]
fn diffusion_width_gradients_are_nonzero_and_match() {
    let model = tiny_model(tiny_config(), 5);
    let p = tiny_problem(55);
    let loss = LossConfig::default();
    // each layer stores weights, bias, sigma_raw in that order
    for l in 0..model.depth() {
        let (off, _) = group_offset(&model, 3 * l + 2);
        let (err, scale) = fd_rel_error(&model, &p, &loss, &[off], H);
        // the last layer's mask is never consumed
        if l + 1 < model.depth() {
            assert!(scale > 1e-8, "layer {l}: sigma gradient vanished");
        }
        assert!(err < TOL, "layer {l}: relative error {err:.3e}");
    }
}
