//! Finite-difference gradient checks in 64-bit, ten random instances per op.

mod common;

use common::grad;

const INSTANCES: u64 = 10;
const TOL: f64 = 1e-5;

fn check(op: &str, f: grad::Check) {
    for seed in 0..INSTANCES {
        let err = f(seed);
        assert!(err < TOL, "{} instance {}: relative error {:.3e}", op, seed, err);
    }
}

#[test]
fn conv2d_gradients() {
    check("conv2d", grad::conv2d);
}

#[test]
fn conv3d_gradients() {
    check("conv3d", grad::conv3d);
}

#[test]
fn fig_conv_gradients() {
    check("fig_conv", grad::fig_conv);
}

#[test]
fn trilinear_sampling_gradients() {
    check("trilinear", grad::trilinear_sampling);
}

#[test]
fn layer_norm_and_gelu_gradients() {
    check("layer_norm", grad::layer_norm_and_gelu);
}

#[test]
fn point_to_grid_gradients() {
    check("point_to_grid", grad::point_to_grid);
}

#[test]
fn fusion_gradients() {
    check("fusion", grad::fusion);
}

#[test]
fn drag_head_gradients() {
    check("drag_head", grad::drag_head);
}

#[test]
fn pressure_head_gradients() {
    check("pressure_head", grad::pressure_head);
}

#[test]
fn joint_loss_gradients() {
    check("joint_loss", grad::joint_loss);
}

#[test]
fn end_to_end_gradient() {
    for seed in [4, 5] {
        let err = grad::end_to_end(seed);
        assert!(err < 1e-4, "end-to-end instance {}: relative error {:.3e}", seed, err);
    }
}

