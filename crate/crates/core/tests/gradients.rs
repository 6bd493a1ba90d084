mod common;

use common::{case, worst, TOL};

fn check(name: &str) {
    let (err, seed) = worst(case(name));
    assert!(err < TOL, "{name} instance {seed}: relative error {err:e}");
}

#[test]
fn conv2d() {
    check("conv2d");
}

#[test]
fn elementwise_ops() {
    for name in ["relu", "add", "scale", "sqrt", "mean_abs", "mean_sq"] {
        check(name);
    }
}

#[test]
fn structural_ops() {
    check("concat_channels");
    check("gather");
}

#[test]
fn stop_gradient_against_frozen_differences() {
    check("stop_gradient");
}

#[test]
fn total_loss_against_frozen_target() {
    check("l_total");
}
