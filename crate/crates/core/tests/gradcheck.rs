mod common;

use common::{gradient_worst, INSTANCES, MAX_REL_ERROR, OPS};

fn run(name: &str) {
    let (_, op) = OPS.iter().find(|(n, _)| *n == name).unwrap();
    let worst = gradient_worst(*op, INSTANCES, 0x5eed);
    assert!(worst < MAX_REL_ERROR, "{name}: worst relative error {worst:e}");
}

#[test]
fn elementwise() {
    run("elementwise");
}

#[test]
fn matmul() {
    run("matmul");
}

#[test]
fn conv2d() {
    run("conv2d");
}

#[test]
fn pool2d() {
    run("pool2d");
}

#[test]
fn batchnorm2d() {
    run("batchnorm2d");
}

#[test]
fn softmax_cross_entropy() {
    run("softmax_cross_entropy");
}

#[test]
fn attribute_term() {
    run("attribute_term");
}

#[test]
fn full_model() {
    run("full_model");
}
