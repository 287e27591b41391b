#![allow(dead_code)]

use std::collections::BTreeMap;

use attrassist::attrloss::{attribute_term, AttributeCenterBank};
use attrassist::diffcore::{
    finite_diff_check, BatchNormConfig, Elementwise, Mode, PoolKind, Reduction, Tape, Tensor, Var,
};
use attrassist::model::{Model, ModelConfig, ParamKind, ParameterSet};
use attrassist::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-3;
pub const MAX_REL_ERROR: f64 = 1e-4;
pub const INSTANCES: usize = 10;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values at least `gap` away from zero so a `±EPS` probe never crosses a ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values spaced well beyond `EPS` so max-pool winners never change.
fn spaced(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Tensor::new(shape.to_vec(), order.into_iter().map(|i| i as f64 * 0.05 - 1.0).collect()).unwrap()
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output coordinate matters.
fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let shaped = tape.reshape(w, tape.value(out).shape().to_vec().as_slice())?;
    let prod = tape.mul(out, shaped)?;
    Ok(tape.sum(prod))
}

fn weights_for(rng: &mut ChaCha8Rng, len: usize) -> Tensor {
    random(rng, &[len])
}

fn check(params: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Result<Var>, seed: u64) -> f64 {
    finite_diff_check(params, build, EPS, Some(40), seed).unwrap().max_rel_error
}

fn elementwise(rng: &mut ChaCha8Rng, i: usize) -> f64 {
    let shape = [1 + rng.random_range(0..4), 1 + rng.random_range(0..5)];
    let n = shape[0] * shape[1];
    let kinds = [Elementwise::Add, Elementwise::Sub, Elementwise::Mul, Elementwise::Relu, Elementwise::Scale(-1.7)];
    let kind = kinds[i % kinds.len()];
    let a = away_from_zero(rng, &shape, 0.05);
    let b = random(rng, &shape);
    let w = weights_for(rng, n);
    let binary = matches!(kind, Elementwise::Add | Elementwise::Sub | Elementwise::Mul);
    let params = if binary { vec![a, b] } else { vec![a] };
    check(
        &params,
        |t, v| {
            let out = t.elementwise(kind, v[0], v.get(1).copied())?;
            weighted_sum(t, out, &w)
        },
        i as u64,
    )
}

fn matmul(rng: &mut ChaCha8Rng, i: usize) -> f64 {
    let (m, k, n) = (1 + rng.random_range(0..4), 1 + rng.random_range(0..5), 1 + rng.random_range(0..4));
    let a = random(rng, &[m, k]);
    let b = random(rng, &[k, n]);
    let w = weights_for(rng, m * n);
    check(
        &[a, b],
        |t, v| {
            let out = t.matmul(v[0], v[1])?;
            weighted_sum(t, out, &w)
        },
        i as u64,
    )
}

fn conv2d(rng: &mut ChaCha8Rng, i: usize) -> f64 {
    let (n, cin, cout) = (1 + rng.random_range(0..2), 1 + rng.random_range(0..3), 1 + rng.random_range(0..3));
    let size = 4 + rng.random_range(0..3);
    let k = [1, 3][i % 2];
    let stride = 1 + (i / 2) % 2;
    let padding = (i / 4) % 2;
    let x = random(rng, &[n, cin, size, size]);
    let kern = random(rng, &[cout, cin, k, k]);
    let bias = random(rng, &[cout]);
    let out_side = (size + 2 * padding - k) / stride + 1;
    let w = weights_for(rng, n * cout * out_side * out_side);
    check(
        &[x, kern, bias],
        |t, v| {
            let out = t.conv2d(v[0], v[1], Some(v[2]), stride, padding)?;
            weighted_sum(t, out, &w)
        },
        i as u64,
    )
}

fn pool2d(rng: &mut ChaCha8Rng, i: usize) -> f64 {
    let kinds = [PoolKind::Max, PoolKind::Avg, PoolKind::GlobalAvg];
    let kind = kinds[i % 3];
    let (n, c) = (1 + rng.random_range(0..2), 1 + rng.random_range(0..3));
    let size = 4 + 2 * rng.random_range(0..2);
    let x = spaced(rng, &[n, c, size, size]);
    let (window, stride) = if kind == PoolKind::GlobalAvg { (0, 0) } else { (2, 2) };
    let out_len = if kind == PoolKind::GlobalAvg { n * c } else { n * c * (size / 2) * (size / 2) };
    let w = weights_for(rng, out_len);
    check(
        &[x],
        |t, v| {
            let out = t.pool2d(kind, v[0], window, stride)?;
            weighted_sum(t, out, &w)
        },
        i as u64,
    )
}

fn batchnorm2d(rng: &mut ChaCha8Rng, i: usize) -> f64 {
    let (n, c, size) = (2 + rng.random_range(0..2), 1 + rng.random_range(0..3), 2 + rng.random_range(0..2));
    let x = random(rng, &[n, c, size, size]);
    let gamma = random(rng, &[c]);
    let beta = random(rng, &[c]);
    let w = weights_for(rng, n * c * size * size);
    check(
        &[x, gamma, beta],
        |t, v| {
            let mut rm = Tensor::zeros(&[c]);
            let mut rv = Tensor::new(vec![c], vec![1.0; c]).unwrap();
            let out = t.batchnorm2d(v[0], v[1], v[2], &mut rm, &mut rv, Mode::Train, BatchNormConfig::default())?;
            weighted_sum(t, out, &w)
        },
        i as u64,
    )
}

fn cross_entropy(rng: &mut ChaCha8Rng, i: usize) -> f64 {
    let (n, c) = (1 + rng.random_range(0..5), 2 + rng.random_range(0..5));
    let mut logits = random(rng, &[n, c]);
    logits.data_mut().iter_mut().for_each(|x| *x *= 3.0);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    check(&[logits], |t, v| t.softmax_cross_entropy(v[0], &labels), i as u64)
}

fn random_bank(rng: &mut ChaCha8Rng, groups: usize, d: usize) -> AttributeCenterBank {
    let centers: BTreeMap<usize, Vec<f64>> =
        (0..groups).map(|a| (a, (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
    let counts = (0..groups).map(|a| (a, 1)).collect();
    AttributeCenterBank::from_parts(d, 0.5, centers, counts, false).unwrap()
}

fn attribute(rng: &mut ChaCha8Rng, i: usize) -> f64 {
    let (n, d, groups) = (1 + rng.random_range(0..6), 1 + rng.random_range(0..5), 2 + rng.random_range(0..2));
    let bank = random_bank(rng, groups, d);
    let feats = random(rng, &[n, d]);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..groups)).collect();
    let reduction = if i % 2 == 0 { Reduction::Mean } else { Reduction::Sum };
    check(&[feats], |t, v| attribute_term(t, v[0], &labels, &bank, reduction), i as u64)
}

/// Cross-entropy plus `lambda`-weighted attribute term through a whole
/// residual network in train mode, probing a few coordinates per parameter.
fn full_model(rng: &mut ChaCha8Rng, i: usize) -> f64 {
    let cfg = ModelConfig {
        input_resolution: 4,
        in_channels: 2,
        channels: vec![2, 3],
        blocks_per_stage: vec![1, 1],
        feature_dim: 3,
        num_classes: 4,
        use_residual: true,
        use_batchnorm: i % 2 == 0,
        stem_stride: 1,
    };
    let model = Model::new(cfg).unwrap();
    let mut params = model.init_params(100 + i as u64).unwrap();
    // zero-initialized offsets would leave dead units sitting exactly on a kink
    let offsets: Vec<String> = params
        .iter()
        .filter(|(n, _)| n.ends_with(".bias") || n.ends_with(".beta"))
        .map(|(n, _)| n.to_string())
        .collect();
    for name in offsets {
        params.tensor_mut(&name).unwrap().data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
    }
    // Central differences are only meaningful when every probe stays on the
    // same linear piece of each ReLU; redraw the batch until that holds.
    for _ in 0..200 {
        let n = 3;
        let batch = random(rng, &[n, 2, 4, 4]);
        let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let attrs: Vec<usize> = classes.iter().map(|c| c % 2).collect();
        let bank = random_bank(rng, 2, 3);
        let lambda = [0.0, 0.01, 1.0][i % 3];
        let probe_seed = rng.random::<u64>();
        if let Some(worst) = model_probe(&model, &mut params, &batch, &classes, &attrs, &bank, lambda, probe_seed) {
            return worst;
        }
    }
    panic!("no kink-free batch for instance {i}");
}

/// Worst relative error over a few probed coordinates per parameter, or
/// `None` when some probe changes a ReLU activation pattern.
#[allow(clippy::too_many_arguments)]
fn model_probe(
    model: &Model,
    params: &mut ParameterSet,
    batch: &Tensor,
    classes: &[usize],
    attrs: &[usize],
    bank: &AttributeCenterBank,
    lambda: f64,
    seed: u64,
) -> Option<f64> {
    let loss = |tape: &mut Tape, p: &ParameterSet, track: bool| {
        let out = model.forward(tape, p, batch, Mode::Train, track).unwrap();
        let ce = tape.softmax_cross_entropy(out.logits, classes).unwrap();
        let at = attribute_term(tape, out.features, attrs, bank, Reduction::Mean).unwrap();
        let at = tape.scale(at, lambda);
        let root = tape.add(ce, at).unwrap();
        (root, out.param_vars)
    };
    let mut tape = Tape::new();
    let (root, vars) = loss(&mut tape, params, true);
    tape.backward(root).unwrap();
    let pattern = tape.relu_pattern();
    let analytic: BTreeMap<String, Tensor> =
        vars.iter().filter_map(|(k, &v)| tape.grad(v).map(|g| (k.clone(), g.clone()))).collect();

    let eval = |p: &ParameterSet| {
        let mut t = Tape::new();
        let (r, _) = loss(&mut t, p, false);
        (t.value(r).item().unwrap(), t.relu_pattern())
    };
    let names: Vec<String> = params
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for name in names {
        let len = params.tensor(&name).unwrap().len();
        for _ in 0..3.min(len) {
            let idx = rng.random_range(0..len);
            let orig = params.tensor(&name).unwrap().data()[idx];
            params.tensor_mut(&name).unwrap().data_mut()[idx] = orig + EPS;
            let (up, up_pattern) = eval(params);
            params.tensor_mut(&name).unwrap().data_mut()[idx] = orig - EPS;
            let (down, down_pattern) = eval(params);
            params.tensor_mut(&name).unwrap().data_mut()[idx] = orig;
            if up_pattern != pattern || down_pattern != pattern {
                return None;
            }
            let numeric = (up - down) / (2.0 * EPS);
            let a = analytic[&name].data()[idx];
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1e-8));
        }
    }
    Some(worst)
}

pub type OpCheck = fn(&mut ChaCha8Rng, usize) -> f64;

pub const OPS: [(&str, OpCheck); 8] = [
    ("elementwise", elementwise),
    ("matmul", matmul),
    ("conv2d", conv2d),
    ("pool2d", pool2d),
    ("batchnorm2d", batchnorm2d),
    ("softmax_cross_entropy", cross_entropy),
    ("attribute_term", attribute),
    ("full_model", full_model),
];

/// Worst relative error over `instances` random instances of one op.
pub fn gradient_worst(op: OpCheck, instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..instances).map(|i| op(&mut rng, i)).fold(0.0, f64::max)
}
