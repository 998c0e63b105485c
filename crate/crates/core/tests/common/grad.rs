//! Central finite-difference checks of tape gradients.

use std::sync::Arc;

use gmnn_core::csr::Segments;
use gmnn_core::model::{ModelConfig, ModelParams};
use gmnn_core::nn::{Activation, ParamStore, Tape};
use gmnn_core::tape::{ParamId, Var};
use gmnn_core::train::{Batch, Sample};
use gmnn_core::{Matrix, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{mixed_graph, rel_err, rng};

pub const H: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-5;
pub const MODEL_TOL: f64 = 1e-4;

type Build<'a> = &'a dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Value of `Σ build(inputs) ⊙ probe`.
fn objective(store: &ParamStore, ids: &[ParamId], build: Build, probe: &Arc<Matrix>) -> (Tape, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id, store.get(id))).collect();
    let out = build(&mut tape, &vars).unwrap();
    let loss = tape.dot(out, Arc::clone(probe)).unwrap();
    (tape, loss)
}

/// Largest norm-wise relative error between the tape gradient and central
/// differences, over all inputs.
fn check(inputs: Vec<Matrix>, build: Build, r: &mut ChaCha8Rng) -> f64 {
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs.into_iter().enumerate().map(|(i, m)| store.add(format!("in{i}"), m)).collect();
    let shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id, store.get(id))).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out).shape()
    };
    let probe = Arc::new(Matrix::random_uniform(shape.0, shape.1, 1.0, r));
    let (tape, loss) = objective(&store, &ids, build, &probe);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for &id in &ids {
        let len = store.get(id).len();
        let analytic = grads.get(id).map_or_else(|| vec![0.0; len], |g| g.as_slice().to_vec());
        let mut numeric = vec![0.0; len];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).as_slice()[e];
            store.get_mut(id).as_mut_slice()[e] = orig + H;
            let (t, l) = objective(&store, &ids, build, &probe);
            let up = t.value(l)[(0, 0)];
            store.get_mut(id).as_mut_slice()[e] = orig - H;
            let (t, l) = objective(&store, &ids, build, &probe);
            let down = t.value(l)[(0, 0)];
            store.get_mut(id).as_mut_slice()[e] = orig;
            *slot = (up - down) / (2.0 * H);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

fn dims(r: &mut ChaCha8Rng) -> (usize, usize) {
    (r.random_range(1..7), r.random_range(1..12))
}

fn rand_m(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::random_uniform(rows, cols, 1.0, r)
}

/// Entries at least 0.1 away from zero so that a step of `H` never crosses
/// the ReLU kink.
fn off_kink(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = r.random_range(0.1..1.0);
            if r.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn random_segments(r: &mut ChaCha8Rng, rows: usize, domain: usize) -> Arc<Segments> {
    let lists: Vec<Vec<u32>> = (0..rows)
        .map(|_| {
            let len = r.random_range(0..5);
            (0..len).map(|_| r.random_range(0..domain as u32)).collect()
        })
        .collect();
    Arc::new(Segments::from_rows(&lists))
}

/// Segments with at least one entry.
fn nonempty_segments(r: &mut ChaCha8Rng, domain: usize) -> Arc<Segments> {
    loop {
        let rows = r.random_range(1..6);
        let seg = random_segments(r, rows, domain);
        if seg.nnz() > 0 {
            return seg;
        }
    }
}

fn width_or_one(r: &mut ChaCha8Rng, c: usize) -> usize {
    if r.random_bool(0.5) {
        1
    } else {
        c
    }
}

const ACTIVATIONS: [Activation; 4] = [Activation::Identity, Activation::Relu, Activation::Tanh, Activation::Silu];

/// Every differentiable operation by name.
pub const OPS: &[&str] = &[
    "matmul",
    "add_bias",
    "activation",
    "add",
    "scale",
    "scale_rows",
    "concat_cols",
    "slice_rows",
    "gather",
    "segment_softmax",
    "segment_weighted_sum",
    "gather_weighted_sum",
    "segment_mean",
    "affine_act_affine",
    "weighted_sum",
    "dot",
    "cross_entropy",
];

/// One randomized check of operation `op`.
fn op_trial(op: &str, trial: usize, r: &mut ChaCha8Rng) -> f64 {
    match op {
        "matmul" => {
            let (n, k) = dims(r);
            let c = r.random_range(1..12);
            check(vec![rand_m(r, n, k), rand_m(r, k, c)], &|t, v| t.matmul(v[0], v[1]), r)
        }
        "add_bias" => {
            let (n, c) = dims(r);
            check(vec![rand_m(r, n, c), rand_m(r, 1, c)], &|t, v| t.add_bias(v[0], v[1]), r)
        }
        "activation" => {
            let act = ACTIVATIONS[trial % 4];
            let (n, c) = dims(r);
            check(vec![off_kink(r, n, c)], &|t, v| Ok(t.activation(v[0], act)), r)
        }
        "add" => {
            let (n, c) = dims(r);
            check(vec![rand_m(r, n, c), rand_m(r, n, c)], &|t, v| t.add(v[0], v[1]), r)
        }
        "scale" => {
            let (n, c) = dims(r);
            let f: f64 = r.random_range(-2.0..2.0);
            check(vec![rand_m(r, n, c)], &|t, v| Ok(t.scale(v[0], f)), r)
        }
        "scale_rows" => {
            let (n, c) = dims(r);
            let f = Arc::new((0..n).map(|_| r.random_range(-2.0..2.0)).collect::<Vec<f64>>());
            check(vec![rand_m(r, n, c)], &|t, v| t.scale_rows(v[0], Arc::clone(&f)), r)
        }
        "concat_cols" => {
            let (n, a) = dims(r);
            let b = r.random_range(1..6);
            check(vec![rand_m(r, n, a), rand_m(r, n, b)], &|t, v| t.concat_cols(v[0], v[1]), r)
        }
        "slice_rows" => {
            let (n, c) = dims(r);
            let start = r.random_range(0..n);
            let end = r.random_range(start + 1..=n);
            check(vec![rand_m(r, n, c)], &|t, v| t.slice_rows(v[0], start, end), r)
        }
        "gather" => {
            let (n, c) = dims(r);
            let m = r.random_range(1..15);
            let idx = Arc::new((0..m).map(|_| r.random_range(0..n as u32)).collect::<Vec<u32>>());
            check(vec![rand_m(r, n, c)], &|t, v| t.gather(v[0], Arc::clone(&idx)), r)
        }
        "segment_softmax" => {
            let seg = nonempty_segments(r, 4);
            let c = r.random_range(1..4);
            check(vec![rand_m(r, seg.nnz(), c)], &|t, v| t.segment_softmax(v[0], Arc::clone(&seg)), r)
        }
        "segment_weighted_sum" => {
            let seg = nonempty_segments(r, 4);
            let c = r.random_range(1..5);
            let wc = width_or_one(r, c);
            let (w, x) = (rand_m(r, seg.nnz(), wc), rand_m(r, seg.nnz(), c));
            check(vec![w, x], &|t, v| t.segment_weighted_sum(v[0], v[1], Arc::clone(&seg)), r)
        }
        "gather_weighted_sum" => {
            let domain = r.random_range(1..6);
            let seg = nonempty_segments(r, domain);
            let c = r.random_range(1..5);
            let wc = width_or_one(r, c);
            let (w, x) = (rand_m(r, seg.nnz(), wc), rand_m(r, domain, c));
            check(vec![w, x], &|t, v| t.gather_weighted_sum(v[0], v[1], Arc::clone(&seg)), r)
        }
        "segment_mean" => {
            let seg = nonempty_segments(r, 4);
            let c = r.random_range(1..5);
            check(vec![rand_m(r, seg.nnz(), c)], &|t, v| t.segment_mean(v[0], Arc::clone(&seg)), r)
        }
        "affine_act_affine" => {
            let act = ACTIVATIONS[trial % 4];
            let (n, d) = (r.random_range(1..8), r.random_range(1..5));
            let (h, c) = (r.random_range(1..6), r.random_range(1..6));
            let input = Arc::new(rand_m(r, n, d));
            let (w1, mut b1, w2) = (rand_m(r, d, h), rand_m(r, 1, h), rand_m(r, h, c));
            if act == Activation::Relu {
                // Shift biases so no hidden pre-activation sits near the kink.
                let pre = input.matmul(&w1).unwrap();
                for j in 0..h {
                    while (0..n).any(|i| (pre[(i, j)] + b1[(0, j)]).abs() < 1e-3) {
                        b1[(0, j)] += 0.01;
                    }
                }
            }
            check(
                vec![w1, b1, w2],
                &|t, v| t.affine_act_affine(Arc::clone(&input), v[0], v[1], act, v[2]),
                r,
            )
        }
        "weighted_sum" => {
            let (n, c) = dims(r);
            let terms = r.random_range(1..5);
            let w: Vec<f64> = (0..terms).map(|_| r.random_range(-1.0..1.0)).collect();
            let inputs = (0..terms).map(|_| rand_m(r, n, c)).collect();
            check(inputs, &|t, v| t.weighted_sum(v, &w), r)
        }
        "dot" => {
            let (n, c) = dims(r);
            let p = Arc::new(rand_m(r, n, c));
            check(vec![rand_m(r, n, c)], &|t, v| t.dot(v[0], Arc::clone(&p)), r)
        }
        "cross_entropy" => {
            let n = r.random_range(1..8);
            let c = r.random_range(1..7);
            let labels = Arc::new((0..n).map(|_| r.random_range(0..c as u16)).collect::<Vec<u16>>());
            let w = Arc::new((0..n).map(|_| r.random_range(0.0..1.0)).collect::<Vec<f64>>());
            let z = Matrix::random_uniform(n, c, 3.0, r);
            check(vec![z], &|t, v| t.cross_entropy(v[0], Arc::clone(&labels), Arc::clone(&w)), r)
        }
        other => panic!("unknown op {other}"),
    }
}

/// Worst relative error of `op` over `trials` random draws.
pub fn op_worst(op: &str, trials: usize) -> f64 {
    let seed = 100 + OPS.iter().position(|&o| o == op).expect("known op") as u64;
    let mut r = rng(seed);
    (0..trials).map(|t| op_trial(op, t, &mut r)).fold(0.0, f64::max)
}

pub fn smooth_config(seed: u64, per_channel: bool) -> ModelConfig {
    ModelConfig {
        widths: vec![4, 6],
        k_set: vec![2, 4, 6],
        score_width: 3,
        classes: 3,
        activation: Activation::Silu,
        per_channel_scores: per_channel,
        seed,
        ..ModelConfig::default()
    }
}

fn flat(store: &ParamStore) -> Vec<f64> {
    store.iter().flat_map(|(_, _, m)| m.as_slice().to_vec()).collect()
}

fn set_flat(store: &mut ParamStore, values: &[f64]) {
    let ids: Vec<ParamId> = store.ids().collect();
    let mut off = 0;
    for id in ids {
        let m = store.get_mut(id).as_mut_slice();
        m.copy_from_slice(&values[off..off + m.len()]);
        off += m.len();
    }
}

fn loss_at(model: &mut ModelParams, batch: &Batch, theta: &[f64]) -> f64 {
    set_flat(&mut model.store, theta);
    batch.loss_and_grads(model).unwrap().0
}

/// Directional derivative along a random unit direction and a handful of
/// single coordinates with non-negligible gradient, both against central
/// differences.
fn end_to_end_error(model: &mut ModelParams, batch: &Batch, r: &mut ChaCha8Rng) -> f64 {
    let theta = flat(&model.store);
    let (_, grads) = batch.loss_and_grads(model).unwrap();
    let ids: Vec<ParamId> = model.store.ids().collect();
    let analytic: Vec<f64> = ids
        .iter()
        .flat_map(|&id| {
            let len = model.store.get(id).len();
            grads.get(id).map_or_else(|| vec![0.0; len], |g| g.as_slice().to_vec())
        })
        .collect();

    let mut dir: Vec<f64> = (0..theta.len()).map(|_| r.random_range(-1.0..1.0)).collect();
    let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
    dir.iter_mut().for_each(|d| *d /= norm);
    let shifted = |s: f64| -> Vec<f64> { theta.iter().zip(&dir).map(|(t, d)| t + s * d).collect() };
    let fd = (loss_at(model, batch, &shifted(H)) - loss_at(model, batch, &shifted(-H))) / (2.0 * H);
    let an: f64 = analytic.iter().zip(&dir).map(|(g, d)| g * d).sum();
    let mut worst = rel_err(&[an], &[fd]);

    // Coordinates with a vanishing gradient only measure difference noise.
    let peak = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let live: Vec<usize> = (0..theta.len()).filter(|&c| analytic[c].abs() >= 1e-2 * peak).collect();
    let coords: Vec<usize> = (0..4).map(|_| live[r.random_range(0..live.len())]).collect();
    let mut num = Vec::new();
    for &c in &coords {
        let mut t = theta.clone();
        t[c] = theta[c] + H;
        let up = loss_at(model, batch, &t);
        t[c] = theta[c] - H;
        let down = loss_at(model, batch, &t);
        num.push((up - down) / (2.0 * H));
    }
    let an: Vec<f64> = coords.iter().map(|&c| analytic[c]).collect();
    worst = worst.max(rel_err(&an, &num));
    set_flat(&mut model.store, &theta);
    worst
}

fn labelled_graph(r: &mut ChaCha8Rng, n: usize, i: usize, classes: u16) -> gmnn_core::EventGraph {
    let g = mixed_graph(r, n, i);
    let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
    g.with_labels(labels).unwrap()
}

/// Worst end-to-end error of the smooth model on `trials` graphs of 32
/// nodes.
pub fn end_to_end_worst(trials: usize) -> f64 {
    let mut r = rng(117);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let mut model = ModelParams::new(smooth_config(trial as u64, trial % 2 == 1)).unwrap();
        let g = labelled_graph(&mut r, 32, trial, 3);
        let sample = Sample::new(&model, &g).unwrap();
        let batch = Batch::new(&[&sample]).unwrap();
        worst = worst.max(end_to_end_error(&mut model, &batch, &mut r));
    }
    worst
}

/// As [`end_to_end_worst`] on merged batches of three graphs.
pub fn batched_worst(trials: usize) -> f64 {
    let mut r = rng(118);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let mut model = ModelParams::new(smooth_config(trial as u64, false)).unwrap();
        let samples: Vec<Sample> = (0..3)
            .map(|i| {
                let n = r.random_range(5..30);
                Sample::new(&model, &labelled_graph(&mut r, n, i, 3)).unwrap()
            })
            .collect();
        let batch = Batch::new(&samples.iter().collect::<Vec<_>>()).unwrap();
        worst = worst.max(end_to_end_error(&mut model, &batch, &mut r));
    }
    worst
}
