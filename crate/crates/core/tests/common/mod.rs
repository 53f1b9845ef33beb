#![allow(dead_code)]

use pqk::autograd::{Tape, Var};
use pqk::config::TrainConfig;
use pqk::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform values with magnitude in `[gap, hi]`, random sign; keeps inputs off ReLU kinks.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Compares the tape gradient of `<f(inputs), R>` (R a fixed random tensor)
/// with central differences of step `h`. Returns the largest relative error
/// `‖g - g_fd‖ / max(‖g‖, ‖g_fd‖)` over the inputs marked in `check`.
pub fn gradcheck<F>(inputs: &[Tensor], check: &[bool], seed: u64, h: f32, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |values: &[Tensor]| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars);
        (tape, vars, out)
    };
    let (tape, _, out) = eval(inputs);
    let mut r = rng(seed ^ 0xfeed);
    let proj = uniform(&mut r, tape.value(out).shape(), -1.0, 1.0);
    let project = |t: &Tensor| -> f64 {
        t.data()
            .iter()
            .zip(proj.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let p = tape.constant(proj.clone());
    let prod = tape.mul(out, p).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        if !check[i] {
            continue;
        }
        let analytic = grads.wrt(&tape, vars[i]);
        let mut num = Vec::with_capacity(input.numel());
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let step = plus[i].data()[j] as f64 - minus[i].data()[j] as f64;
            let (tp, _, op) = eval(&plus);
            let (tm, _, om) = eval(&minus);
            num.push((project(tp.value(op)) - project(tm.value(om))) / step);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&num)
            .map(|(&a, &n)| (a as f64 - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na: f64 = analytic.data().iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
        let nn: f64 = num.iter().map(|n| n * n).sum::<f64>().sqrt();
        let scale = na.max(nn);
        let rel = if scale < 1e-6 { diff } else { diff / scale };
        worst = worst.max(rel);
    }
    worst
}

/// A small two-phase config on two-spirals with an MLP.
pub fn toy_config(seed: u64) -> TrainConfig {
    TrainConfig::from_json(&format!(
        r#"{{
        "phase1_epochs": 1,
        "phase2_epochs": 1,
        "optimizer": {{"lr": 0.05}},
        "prune": {{"target_ratio": 0.5, "ramp_epochs": 1, "update_period": 2}},
        "quant": {{"bits": 4}},
        "batch_size": 16,
        "seed": {seed},
        "data": {{
            "train": {{"source": "synthetic", "task": "two-spirals", "n": 64, "seed": 1}},
            "dev": {{"source": "synthetic", "task": "two-spirals", "n": 32, "seed": 2}}
        }},
        "arch": {{"kind": "mlp", "width": 8, "blocks": 2, "input_shape": [2], "classes": 2}}
    }}"#
    ))
    .unwrap()
}

/// A small config on patch textures with the residual conv net.
pub fn conv_config(seed: u64, target: f64, p1: usize, p2: usize) -> TrainConfig {
    TrainConfig::from_json(&format!(
        r#"{{
        "phase1_epochs": {p1},
        "phase2_epochs": {p2},
        "optimizer": {{"lr": 0.05}},
        "prune": {{"target_ratio": {target}, "ramp_epochs": {ramp}, "update_period": 4}},
        "quant": {{"bits": 4}},
        "kd": {{"warmup": 1}},
        "batch_size": 32,
        "seed": {seed},
        "data": {{
            "train": {{"source": "synthetic", "task": "patch-textures", "n": 128, "seed": 11}},
            "dev": {{"source": "synthetic", "task": "patch-textures", "n": 64, "seed": 12}}
        }},
        "arch": {{"kind": "res8", "width": 6, "blocks": 1, "input_shape": [1, 16, 16], "classes": 8}}
    }}"#,
        ramp = p1.saturating_sub(1).max(1)
    ))
    .unwrap()
}

pub fn write_config(dir: &std::path::Path, cfg: &TrainConfig) -> std::path::PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, cfg.to_json_pretty()).unwrap();
    p
}
