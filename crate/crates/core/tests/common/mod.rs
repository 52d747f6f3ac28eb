#![allow(dead_code)]

pub mod criteria;
pub mod oracles;

use dualcam::rng;
use dualcam::{Graph, Result, Tensor, Var};

pub const STEP: f64 = 1e-5;

/// Values in `±[0.1, 1.1)` so piecewise ops stay clear of their kinks.
pub fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "test-input", 0);
    let t = rng::trunc_normal(&mut r, shape, 0.5);
    Tensor::from_fn(shape, |i| {
        let v = t.data()[i];
        v.signum() * (0.1 + v.abs())
    })
}

pub fn normal(shape: &[usize], seed: u64, std: f64) -> Tensor {
    rng::trunc_normal(&mut rng::stream(seed, "test-input", 1), shape, std)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Norm-wise relative error `‖a−n‖ / max(‖a‖, ‖n‖)`, 0 when both vanish.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn weighted(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.input(weights.clone());
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn eval(inputs: &[Tensor], weights: &Tensor, build: &impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    let l = weighted(&mut g, out, weights).expect("loss");
    g.value(l).data()[0]
}

/// Largest relative error over all inputs between backprop and central
/// differences of `sum(build(inputs) ⊙ w)` with fixed random `w`.
pub fn grad_error(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    let weights = normal(g.shape(out), 99, 1.0);
    let l = weighted(&mut g, out, &weights).expect("loss");
    g.backward(l).expect("backward");

    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut numeric = vec![0.0; inputs[k].numel()];
        let mut probe = inputs.to_vec();
        for i in 0..numeric.len() {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + STEP;
            let up = eval(&probe, &weights, &build);
            probe[k].data_mut()[i] = x0 - STEP;
            let down = eval(&probe, &weights, &build);
            probe[k].data_mut()[i] = x0;
            numeric[i] = (up - down) / (2.0 * STEP);
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

/// A model small enough to train for a few steps in well under a second.
pub fn tiny_config() -> dualcam::train::TrainConfig {
    use dualcam::cnn::CnnConfig;
    use dualcam::tiler::TileSpec;
    use dualcam::vit::VitConfig;
    dualcam::train::TrainConfig {
        lambda: 0.1,
        crop: 48,
        resize_range: (48, 64),
        epochs: 2,
        batch_size: 4,
        learning_rate: 0.05,
        vit: VitConfig {
            patch_size: 16,
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            num_classes: 3,
            loop_count: 1,
            image_channels: 3,
            mlp_ratio: 2,
            tile_size: 32,
        },
        cnn: CnnConfig {
            stem_channels: 4,
            stage_channels: [4, 4, 8, 8],
            blocks_per_stage: 1,
            groups: 2,
            num_classes: 3,
            image_channels: 3,
        },
        tile: TileSpec {
            tile: 32,
            stride: 16,
            cell: 16,
        },
        cosine_probe: 2,
        ..Default::default()
    }
}

pub fn tiny_data(num_images: usize, seed: u64) -> dualcam::data::Dataset {
    let spec = dualcam::data::DatasetSpec {
        num_images,
        classes: 3,
        size: 64,
        objects: (1, 2),
        seed,
        ..Default::default()
    };
    dualcam::data::generate(&spec).expect("valid spec")
}
