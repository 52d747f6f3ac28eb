//! Finite-difference checks of every differentiable op and both branches.

use super::Check;
use crate::common::{away_from_zero, grad_error, normal};
use dualcam::cnn::{self, CnnConfig};
use dualcam::loss;
use dualcam::params::{Bound, ParamStore};
use dualcam::tiler::{self, TileSpec};
use dualcam::vit::{self, VitBranch, VitConfig};
use dualcam::{rng, Graph, Tensor};

const OP_TOL: f64 = 1e-4;
const MODEL_TOL: f64 = 1e-3;

fn assert_op(name: &str, err: f64) {
    assert!(err < OP_TOL, "{name}: relative error {err:e}");
}

pub fn elementwise_ops() {
    let a = away_from_zero(&[3, 4], 1);
    let b = away_from_zero(&[3, 4], 2);
    let ab = [a.clone(), b.clone()];
    assert_op("add", grad_error(&ab, |g, v| g.add(v[0], v[1])));
    assert_op("sub", grad_error(&ab, |g, v| g.sub(v[0], v[1])));
    assert_op("mul", grad_error(&ab, |g, v| g.mul(v[0], v[1])));
    assert_op("div", grad_error(&ab, |g, v| g.div(v[0], v[1])));
    let one = [a];
    assert_op("scale", grad_error(&one, |g, v| g.scale(v[0], -1.7)));
    assert_op("add_scalar", grad_error(&one, |g, v| g.add_scalar(v[0], 0.3)));
    assert_op("relu", grad_error(&one, |g, v| g.relu(v[0])));
    assert_op("gelu", grad_error(&one, |g, v| g.gelu(v[0])));
    assert_op("abs", grad_error(&one, |g, v| g.abs(v[0])));
}

pub fn matrix_products() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = normal(if ta { &[4, 3] } else { &[3, 4] }, 3, 1.0);
        let b = normal(if tb { &[5, 4] } else { &[4, 5] }, 4, 1.0);
        let err = grad_error(&[a, b], |g, v| g.matmul_ext(v[0], v[1], ta, tb, 0.7));
        assert_op(&format!("matmul ta={ta} tb={tb}"), err);

        let a = normal(if ta { &[2, 4, 3] } else { &[2, 3, 4] }, 5, 1.0);
        let b = normal(if tb { &[2, 5, 4] } else { &[2, 4, 5] }, 6, 1.0);
        let err = grad_error(&[a, b], |g, v| g.bmm(v[0], v[1], ta, tb, 1.3));
        assert_op(&format!("bmm ta={ta} tb={tb}"), err);
    }
}

pub fn bias_and_convolution() {
    let x = normal(&[2, 3, 4], 7, 1.0);
    for (axis, n) in [(0, 2), (1, 3), (2, 4)] {
        let b = normal(&[n], 8, 1.0);
        let err = grad_error(&[x.clone(), b], |g, v| g.add_bias(v[0], v[1], axis));
        assert_op(&format!("add_bias axis {axis}"), err);
    }
    for (stride, pad, k) in [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 0, 1), (4, 0, 4)] {
        let x = normal(&[2, 3, 8, 8], 9, 1.0);
        let w = normal(&[4, 3, k, k], 10, 0.5);
        let err = grad_error(&[x, w], |g, v| g.conv2d(v[0], v[1], stride, pad));
        assert_op(&format!("conv2d k={k} s={stride} p={pad}"), err);
    }
}

pub fn normalisations() {
    let x = normal(&[3, 4, 5], 11, 1.0);
    for axis in 0..3 {
        assert_op("softmax", grad_error(&[x.clone()], |g, v| g.softmax(v[0], axis)));
    }
    let x = normal(&[6, 5], 12, 2.0);
    let gamma = away_from_zero(&[5], 13);
    let beta = normal(&[5], 14, 1.0);
    assert_op(
        "layer_norm",
        grad_error(&[x, gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-6)),
    );
    let x = normal(&[2, 8, 3, 3], 15, 1.0);
    let gamma = away_from_zero(&[8], 16);
    let beta = normal(&[8], 17, 1.0);
    assert_op(
        "group_norm",
        grad_error(&[x, gamma, beta], |g, v| g.group_norm(v[0], v[1], v[2], 4, 1e-5)),
    );
}

pub fn shape_ops_and_reductions() {
    let x = normal(&[2, 3, 4], 18, 1.0);
    let one = [x.clone()];
    assert_op("reshape", grad_error(&one, |g, v| g.reshape(v[0], &[6, 4])));
    assert_op("permute", grad_error(&one, |g, v| g.permute(v[0], &[2, 0, 1])));
    assert_op("transpose", grad_error(&one, |g, v| g.transpose(v[0])));
    assert_op("slice", grad_error(&one, |g, v| g.slice(v[0], 2, 1, 2)));
    assert_op("sum", grad_error(&one, |g, v| g.sum(v[0])));
    assert_op("mean", grad_error(&one, |g, v| g.mean(v[0])));
    let y = normal(&[2, 1, 4], 19, 1.0);
    assert_op("concat", grad_error(&[x, y], |g, v| g.concat(&[v[0], v[1], v[0]], 1)));
    let x = normal(&[2, 3, 4, 5], 20, 1.0);
    assert_op("global_avg_pool", grad_error(&[x], |g, v| g.global_avg_pool(v[0])));
}

pub fn window_scatter_and_bce() {
    let windows = normal(&[4, 2, 3, 3], 21, 1.0);
    let origins = [(0, 0), (0, 2), (2, 0), (2, 2)];
    assert_op(
        "scatter_windows",
        grad_error(&[windows], |g, v| g.scatter_windows(v[0], &origins, 5, 5)),
    );
    let logits = normal(&[3, 4], 22, 3.0);
    let labels = [1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
    assert_op(
        "bce_with_logits",
        grad_error(&[logits], |g, v| g.bce_with_logits(v[0], &labels)),
    );
}

fn tiny_vit(loops: usize) -> (VitConfig, ParamStore) {
    let cfg = VitConfig {
        patch_size: 4,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        num_classes: 3,
        loop_count: loops,
        image_channels: 3,
        mlp_ratio: 2,
        tile_size: 8,
    };
    let store = vit::init_params(&cfg, &mut rng::stream(23, "init", 0)).unwrap();
    (cfg, store)
}

/// Gradient of the CAM scores w.r.t. every ViT parameter tensor.
fn vit_param_error(loops: usize) -> f64 {
    let (cfg, store) = tiny_vit(loops);
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let mut values: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    values.push(normal(&[2, 3, 8, 8], 24, 1.0));
    grad_error(&values, |g: &mut Graph, v| {
        let bound = Bound::from_pairs(names.iter().cloned().zip(v[..names.len()].iter().copied()));
        let vit = VitBranch::new(&cfg, &bound);
        let c = vit.residual_correct(g, v[names.len()])?;
        let cam = vit.semantic_cam(g, &c.final_output())?;
        vit::class_scores(g, cam)
    })
}

pub fn vit_branch_end_to_end() {
    for loops in [0, 2] {
        let err = vit_param_error(loops);
        assert!(err < MODEL_TOL, "vit loops={loops}: relative error {err:e}");
    }
}

fn tiny_cnn() -> (CnnConfig, ParamStore) {
    let cfg = CnnConfig {
        stem_channels: 4,
        stage_channels: [4, 4, 8, 8],
        blocks_per_stage: 1,
        groups: 2,
        num_classes: 3,
        image_channels: 3,
    };
    let mut store = cnn::init_params(&cfg, &mut rng::stream(25, "init", 1)).unwrap();
    // Non-trivial affine parameters so their gradients are exercised.
    for (name, t) in store.iter_mut() {
        if name.ends_with(".g") || name.ends_with(".b") {
            *t = away_from_zero(t.shape(), name.len() as u64);
        }
    }
    (cfg, store)
}

fn split(store: &ParamStore) -> (Vec<String>, Vec<Tensor>) {
    store.iter().map(|(n, t)| (n.to_string(), t.clone())).unzip()
}

pub fn cnn_branch_end_to_end() {
    let (cfg, store) = tiny_cnn();
    let (names, mut values) = split(&store);
    values.push(normal(&[2, 3, 32, 32], 26, 1.0));
    let labels = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
    let err = grad_error(&values, |g: &mut Graph, v| {
        let bound = Bound::from_pairs(names.iter().cloned().zip(v[..names.len()].iter().copied()));
        let cam = cnn::cnn_forward(g, &bound, &cfg, v[names.len()])?;
        let s = cnn::cnn_scores(g, cam)?;
        loss::multilabel_cls_loss(g, s, &labels)
    });
    assert!(err < MODEL_TOL, "cnn: relative error {err:e}");
}

pub fn joint_loss_through_tiler() {
    let vcfg = VitConfig {
        patch_size: 16,
        embed_dim: 4,
        num_layers: 1,
        num_heads: 2,
        num_classes: 3,
        loop_count: 1,
        image_channels: 3,
        mlp_ratio: 2,
        tile_size: 32,
    };
    let spec = TileSpec {
        tile: 32,
        stride: 16,
        cell: 16,
    };
    let (ccfg, mut store) = tiny_cnn();
    store.extend(vit::init_params(&vcfg, &mut rng::stream(27, "init", 0)).unwrap());
    // Larger weights than the initialization so every term carries signal.
    for (name, t) in store.iter_mut() {
        if name.starts_with("vit.") && name.ends_with(".w") {
            *t = normal(t.shape(), name.len() as u64 + 100, 0.3);
        }
    }
    let (names, values) = split(&store);
    let image = normal(&[1, 3, 48, 48], 28, 1.0);
    let labels = [0.0, 1.0, 1.0];
    let err = grad_error(&values, |g: &mut Graph, v| {
        let bound = Bound::from_pairs(names.iter().cloned().zip(v.iter().copied()));
        let branch = VitBranch::new(&vcfg, &bound);
        let tiled = tiler::tiled_cam(g, &branch, &image, spec)?;
        let s1 = vit::class_scores(g, tiled.cam)?;
        let x = g.input(image.clone());
        let cam2 = cnn::cnn_forward(g, &bound, &ccfg, x)?;
        let s2 = cnn::cnn_scores(g, cam2)?;
        Ok(loss::total_loss(g, s1, s2, tiled.cam, cam2, &labels, 0.1)?.total)
    });
    assert!(err < MODEL_TOL, "joint loss: relative error {err:e}");
}

pub const CHECKS: &[Check] = &[
    ("elementwise_ops", elementwise_ops),
    ("matrix_products", matrix_products),
    ("bias_and_convolution", bias_and_convolution),
    ("normalisations", normalisations),
    ("shape_ops_and_reductions", shape_ops_and_reductions),
    ("window_scatter_and_bce", window_scatter_and_bce),
    ("vit_branch_end_to_end", vit_branch_end_to_end),
    ("cnn_branch_end_to_end", cnn_branch_end_to_end),
    ("joint_loss_through_tiler", joint_loss_through_tiler),
];
