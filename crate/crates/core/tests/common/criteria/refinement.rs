//! Attention refinement identities.

use dualcam::params::ParamStore;
use dualcam::rng;
use dualcam::vit::{self, AttentionStack, CamKind, CamMap, VitBranch, VitConfig};
use dualcam::{Graph, Tensor};
use proptest::prelude::*;

use super::Check;

fn attention(b: usize, n_tok: usize, value: impl Fn(usize) -> f64) -> AttentionStack {
    let mean = Tensor::from_fn(&[b, n_tok, n_tok], value);
    AttentionStack {
        per_layer: vec![mean.clone()],
        mean,
    }
}

fn cam(values: Tensor) -> CamMap {
    CamMap {
        values,
        kind: CamKind::Semantic,
    }
}

/// `(b, c, side)` with CAM values and strictly positive attention.
fn case() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>, Vec<f64>)> {
    (1usize..3, 1usize..5, 1usize..5).prop_flat_map(|(b, c, side)| {
        let n_tok = side * side + 1;
        (
            Just(b),
            Just(c),
            Just(side),
            prop::collection::vec(-10.0f64..10.0, b * c * side * side),
            prop::collection::vec(1e-6f64..1.0, b * n_tok * n_tok),
        )
    })
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best })
}

pub fn all_ones_attention_leaves_the_cam_unchanged() {
    proptest!(super::cases(256), |((b, c, side, values, _) in case())| {
    let values = Tensor::new(vec![b, c, side, side], values).unwrap();
    let att = attention(b, side * side + 1, |_| 1.0);
    let refined = vit::refine_cam(&cam(values.clone()), &att).unwrap();
    prop_assert_eq!(refined.kind, CamKind::Refined);
    prop_assert_eq!(refined.values, values);
    });
}

pub fn positive_attention_keeps_the_class_argmax() {
    proptest!(super::cases(256), |((b, c, side, values, att) in case())| {
    let values = Tensor::new(vec![b, c, side, side], values).unwrap();
    let att = attention(b, side * side + 1, |i| att[i]);
    let refined = vit::refine_cam(&cam(values.clone()), &att).unwrap();
    let plane = side * side;
    for bi in 0..b {
        for p in 0..plane {
            let column = |t: &Tensor| (0..c).map(|k| t.data()[(bi * c + k) * plane + p]).collect::<Vec<_>>();
            prop_assert_eq!(argmax(&column(&values)), argmax(&column(&refined.values)));
        }
    }
    });
}


pub fn refining_twice_is_rejected() {
    let att = attention(1, 5, |_| 0.5);
    let once = vit::refine_cam(&cam(Tensor::zeros(&[1, 2, 2, 2])), &att).unwrap();
    assert!(vit::refine_cam(&once, &att).is_err());
    assert!(vit::refine_cam(&cam(Tensor::zeros(&[1, 2, 3, 3])), &att).is_err());
}

pub fn attention_rows_are_distributions() {
    let cfg = VitConfig {
        patch_size: 8,
        embed_dim: 16,
        num_layers: 3,
        num_heads: 4,
        num_classes: 3,
        loop_count: 2,
        image_channels: 3,
        mlp_ratio: 2,
        tile_size: 32,
    };
    for seed in 0..5 {
        let store: ParamStore = vit::init_params(&cfg, &mut rng::stream(seed, "init", 0)).unwrap();
        let mut g = Graph::new();
        let bound = store.bind(&mut g, "", false);
        let branch = VitBranch::new(&cfg, &bound);
        let image = g.input(crate::common::normal(&[2, 3, 32, 32], seed, 2.0));
        let c = branch.residual_correct(&mut g, image).unwrap();
        let att = &c.attention;
        assert_eq!(att.per_layer.len(), cfg.num_layers);
        for a in att.per_layer.iter().chain([&att.mean]) {
            assert_eq!(a.shape(), &[2, 17, 17]);
            for row in a.data().chunks(17) {
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}

pub const CHECKS: &[Check] = &[
    ("all_ones_attention_leaves_the_cam_unchanged", all_ones_attention_leaves_the_cam_unchanged),
    ("positive_attention_keeps_the_class_argmax", positive_attention_keeps_the_class_argmax),
    ("refining_twice_is_rejected", refining_twice_is_rejected),
    ("attention_rows_are_distributions", attention_rows_are_distributions),
];
