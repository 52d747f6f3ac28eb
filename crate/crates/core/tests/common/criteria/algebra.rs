//! Algebra of the joint objective.

use dualcam::loss;
use dualcam::params::ParamStore;
use dualcam::train::{self, TrainState};
use dualcam::{Graph, Tensor};
use proptest::prelude::*;

use super::Check;

fn labels(c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(any::<bool>(), c).prop_filter_map("needs a positive", |v| {
        v.contains(&true).then(|| v.into_iter().map(|b| b as u8 as f64).collect())
    })
}

fn case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, usize)> {
    (1usize..6, 1usize..4).prop_flat_map(|(c, side)| {
        let v = |n| prop::collection::vec(-5.0f64..5.0, n);
        (v(c), v(c), v(c * side * side), v(c * side * side), labels(c), Just(side))
    })
}

pub fn lambda_adds_exactly_its_weighted_l1() {
    proptest!(super::cases(256), |((s1, s2, c1, c2, y, side) in case(), lambda in 0.0f64..2.0)| {
    let c = s1.len();
    let mut g = Graph::new();
    let t = |v: &[f64], shape: Vec<usize>| Tensor::new(shape, v.to_vec()).unwrap();
    let s1 = g.input(t(&s1, vec![1, c]));
    let s2 = g.input(t(&s2, vec![1, c]));
    let c1 = g.input(t(&c1, vec![1, c, side, side]));
    let c2 = g.input(t(&c2, vec![1, c, side, side]));
    let with = loss::total_loss(&mut g, s1, s2, c1, c2, &y, lambda).unwrap().values(&g);
    let without = loss::total_loss(&mut g, s1, s2, c1, c2, &y, 0.0).unwrap().values(&g);
    prop_assert!(((with.total - without.total) - lambda * with.l1).abs() <= 1e-12);
    prop_assert_eq!(with.l1, without.l1);
    prop_assert!(with.l1 >= 0.0);
    });
}


fn grads(cfg: &train::TrainConfig, params: &ParamStore, ex: &train::Example) -> ParamStore {
    let mut g = params.zeros_like();
    train::accumulate(cfg, params, ex, &mut g, 1.0).unwrap();
    g
}

/// Replaces every `cnn.*` tensor with fresh random values.
fn scramble_cnn(params: &ParamStore, seed: u64) -> ParamStore {
    let mut out = params.clone();
    for (name, t) in out.iter_mut() {
        if name.starts_with("cnn.") {
            *t = crate::common::normal(t.shape(), seed + name.len() as u64, 0.5);
        }
    }
    out
}

pub fn without_consistency_the_transformer_ignores_the_cnn() {
    let mut cfg = crate::common::tiny_config();
    let data = crate::common::tiny_data(3, 5);
    let state = TrainState::init(&cfg).unwrap();
    for (i, s) in data.samples.iter().enumerate() {
        let ex = train::training_example(&cfg, s, 0, i).unwrap();
        let other = scramble_cnn(&state.params, 40 + i as u64);
        cfg.lambda = 0.0;
        let (a, b) = (grads(&cfg, &state.params, &ex), grads(&cfg, &other, &ex));
        assert_eq!(a.with_prefix("vit."), b.with_prefix("vit."), "sample {i}");
        assert_ne!(a.with_prefix("cnn."), b.with_prefix("cnn."));
        cfg.lambda = 0.1;
        let (a, b) = (grads(&cfg, &state.params, &ex), grads(&cfg, &other, &ex));
        assert_ne!(a.with_prefix("vit."), b.with_prefix("vit."), "λ > 0 couples the branches");
    }
}

pub const CHECKS: &[Check] = &[
    ("lambda_adds_exactly_its_weighted_l1", lambda_adds_exactly_its_weighted_l1),
    ("without_consistency_the_transformer_ignores_the_cnn", without_consistency_the_transformer_ignores_the_cnn),
];
