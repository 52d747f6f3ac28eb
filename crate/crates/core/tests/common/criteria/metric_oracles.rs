//! Segmentation and localization metrics against brute-force oracles.

use crate::common::oracles;
use dualcam::metrics::{self, BBox, LocInstance, SegMask};
use dualcam::Tensor;
use proptest::prelude::*;

use super::Check;

/// One to three `h×w` prediction/ground-truth pairs with labels in `0..=C`.
fn mask_pairs() -> impl Strategy<Value = (usize, Vec<SegMask>, Vec<SegMask>)> {
    (1usize..=5, 1usize..=8, 1usize..=8, 1usize..=3).prop_flat_map(|(c, h, w, n)| {
        let mask = move || prop::collection::vec(0u8..=c as u8, h * w).prop_map(move |l| SegMask::new(h, w, l).unwrap());
        (Just(c), prop::collection::vec(mask(), n), prop::collection::vec(mask(), n))
    })
}

fn bbox(side: usize) -> impl Strategy<Value = BBox> {
    (0..side, 0..side, 1..=side, 1..=side, 0usize..8).prop_map(move |(r, c, dh, dw, class)| {
        let (r1, c1) = ((r + dh).min(side), (c + dw).min(side));
        BBox::new(r, c, r1.max(r + 1), c1.max(c + 1), class).unwrap()
    })
}

fn instance() -> impl Strategy<Value = LocInstance> {
    (bbox(12), bbox(12), prop::collection::vec(prop_oneof![-3i32..3, Just(0)], 1..10)).prop_map(|(pred, gt, s)| LocInstance {
        pred,
        gt,
        scores: s.into_iter().map(f64::from).collect(),
    })
}

pub fn miou_matches_pixel_sets() {
    proptest!(super::cases(10_000), |((c, preds, gts) in mask_pairs())| {
    let report = metrics::miou(&preds, &gts, c).unwrap();
    prop_assert!((report.mean - oracles::set_miou(&preds, &gts, c)).abs() <= 1e-12);
    prop_assert_eq!(report.per_class.len(), c + 1);
    });
}


pub fn localization_accuracies_are_nested() {
    proptest!(super::cases(1_000), |(items in prop::collection::vec(instance(), 1..20))| {
    let acc = metrics::loc_accuracy(&items);
    prop_assert!(acc.gt_known >= acc.top5);
    prop_assert!(acc.top5 >= acc.top1);
    prop_assert!((0.0..=1.0).contains(&acc.gt_known));
    });
}

pub fn box_iou_matches_pixel_count() {
    proptest!(super::cases(1_000), |(a in bbox(12), b in bbox(12))| {
    prop_assert!((a.iou(&b) - oracles::pixel_iou(&a, &b)).abs() <= 1e-12);
    prop_assert_eq!(a.iou(&b), b.iou(&a));
    });
}

pub fn seed_ignores_positive_channel_scale() {
    proptest!(super::cases(1_000), |(values in prop::collection::vec(-1.0f64..1.0, 3 * 16),
        scales in prop::collection::vec(0.1f64..10.0, 3),
        present in prop::collection::vec(any::<bool>(), 3))| {
    let cam = Tensor::new(vec![3, 4, 4], values.clone()).unwrap();
    let scaled = Tensor::from_fn(&[3, 4, 4], |i| values[i] * scales[i / 16]);
    let a = metrics::cam_to_seed(&cam, &present, 0.3).unwrap();
    let b = metrics::cam_to_seed(&scaled, &present, 0.3).unwrap();
    for (x, y) in a.labels.iter().zip(&b.labels) {
        prop_assert!(*x == 0 || present[*x as usize - 1]);
        prop_assert!(*y == 0 || present[*y as usize - 1]);
    }
    // max-normalization may move values by an ulp, so only compare cells
    // whose winning margin is well clear of rounding
    let norm = |t: &Tensor, k: usize| {
        let p = &t.data()[k * 16..(k + 1) * 16];
        let m = p.iter().fold(0.0f64, |m, &v| m.max(v));
        p.iter().map(|&v| if m > 0.0 { v.max(0.0) / m } else { 0.0 }).collect::<Vec<_>>()
    };
    let planes: Vec<Vec<f64>> = (0..3).map(|k| norm(&cam, k)).collect();
    for i in 0..16 {
        let mut scores: Vec<f64> = vec![0.3];
        scores.extend((0..3).map(|k| if present[k] { planes[k][i] } else { f64::NEG_INFINITY }));
        let mut sorted = scores.clone();
        sorted.sort_by(|x, y| y.total_cmp(x));
        if sorted[0] - sorted[1] > 1e-9 {
            prop_assert_eq!(a.labels[i], b.labels[i]);
        }
    }
    });
}


pub fn miou_hand_examples() {
    let gt = SegMask::new(2, 2, vec![0, 1, 1, 1]).unwrap();
    let pred = SegMask::new(2, 2, vec![0, 0, 1, 1]).unwrap();
    let r = metrics::miou(&[pred], &[gt.clone()], 1).unwrap();
    assert_eq!(r.per_class, vec![Some(0.5), Some(2.0 / 3.0)]);
    assert_eq!(r.mean, (0.5 + 2.0 / 3.0) / 2.0);
    let perfect = metrics::miou(&[gt.clone()], &[gt.clone()], 3).unwrap();
    assert_eq!(perfect.per_class, vec![Some(1.0), Some(1.0), None, None]);
    assert_eq!(perfect.mean, 1.0);
}

pub fn miou_rejects_mismatched_inputs() {
    let a = SegMask::new(2, 2, vec![0; 4]).unwrap();
    let b = SegMask::new(1, 4, vec![0; 4]).unwrap();
    assert!(metrics::miou(&[a.clone()], &[b], 1).is_err());
    assert!(metrics::miou(&[a.clone()], &[], 1).is_err());
    let high = SegMask::new(2, 2, vec![0, 0, 0, 3]).unwrap();
    assert!(metrics::miou(&[high], &[a], 2).is_err());
}

pub fn localization_hand_example() {
    let gt = BBox::new(0, 0, 4, 4, 1).unwrap();
    let hit = BBox::new(0, 0, 4, 3, 1).unwrap();
    let miss = BBox::new(3, 3, 6, 6, 1).unwrap();
    let items = vec![
        LocInstance { pred: hit, scores: vec![0.1, 0.9, 0.0], gt },
        LocInstance { pred: hit, scores: vec![0.9, 0.1, 0.0], gt },
        LocInstance { pred: miss, scores: vec![0.0, 1.0, 0.0], gt },
        LocInstance { pred: hit, scores: vec![0.5, 0.5, 0.0], gt },
    ];
    let acc = metrics::loc_accuracy(&items);
    assert_eq!(acc.gt_known, 0.75);
    assert_eq!(acc.top5, 0.75);
    assert_eq!(acc.top1, 0.25);
}

pub const CHECKS: &[Check] = &[
    ("miou_matches_pixel_sets", miou_matches_pixel_sets),
    ("localization_accuracies_are_nested", localization_accuracies_are_nested),
    ("box_iou_matches_pixel_count", box_iou_matches_pixel_count),
    ("seed_ignores_positive_channel_scale", seed_ignores_positive_channel_scale),
    ("miou_hand_examples", miou_hand_examples),
    ("miou_rejects_mismatched_inputs", miou_rejects_mismatched_inputs),
    ("localization_hand_example", localization_hand_example),
];
