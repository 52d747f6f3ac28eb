//! Cut and merge geometry against enumeration oracles.

use crate::common::oracles;
use dualcam::tiler::{self, TileGrid, TileSpec};
use dualcam::Tensor;
use proptest::prelude::*;

use super::Check;

fn spec(cell: usize, tile_cells: usize, stride_div: usize) -> TileSpec {
    TileSpec {
        tile: cell * tile_cells,
        stride: cell * tile_cells / stride_div,
        cell,
    }
}

/// Tile side in cells and a divisor giving a whole-cell stride.
fn tiling() -> impl Strategy<Value = (usize, usize)> {
    prop_oneof![Just((2, 1)), Just((2, 2)), Just((4, 1)), Just((4, 2)), Just((4, 4)), Just((6, 3)), Just((6, 2))]
}

fn integer_tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-64i32..64, n).prop_map(move |v| Tensor::new(shape.clone(), v.into_iter().map(f64::from).collect()).unwrap())
}

pub fn count_map_matches_enumeration() {
    proptest!(super::cases(256), |((tc, div) in tiling(), cell in prop_oneof![Just(1usize), Just(4), Just(16)],
        h in 1usize..40, w in 1usize..40)| {
    let s = spec(cell, tc, div);
    let grid = TileGrid::new(h * cell, w * cell, s).unwrap();
    prop_assert_eq!(&grid.count_map, &oracles::count_map(&grid));
    prop_assert!(grid.count_map.iter().all(|&c| c >= 1));
    let per_axis = |p: usize| (p - s.tile) / s.stride + 1;
    prop_assert_eq!(grid.num_tiles(), per_axis(grid.padded_h) * per_axis(grid.padded_w));
    });
}

pub fn merge_of_windows_recovers_the_canvas() {
    proptest!(super::cases(256), |((tc, div) in tiling(), h in 1usize..4, w in 1usize..4, b in 1usize..3, c in 1usize..3, seed in 0u64..1000)| {
    let s = spec(1, tc, div);
    let grid = TileGrid::new(h * tc - tc / 2, w * tc, s).unwrap();
    let (ch, cw) = grid.canvas();
    let canvas = crate::common::normal(&[b, c, ch, cw], seed, 1.0);
    let merged = tiler::merge_values(&oracles::windows(&canvas, &grid), &grid).unwrap();
    let (oh, ow) = grid.output();
    let want = oracles::crop(&canvas, oh, ow);
    if div == 1 {
        prop_assert_eq!(merged, want);
    } else {
        for (a, e) in merged.data().iter().zip(want.data()) {
            prop_assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0));
        }
    }
    });
}

pub fn merge_is_linear_exactly_on_dyadic_counts() {
    proptest!(super::cases(256), |((grid, x, y) in dyadic_case(), a in -8i32..8, k in -8i32..8)| {
    let (a, k) = (f64::from(a), f64::from(k));
    let combo = Tensor::from_fn(x.shape(), |i| a * x.data()[i] + k * y.data()[i]);
    let mx = tiler::merge_values(&x, &grid).unwrap();
    let my = tiler::merge_values(&y, &grid).unwrap();
    let lhs = tiler::merge_values(&combo, &grid).unwrap();
    let rhs = Tensor::from_fn(mx.shape(), |i| a * mx.data()[i] + k * my.data()[i]);
    prop_assert_eq!(lhs, rhs);
    });
}

pub fn cut_windows_are_copies_of_the_padded_image() {
    proptest!(super::cases(256), |((tc, div) in tiling(), h in 1usize..30, w in 1usize..30, seed in 0u64..1000)| {
    let s = spec(2, tc, div);
    let image = crate::common::normal(&[1, 2, h, w], seed, 1.0);
    let (tiles, grid) = tiler::pad_and_cut(&image, s).unwrap();
    let t = s.tile;
    for (n, &(r0, c0)) in grid.origins.iter().enumerate() {
        for ch in 0..2 {
            for y in 0..t {
                for x in 0..t {
                    let (iy, ix) = (r0 + y, c0 + x);
                    let want = if iy < h && ix < w { image.at(&[0, ch, iy, ix]) } else { 0.0 };
                    prop_assert_eq!(tiles.at(&[n, ch, y, x]), want);
                }
            }
        }
    }
    });
}


/// Half-tile strides give counts 1, 2 and 4, so with integer sub-CAMs every
/// operation of the merge is exact.
fn dyadic_case() -> impl Strategy<Value = (TileGrid, Tensor, Tensor)> {
    (prop_oneof![Just(2usize), Just(4), Just(8)], 1usize..4, 1usize..4).prop_flat_map(|(tc, h, w)| {
        let grid = TileGrid::new(h * tc, w * tc, spec(1, tc, 2)).unwrap();
        let shape = vec![grid.num_tiles(), 2, tc, tc];
        (Just(grid), integer_tensor(shape.clone()), integer_tensor(shape))
    })
}

pub fn standard_tile_counts() {
    let s = TileSpec::default();
    for (side, tiles) in [(224, 1), (336, 9), (448, 9), (672, 25)] {
        let grid = TileGrid::new(side, side, s).unwrap();
        assert_eq!(grid.num_tiles(), tiles, "side {side}");
    }
    let (tiles, grid) = tiler::pad_and_cut(&Tensor::zeros(&[1, 3, 336, 336]), s).unwrap();
    assert_eq!(tiles.shape(), &[9, 3, 224, 224]);
    assert_eq!(grid.output(), (21, 21));
    let none = TileSpec { stride: 224, ..s };
    assert_eq!(TileGrid::new(448, 448, none).unwrap().num_tiles(), 4);
}

pub const CHECKS: &[Check] = &[
    ("count_map_matches_enumeration", count_map_matches_enumeration),
    ("merge_of_windows_recovers_the_canvas", merge_of_windows_recovers_the_canvas),
    ("merge_is_linear_exactly_on_dyadic_counts", merge_is_linear_exactly_on_dyadic_counts),
    ("cut_windows_are_copies_of_the_padded_image", cut_windows_are_copies_of_the_padded_image),
    ("standard_tile_counts", standard_tile_counts),
];
