//! Brute-force reference implementations.

use std::collections::HashSet;

use dualcam::metrics::{BBox, SegMask};
use dualcam::tiler::TileGrid;
use dualcam::Tensor;

/// Number of windows covering each canvas cell, by direct enumeration.
pub fn count_map(grid: &TileGrid) -> Vec<u32> {
    let (ch, cw) = grid.canvas();
    let (tc, cell) = (grid.tile_cells(), grid.spec.cell);
    let mut out = Vec::with_capacity(ch * cw);
    for i in 0..ch {
        for j in 0..cw {
            let n = grid
                .origins
                .iter()
                .filter(|&&(r, c)| (r / cell..r / cell + tc).contains(&i) && (c / cell..c / cell + tc).contains(&j))
                .count();
            out.push(n as u32);
        }
    }
    out
}

/// Windows of a `B×C×ch×cw` canvas at the grid's cell-scale origins,
/// stacked image-major like the tiler's sub-CAMs.
pub fn windows(canvas: &Tensor, grid: &TileGrid) -> Tensor {
    let s = canvas.shape();
    let (b, c, ch, cw) = (s[0], s[1], s[2], s[3]);
    let (tc, cell) = (grid.tile_cells(), grid.spec.cell);
    let mut out = Vec::new();
    for bi in 0..b {
        for &(r, q) in &grid.origins {
            let (r, q) = (r / cell, q / cell);
            for k in 0..c {
                for i in r..r + tc {
                    for j in q..q + tc {
                        out.push(canvas.data()[((bi * c + k) * ch + i) * cw + j]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b * grid.num_tiles(), c, tc, tc], out).expect("window stack")
}

/// Top-left `h×w` corner of every plane of a `B×C×H×W` tensor.
pub fn crop(t: &Tensor, h: usize, w: usize) -> Tensor {
    let s = t.shape();
    let (b, c, th, tw) = (s[0], s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(b * c * h * w);
    for p in 0..b * c {
        for i in 0..h {
            out.extend_from_slice(&t.data()[(p * th + i) * tw..(p * th + i) * tw + w]);
        }
    }
    Tensor::new(vec![b, c, h, w], out).expect("crop")
}

/// Mean IoU from explicit pixel sets: for each label, the sets of
/// `(image, pixel)` positions predicted and annotated with it.
pub fn set_miou(preds: &[SegMask], gts: &[SegMask], num_classes: usize) -> f64 {
    let mut ious = Vec::new();
    for class in 0..=num_classes as u8 {
        let collect = |masks: &[SegMask]| -> HashSet<(usize, usize)> {
            masks
                .iter()
                .enumerate()
                .flat_map(|(n, m)| {
                    m.labels
                        .iter()
                        .enumerate()
                        .filter(move |&(_, &l)| l == class)
                        .map(move |(i, _)| (n, i))
                })
                .collect()
        };
        let (p, g) = (collect(preds), collect(gts));
        let union = p.union(&g).count();
        if union > 0 {
            ious.push(p.intersection(&g).count() as f64 / union as f64);
        }
    }
    if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

/// Box IoU by counting covered pixels.
pub fn pixel_iou(a: &BBox, b: &BBox) -> f64 {
    let inside = |x: &BBox, r: usize, c: usize| (x.row0..x.row1).contains(&r) && (x.col0..x.col1).contains(&c);
    let (rows, cols) = (a.row1.max(b.row1), a.col1.max(b.col1));
    let (mut inter, mut union) = (0usize, 0usize);
    for r in 0..rows {
        for c in 0..cols {
            let (ia, ib) = (inside(a, r, c), inside(b, r, c));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
    }
    inter as f64 / union as f64
}
