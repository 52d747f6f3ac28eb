//! Overlapping cutting and merging.
//!
//! An image is zero-padded at the bottom/right to a tile multiple, cut into
//! `tile×tile` windows at a fixed stride, and the windows are stacked along
//! the batch axis. Per-window CAMs are summed back onto a canvas at CAM
//! scale and divided by how many windows covered each cell, then cropped to
//! the original extent.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::preprocess;
use crate::tensor::Tensor;
use crate::vit::{self, CamKind, CamMap, Correction, VitBranch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TileSpec {
    pub tile: usize,
    pub stride: usize,
    /// Pixels per CAM cell.
    pub cell: usize,
}

impl Default for TileSpec {
    fn default() -> Self {
        TileSpec {
            tile: 224,
            stride: 112,
            cell: 16,
        }
    }
}

impl TileSpec {
    pub fn validate(&self) -> Result<()> {
        let TileSpec { tile, stride, cell } = *self;
        if stride == 0 || stride > tile {
            return Err(Error::Contract(format!("stride {stride} must be in 1..={tile}")));
        }
        if tile % stride != 0 {
            return Err(Error::Contract(format!("stride {stride} does not divide tile {tile}")));
        }
        if cell == 0 || stride % cell != 0 {
            return Err(Error::Contract(format!(
                "tile {tile} and stride {stride} must be multiples of the {cell}-pixel cell"
            )));
        }
        Ok(())
    }
}

/// Tiling bookkeeping for one padded image size.
#[derive(Clone, Debug, PartialEq)]
pub struct TileGrid {
    pub spec: TileSpec,
    pub padded_h: usize,
    pub padded_w: usize,
    pub orig_h: usize,
    pub orig_w: usize,
    /// Pixel top-left corners, rows then columns.
    pub origins: Vec<(usize, usize)>,
    /// Windows covering each CAM cell, `(padded_h/cell)×(padded_w/cell)`.
    pub count_map: Vec<u32>,
}

impl TileGrid {
    /// Grid for an `orig_h×orig_w` image padded up to tile multiples.
    pub fn new(orig_h: usize, orig_w: usize, spec: TileSpec) -> Result<Self> {
        spec.validate()?;
        if orig_h == 0 || orig_w == 0 {
            return Err(Error::Contract("cannot tile an empty image".into()));
        }
        let padded_h = orig_h.div_ceil(spec.tile) * spec.tile;
        let padded_w = orig_w.div_ceil(spec.tile) * spec.tile;
        let rows: Vec<usize> = (0..=padded_h - spec.tile).step_by(spec.stride).collect();
        let cols: Vec<usize> = (0..=padded_w - spec.tile).step_by(spec.stride).collect();
        let origins: Vec<(usize, usize)> = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
        let (ch, cw, tc) = (padded_h / spec.cell, padded_w / spec.cell, spec.tile / spec.cell);
        let mut count_map = vec![0u32; ch * cw];
        for &(r, c) in &origins {
            let (r, c) = (r / spec.cell, c / spec.cell);
            for i in r..r + tc {
                for v in &mut count_map[i * cw + c..i * cw + c + tc] {
                    *v += 1;
                }
            }
        }
        Ok(TileGrid {
            spec,
            padded_h,
            padded_w,
            orig_h,
            orig_w,
            origins,
            count_map,
        })
    }

    pub fn num_tiles(&self) -> usize {
        self.origins.len()
    }

    /// Canvas size at CAM scale.
    pub fn canvas(&self) -> (usize, usize) {
        (self.padded_h / self.spec.cell, self.padded_w / self.spec.cell)
    }

    /// Merged CAM size: the original extent in cells, partial cells kept.
    pub fn output(&self) -> (usize, usize) {
        (self.orig_h.div_ceil(self.spec.cell), self.orig_w.div_ceil(self.spec.cell))
    }

    pub fn tile_cells(&self) -> usize {
        self.spec.tile / self.spec.cell
    }

    fn cell_origins(&self) -> Vec<(usize, usize)> {
        let c = self.spec.cell;
        self.origins.iter().map(|&(r, q)| (r / c, q / c)).collect()
    }
}

/// Zero-pads `image` at the bottom/right so both sides are tile multiples.
pub fn pad_to_multiple(image: &Tensor, tile: usize) -> Result<(Tensor, usize, usize)> {
    let s = image.shape();
    if s.len() < 2 || tile == 0 {
        return Err(Error::shape("pad_to_multiple", format!("{s:?} with tile {tile}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let (ph, pw) = (h.div_ceil(tile) * tile, w.div_ceil(tile) * tile);
    let padded = if (ph, pw) == (h, w) {
        image.clone()
    } else {
        preprocess::pad_bottom_right(image, ph.max(tile), pw.max(tile))?
    };
    Ok((padded, h, w))
}

/// Cuts an already padded `B×C_0×H×W` batch into `(B·T)×C_0×tile×tile`.
pub fn cut(image: &Tensor, spec: TileSpec) -> Result<(Tensor, TileGrid)> {
    spec.validate()?;
    let s = image.shape();
    if s.len() != 4 {
        return Err(Error::shape("cut", format!("expected B×C×H×W, got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % spec.tile != 0 || w % spec.tile != 0 {
        return Err(Error::Contract(format!(
            "{h}×{w} is not padded to a multiple of tile {}",
            spec.tile
        )));
    }
    let grid = TileGrid::new(h, w, spec)?;
    let t = spec.tile;
    let src = image.data();
    let mut out = Vec::with_capacity(b * grid.num_tiles() * c * t * t);
    for bi in 0..b {
        for &(r0, c0) in &grid.origins {
            for ch in 0..c {
                let plane = (bi * c + ch) * h * w;
                for y in r0..r0 + t {
                    out.extend_from_slice(&src[plane + y * w + c0..plane + y * w + c0 + t]);
                }
            }
        }
    }
    Ok((Tensor::new(vec![b * grid.num_tiles(), c, t, t], out)?, grid))
}

/// Pads, cuts, and records the pre-padding extent in the grid.
pub fn pad_and_cut(image: &Tensor, spec: TileSpec) -> Result<(Tensor, TileGrid)> {
    let (padded, oh, ow) = pad_to_multiple(image, spec.tile)?;
    let (tiles, mut grid) = cut(&padded, spec)?;
    grid.orig_h = oh;
    grid.orig_w = ow;
    Ok((tiles, grid))
}

fn check_sub_cams(shape: &[usize], grid: &TileGrid) -> Result<usize> {
    let tc = grid.tile_cells();
    let t = grid.num_tiles();
    if shape.len() != 4 || shape[2] != tc || shape[3] != tc || shape[0] % t != 0 || shape[0] == 0 {
        return Err(Error::shape(
            "merge",
            format!("{shape:?} is not a stack of {t} sub-CAMs of {tc}×{tc} per image"),
        ));
    }
    Ok(shape[0] / t)
}

fn count_tensor(grid: &TileGrid, b: usize, c: usize) -> Tensor {
    let plane = grid.count_map.len();
    Tensor::from_fn(&[b, c, grid.canvas().0, grid.canvas().1], |i| {
        grid.count_map[i % plane] as f64
    })
}

/// Differentiable merge of `(B·T)×C×(tile/cell)²` sub-CAMs into `B×C×h×w`.
pub fn merge(g: &mut Graph, sub_cams: Var, grid: &TileGrid) -> Result<Var> {
    let s = g.shape(sub_cams).to_vec();
    let b = check_sub_cams(&s, grid)?;
    let (ch, cw) = grid.canvas();
    let canvas = g.scatter_windows(sub_cams, &grid.cell_origins(), ch, cw)?;
    let counts = g.input(count_tensor(grid, b, s[1]));
    let mut merged = g.div(canvas, counts)?;
    let (oh, ow) = grid.output();
    if oh != ch {
        merged = g.slice(merged, 2, 0, oh)?;
    }
    if ow != cw {
        merged = g.slice(merged, 3, 0, ow)?;
    }
    Ok(merged)
}

/// [`merge`] on plain values.
pub fn merge_values(sub_cams: &Tensor, grid: &TileGrid) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(sub_cams.clone());
    let m = merge(&mut g, x, grid)?;
    Ok(g.value(m).clone())
}

/// Transformer CAM of a whole image assembled from tiles.
pub struct TiledCam {
    /// Merged semantic CAM `B×C×h×w` on the graph.
    pub cam: Var,
    /// Per-tile semantic CAMs `(B·T)×C×n×n`.
    pub tile_cams: Var,
    pub grid: TileGrid,
    pub correction: Correction,
}

/// pad → cut → residual-like correction → semantic CAM per tile → merge.
pub fn tiled_cam(g: &mut Graph, vit: &VitBranch<'_>, image: &Tensor, spec: TileSpec) -> Result<TiledCam> {
    if spec.tile != vit.cfg.tile_size || spec.cell != vit.cfg.patch_size {
        return Err(Error::Contract(format!(
            "tile {}/cell {} does not match the encoder's {}/{}",
            spec.tile, spec.cell, vit.cfg.tile_size, vit.cfg.patch_size
        )));
    }
    let (tiles, grid) = pad_and_cut(image, spec)?;
    let x = g.input(tiles);
    let correction = vit.residual_correct(g, x)?;
    let tile_cams = vit.semantic_cam(g, &correction.final_output())?;
    let cam = merge(g, tile_cams, &grid)?;
    Ok(TiledCam {
        cam,
        tile_cams,
        grid,
        correction,
    })
}

impl TiledCam {
    pub fn semantic(&self, g: &Graph) -> CamMap {
        CamMap {
            values: g.value(self.cam).clone(),
            kind: CamKind::Merged,
        }
    }

    /// Attention-refined tiles, merged.
    pub fn refined(&self, g: &Graph) -> Result<CamMap> {
        let tiles = CamMap {
            values: g.value(self.tile_cams).clone(),
            kind: CamKind::Semantic,
        };
        let refined = vit::refine_cam(&tiles, &self.correction.attention)?;
        Ok(CamMap {
            values: merge_values(&refined.values, &self.grid)?,
            kind: CamKind::Refined,
        })
    }
}

/// Averages the maps of `cam_of(image rescaled by s)` over `scales`, each
/// resized bilinearly to the grid of the corresponding map at scale 1.
/// Rescaled sides are rounded to multiples of `cell`.
pub fn multiscale(
    image: &Tensor,
    scales: &[f64],
    cell: usize,
    mut cam_of: impl FnMut(&Tensor) -> Result<Vec<Tensor>>,
) -> Result<Vec<Tensor>> {
    let s = image.shape();
    if s.len() < 2 || scales.is_empty() || cell == 0 {
        return Err(Error::Contract("multiscale needs an image and at least one scale".into()));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let base = cam_of(image)?;
    let mut acc: Vec<Tensor> = base.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for &scale in scales {
        let maps = if scale == 1.0 {
            base.clone()
        } else {
            let side = |v: usize| (((v as f64 * scale) / cell as f64).round() as usize).max(1) * cell;
            let view = preprocess::resize_bilinear(image, side(h), side(w))?;
            cam_of(&view)?
                .iter()
                .zip(&base)
                .map(|(m, b)| {
                    let bs = b.shape();
                    preprocess::resize_bilinear(m, bs[bs.len() - 2], bs[bs.len() - 1])
                })
                .collect::<Result<Vec<_>>>()?
        };
        for (a, m) in acc.iter_mut().zip(&maps) {
            a.data_mut().iter_mut().zip(m.data()).for_each(|(a, v)| *a += v);
        }
    }
    let inv = 1.0 / scales.len() as f64;
    for a in &mut acc {
        a.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    Ok(acc)
}
