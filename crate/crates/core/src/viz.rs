//! PPM renderings: CAM heatmaps and seed overlays.
//!
//! Heatmaps use a fixed 256-entry colormap obtained by linear interpolation
//! between five anchors of the viridis palette (`#440154`, `#3b528b`,
//! `#21918c`, `#5ec962`, `#fde725`). Each CAM channel is ReLU'd and divided
//! by its maximum, so a constant map renders as a single colour.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{self, ToySample, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::eval::{EvalOptions, InferenceModel};
use crate::metrics::{self, SegMask};
use crate::tensor::Tensor;

const ANCHORS: [[u8; 3]; 5] = [
    [0x44, 0x01, 0x54],
    [0x3b, 0x52, 0x8b],
    [0x21, 0x91, 0x8c],
    [0x5e, 0xc9, 0x62],
    [0xfd, 0xe7, 0x25],
];

/// Seed overlay colours, indexed by class index.
const PALETTE: [[u8; 3]; 5] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
];

pub fn colormap() -> [[u8; 3]; 256] {
    std::array::from_fn(|i| {
        let pos = i as f64 / 255.0 * (ANCHORS.len() - 1) as f64;
        let k = (pos.floor() as usize).min(ANCHORS.len() - 2);
        let f = pos - k as f64;
        std::array::from_fn(|c| {
            let (a, b) = (ANCHORS[k][c] as f64, ANCHORS[k + 1][c] as f64);
            (a + (b - a) * f).round() as u8
        })
    })
}

/// `3×(h·scale)×(w·scale)` colour image of an `h×w` channel, nearest-neighbour upscaled.
pub fn heatmap(channel: &Tensor, scale: usize) -> Result<Tensor> {
    let (h, w) = match channel.shape() {
        &[h, w] => (h, w),
        s => return Err(Error::shape("heatmap", format!("expected h×w, got {s:?}"))),
    };
    let max = channel.data().iter().fold(0.0f64, |m, &v| m.max(v));
    let cmap = colormap();
    let (oh, ow) = (h * scale, w * scale);
    let mut out = vec![0.0; 3 * oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let v = channel.data()[(y / scale) * w + x / scale].max(0.0);
            let idx = if max > 0.0 { (v / max * 255.0).round() as usize } else { 0 };
            for c in 0..3 {
                out[c * oh * ow + y * ow + x] = cmap[idx][c] as f64 / 255.0;
            }
        }
    }
    Tensor::new(vec![3, oh, ow], out)
}

/// Blends class colours over `image` wherever `seed` is foreground.
pub fn overlay(image: &Tensor, seed: &SegMask, alpha: f64) -> Result<Tensor> {
    let (h, w) = match image.shape() {
        &[3, h, w] => (h, w),
        s => return Err(Error::shape("overlay", format!("expected 3×H×W, got {s:?}"))),
    };
    let seed = if (seed.h, seed.w) == (h, w) { seed.clone() } else { seed.resample(h, w) };
    let mut out = image.clone();
    let d = out.data_mut();
    for (i, &l) in seed.labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let col = PALETTE[(l as usize - 1) % PALETTE.len()];
        for c in 0..3 {
            let v = &mut d[c * h * w + i];
            *v = (1.0 - alpha) * *v + alpha * col[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Writes `<id>_input.ppm`, `<id>_cam_<class>.ppm` per class and
/// `<id>_seed.ppm` under `out`.
pub fn render(model: &InferenceModel, sample: &ToySample, opts: &EvalOptions, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let inf = model.infer(&sample.image, opts.mode, opts.multiscale)?;
    let cam = inf.cam(opts.refine);
    let mut files = Vec::new();
    let mut put = |name: String, img: &Tensor| -> Result<()> {
        let path = out.join(name);
        fs::write(&path, data::encode_ppm(img)?).map_err(|e| Error::io(&path, e))?;
        files.push(path);
        Ok(())
    };
    put(format!("{}_input.ppm", sample.id), &sample.image)?;
    for c in 0..cam.shape()[0] {
        let name = CLASS_NAMES.get(c).copied().unwrap_or("class");
        put(format!("{}_cam_{name}.ppm", sample.id), &heatmap(&cam.index_first(c), model.tile.cell)?)?;
    }
    let seed = metrics::cam_to_seed(cam, &sample.present(), opts.bg_tau)?;
    put(format!("{}_seed.ppm", sample.id), &overlay(&sample.image, &seed, 0.5)?)?;
    Ok(files)
}
