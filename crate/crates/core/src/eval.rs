//! Transformer-only inference and the seed / localization evaluations.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{Dataset, ToySample, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::metrics::{self, IouReport, LocAccuracy, LocInstance, SegMask};
use crate::params::ParamStore;
use crate::preprocess;
use crate::tensor::Tensor;
use crate::tiler::{self, TileSpec};
use crate::train;
use crate::vit::{VitBranch, VitConfig};

pub const MULTISCALE: [f64; 3] = [0.75, 1.0, 1.25];

/// How an evaluation image is presented to the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TileMode {
    /// Resized to one tile.
    None,
    /// Resized to the padded size and cut without overlap.
    NonOverlap,
    /// Native size, padded, cut at the configured stride.
    Overlap,
}

impl TileMode {
    pub const ALL: [TileMode; 3] = [TileMode::None, TileMode::NonOverlap, TileMode::Overlap];

    pub fn name(self) -> &'static str {
        match self {
            TileMode::None => "none",
            TileMode::NonOverlap => "non-overlap",
            TileMode::Overlap => "overlap",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalOptions {
    pub mode: TileMode,
    /// Multiply by class-token attention before merging.
    pub refine: bool,
    pub multiscale: bool,
    pub bg_tau: f64,
    pub theta: f64,
    /// Score seeds against full-resolution masks instead of the CAM grid.
    pub image_resolution: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            mode: TileMode::Overlap,
            refine: true,
            multiscale: false,
            bg_tau: 0.3,
            theta: 0.2,
            image_resolution: false,
        }
    }
}

/// The transformer branch rebuilt from a checkpoint; `cnn.*` entries are
/// never read.
#[derive(Clone, Debug)]
pub struct InferenceModel {
    pub vit: VitConfig,
    pub tile: TileSpec,
    pub params: ParamStore,
}

/// Merged CAMs of one image, `C×h×w`.
pub struct Inference {
    pub semantic: Tensor,
    pub refined: Tensor,
}

impl Inference {
    pub fn cam(&self, refine: bool) -> &Tensor {
        if refine {
            &self.refined
        } else {
            &self.semantic
        }
    }
}

fn squeeze(t: Tensor) -> Result<Tensor> {
    let s = t.shape()[1..].to_vec();
    t.reshape(&s)
}

impl InferenceModel {
    pub fn from_checkpoint(store: &ParamStore) -> Result<Self> {
        let (vit, tile) = train::model_from_meta(store)?;
        let params = store.with_prefix("vit.");
        if params.is_empty() {
            return Err(Error::Validation("checkpoint holds no transformer parameters".into()));
        }
        Ok(InferenceModel { vit, tile, params })
    }

    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.spec.classes != self.vit.num_classes {
            return Err(Error::Validation(format!(
                "checkpoint predicts {} classes but the dataset has {}",
                self.vit.num_classes, data.spec.classes
            )));
        }
        Ok(())
    }

    /// CAMs of `image[B×C_0×H×W]` (standardized) cut with `spec`: `(semantic, refined)`.
    fn tiled(&self, image: &Tensor, spec: TileSpec) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, "vit.", false);
        let branch = VitBranch::new(&self.vit, &bound);
        let t = tiler::tiled_cam(&mut g, &branch, image, spec)?;
        Ok((t.semantic(&g).values, t.refined(&g)?.values))
    }

    /// Merged semantic and refined CAMs of a raw `C_0×H×W` image in `[0, 1]`.
    pub fn infer(&self, image: &Tensor, mode: TileMode, multiscale: bool) -> Result<Inference> {
        let s = image.shape();
        if s.len() != 3 {
            return Err(Error::shape("infer", format!("expected C×H×W, got {s:?}")));
        }
        let tile = self.tile.tile;
        let x = Tensor::stack(&[preprocess::standardize(image)])?;
        let (view, spec) = match mode {
            TileMode::None => (preprocess::resize_bilinear(&x, tile, tile)?, TileSpec { stride: tile, ..self.tile }),
            TileMode::NonOverlap => {
                let (h, w) = (s[1].div_ceil(tile) * tile, s[2].div_ceil(tile) * tile);
                (preprocess::resize_bilinear(&x, h, w)?, TileSpec { stride: tile, ..self.tile })
            }
            TileMode::Overlap => (x, self.tile),
        };
        let (semantic, refined) = if multiscale {
            let mut maps = tiler::multiscale(&view, &MULTISCALE, spec.cell, |v| {
                let (s, r) = self.tiled(v, spec)?;
                Ok(vec![s, r])
            })?;
            let refined = maps.pop().expect("two maps");
            (maps.pop().expect("two maps"), refined)
        } else {
            self.tiled(&view, spec)?
        };
        Ok(Inference {
            semantic: squeeze(semantic)?,
            refined: squeeze(refined)?,
        })
    }
}

/// Per-class means of a `C×h×w` CAM.
pub fn cam_scores(cam: &Tensor) -> Vec<f64> {
    let c = cam.shape()[0];
    let plane = cam.numel() / c;
    cam.data().chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedReport {
    pub images: usize,
    pub options: EvalOptions,
    pub classes: Vec<String>,
    /// Background first.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// Seed mask of one sample and the ground truth it is scored against.
pub fn seed_pair(model: &InferenceModel, sample: &ToySample, opts: &EvalOptions) -> Result<(SegMask, SegMask)> {
    let inf = model.infer(&sample.image, opts.mode, opts.multiscale)?;
    let seed = metrics::cam_to_seed(inf.cam(opts.refine), &sample.present(), opts.bg_tau)?;
    Ok(if opts.image_resolution {
        (seed.resample(sample.mask.h, sample.mask.w), sample.mask.clone())
    } else {
        let gt = sample.mask.resample(seed.h, seed.w);
        (seed, gt)
    })
}

pub fn evaluate_seeds(model: &InferenceModel, data: &Dataset, opts: &EvalOptions) -> Result<SeedReport> {
    model.check_dataset(data)?;
    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    for s in &data.samples {
        let (p, g) = seed_pair(model, s, opts)?;
        preds.push(p);
        gts.push(g);
    }
    let IouReport { per_class, mean } = metrics::miou(&preds, &gts, data.spec.classes)?;
    Ok(SeedReport {
        images: preds.len(),
        options: *opts,
        classes: class_list(data.spec.classes),
        per_class,
        miou: mean,
    })
}

fn class_list(c: usize) -> Vec<String> {
    std::iter::once("background")
        .chain(CLASS_NAMES[..c].iter().copied())
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct WsolReport {
    /// Images with exactly one ground-truth box.
    pub images: usize,
    pub options: EvalOptions,
    pub top1: f64,
    pub top5: f64,
    pub gt_known: f64,
}

/// Box from the ground-truth class channel; class ranking from the
/// semantic CAM scores.
pub fn evaluate_wsol(model: &InferenceModel, data: &Dataset, opts: &EvalOptions) -> Result<WsolReport> {
    model.check_dataset(data)?;
    let mut items = Vec::new();
    for s in data.samples.iter().filter(|s| s.boxes.len() == 1) {
        let gt = s.boxes[0];
        let inf = model.infer(&s.image, opts.mode, opts.multiscale)?;
        let cam = inf.cam(opts.refine);
        let channel = cam.index_first(gt.class);
        let pred = metrics::cam_to_bbox(&channel, opts.theta, s.mask.h, s.mask.w, gt.class)?;
        items.push(LocInstance {
            pred,
            scores: cam_scores(&inf.semantic),
            gt,
        });
    }
    let LocAccuracy { top1, top5, gt_known } = metrics::loc_accuracy(&items);
    Ok(WsolReport {
        images: items.len(),
        options: *opts,
        top1,
        top5,
        gt_known,
    })
}

pub fn seed_table(r: &SeedReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<12} {:>8}", "class", "IoU");
    for (name, iou) in r.classes.iter().zip(&r.per_class) {
        match iou {
            Some(v) => {
                let _ = writeln!(out, "{name:<12} {:>8.2}", 100.0 * v);
            }
            None => {
                let _ = writeln!(out, "{name:<12} {:>8}", "-");
            }
        }
    }
    let _ = writeln!(out, "{:<12} {:>8.2}   ({} images)", "mIoU", 100.0 * r.miou, r.images);
    out
}

pub fn wsol_table(r: &WsolReport) -> String {
    format!(
        "{:<10} {:>8.2}\n{:<10} {:>8.2}\n{:<10} {:>8.2}\n({} single-object images)\n",
        "top1",
        100.0 * r.top1,
        "top5",
        100.0 * r.top5,
        "gt_known",
        100.0 * r.gt_known,
        r.images
    )
}
