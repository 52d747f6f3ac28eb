//! Image resampling and the training/evaluation input pipeline.
//!
//! All functions treat the last two axes as height and width, so they work
//! on `C×H×W` images and `B×C×H×W` batches alike.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

pub const MEAN: f64 = 0.5;
pub const STD: f64 = 0.5;

fn planes(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(Error::shape(op, format!("need at least 2 axes, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok((t.numel() / (h * w).max(1), h, w))
}

fn with_hw(t: &Tensor, h: usize, w: usize) -> Vec<usize> {
    let mut shape = t.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = h;
    shape[n - 1] = w;
    shape
}

/// Half-pixel-centred source coordinate and blend weight along one axis.
fn taps(out: usize, input: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling with half-pixel centres; the identity when sizes agree.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, h, w) = planes(t, "resize_bilinear")?;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::Contract(format!(
            "cannot resize {h}×{w} to {out_h}×{out_w}"
        )));
    }
    let (ty, tx) = (taps(out_h, h), taps(out_w, w));
    let src = t.data();
    let mut out = Vec::with_capacity(n * out_h * out_w);
    for p in 0..n {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(with_hw(t, out_h, out_w), out)
}

/// Nearest-neighbour resampling: output pixel `o` reads `⌊o·in/out⌋`.
pub fn resize_nearest(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, h, w) = planes(t, "resize_nearest")?;
    let src = t.data();
    let mut out = Vec::with_capacity(n * out_h * out_w);
    for p in 0..n {
        for y in 0..out_h {
            let sy = y * h / out_h;
            for x in 0..out_w {
                out.push(src[p * h * w + sy * w + x * w / out_w]);
            }
        }
    }
    Tensor::new(with_hw(t, out_h, out_w), out)
}

pub fn crop(t: &Tensor, top: usize, left: usize, ch: usize, cw: usize) -> Result<Tensor> {
    let (n, h, w) = planes(t, "crop")?;
    if top + ch > h || left + cw > w {
        return Err(Error::shape(
            "crop",
            format!("window {ch}×{cw} at ({top},{left}) exceeds {h}×{w}"),
        ));
    }
    let src = t.data();
    let mut out = Vec::with_capacity(n * ch * cw);
    for p in 0..n {
        for y in top..top + ch {
            let row = p * h * w + y * w;
            out.extend_from_slice(&src[row + left..row + left + cw]);
        }
    }
    Tensor::new(with_hw(t, ch, cw), out)
}

/// Zero-extends the bottom and right edges to `out_h×out_w`.
pub fn pad_bottom_right(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, h, w) = planes(t, "pad_bottom_right")?;
    if out_h < h || out_w < w {
        return Err(Error::shape(
            "pad_bottom_right",
            format!("{h}×{w} does not fit in {out_h}×{out_w}"),
        ));
    }
    let src = t.data();
    let mut out = vec![0.0; n * out_h * out_w];
    for p in 0..n {
        for y in 0..h {
            let dst = p * out_h * out_w + y * out_w;
            out[dst..dst + w].copy_from_slice(&src[p * h * w + y * w..p * h * w + (y + 1) * w]);
        }
    }
    Tensor::new(with_hw(t, out_h, out_w), out)
}

pub fn hflip(t: &Tensor) -> Tensor {
    let w = *t.shape().last().expect("rank ≥ 1");
    let mut out = t.clone();
    out.data_mut().chunks_mut(w).for_each(<[f64]>::reverse);
    out
}

/// `(x − 0.5) / 0.5` for every channel.
pub fn standardize(t: &Tensor) -> Tensor {
    Tensor::from_fn(t.shape(), |i| (t.data()[i] - MEAN) / STD)
}

/// How the training view of an image is chosen.
pub enum Sampling<'a> {
    /// Random shorter-side scale in the range, random crop, random flip.
    Random(&'a mut StreamRng),
    /// Shorter side scaled to the lower end of the range, centre crop, no flip.
    Center,
}

/// Training view of an image `C×H×W`: rescale, `crop×crop` window, flip,
/// standardize.
pub fn preprocess(image: &Tensor, crop_side: usize, resize_range: (usize, usize), sampling: Sampling<'_>) -> Result<Tensor> {
    let (_, h, w) = planes(image, "preprocess")?;
    if h < 16 || w < 16 {
        return Err(Error::Contract(format!("image {h}×{w} is smaller than 16×16")));
    }
    let (lo, hi) = resize_range;
    if lo < crop_side || hi < lo {
        return Err(Error::Contract(format!(
            "resize range ({lo}, {hi}) cannot supply a {crop_side} crop"
        )));
    }
    let (mut rng, short) = match sampling {
        Sampling::Random(r) => {
            let s = r.random_range(lo..=hi);
            (Some(r), s)
        }
        Sampling::Center => (None, lo),
    };
    let (nh, nw) = if h <= w {
        (short, (w * short + h / 2) / h)
    } else {
        ((h * short + w / 2) / w, short)
    };
    let (nh, nw) = (nh.max(crop_side), nw.max(crop_side));
    let resized = if (nh, nw) == (h, w) {
        image.clone()
    } else {
        resize_bilinear(image, nh, nw)?
    };
    let (top, left, flip) = match rng.as_deref_mut() {
        Some(r) => (
            r.random_range(0..=nh - crop_side),
            r.random_range(0..=nw - crop_side),
            r.random_bool(0.5),
        ),
        None => ((nh - crop_side) / 2, (nw - crop_side) / 2, false),
    };
    let mut view = crop(&resized, top, left, crop_side, crop_side)?;
    if flip {
        view = hflip(&view);
    }
    Ok(standardize(&view))
}
