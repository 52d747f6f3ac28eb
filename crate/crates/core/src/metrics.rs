//! Seeds from CAMs, segmentation mIoU, box localization, token cosine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label map, 0 = background and `1..=C` = classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMask {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u8>,
}

impl SegMask {
    pub fn new(h: usize, w: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::shape("SegMask", format!("{} labels for {h}×{w}", labels.len())));
        }
        Ok(SegMask { h, w, labels })
    }

    pub fn at(&self, r: usize, c: usize) -> u8 {
        self.labels[r * self.w + c]
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&v| v as usize > num_classes) {
            Some(v) => Err(Error::Validation(format!(
                "mask value {v} outside 0..={num_classes}"
            ))),
            None => Ok(()),
        }
    }

    /// Nearest-neighbour resampling: output cell `i` reads `⌊(i + ½)·h/out_h⌋`.
    pub fn resample(&self, out_h: usize, out_w: usize) -> SegMask {
        let mut labels = Vec::with_capacity(out_h * out_w);
        for i in 0..out_h {
            let r = ((2 * i + 1) * self.h / (2 * out_h)).min(self.h - 1);
            for j in 0..out_w {
                let c = ((2 * j + 1) * self.w / (2 * out_w)).min(self.w - 1);
                labels.push(self.at(r, c));
            }
        }
        SegMask {
            h: out_h,
            w: out_w,
            labels,
        }
    }
}

/// Half-open pixel box with its class index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
    pub class: usize,
}

impl BBox {
    pub fn new(row0: usize, col0: usize, row1: usize, col1: usize, class: usize) -> Result<Self> {
        if row0 >= row1 || col0 >= col1 {
            return Err(Error::Validation(format!(
                "empty box [{row0},{col0},{row1},{col1})"
            )));
        }
        Ok(BBox {
            row0,
            col0,
            row1,
            col1,
            class,
        })
    }

    pub fn area(&self) -> usize {
        (self.row1 - self.row0) * (self.col1 - self.col0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let h = self.row1.min(other.row1).saturating_sub(self.row0.max(other.row0));
        let w = self.col1.min(other.col1).saturating_sub(self.col0.max(other.col0));
        let inter = h * w;
        inter as f64 / (self.area() + other.area() - inter) as f64
    }
}

fn cam_planes(cam: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match cam.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::shape(op, format!("expected C×h×w, got {s:?}"))),
    }
}

/// ReLU then divide by the maximum; all-nonpositive planes become zero.
fn max_normalized(plane: &[f64]) -> Vec<f64> {
    let max = plane.iter().fold(0.0f64, |m, &v| m.max(v));
    if max > 0.0 {
        plane.iter().map(|&v| v.max(0.0) / max).collect()
    } else {
        vec![0.0; plane.len()]
    }
}

/// Seed mask from a `C×h×w` CAM.
///
/// Channels of absent classes are ignored; the others are ReLU'd and
/// max-normalized, a constant `bg_tau` background plane is prepended, and
/// every cell takes the argmax (ties go to the earlier plane).
pub fn cam_to_seed(cam: &Tensor, present: &[bool], bg_tau: f64) -> Result<SegMask> {
    if !(bg_tau > 0.0 && bg_tau < 1.0) {
        return Err(Error::Contract(format!("bg_tau {bg_tau} must lie in (0, 1)")));
    }
    let (c, h, w) = cam_planes(cam, "cam_to_seed")?;
    if present.len() != c {
        return Err(Error::shape("cam_to_seed", format!("{} presence flags for {c} classes", present.len())));
    }
    let plane = h * w;
    let mut best = vec![bg_tau; plane];
    let mut labels = vec![0u8; plane];
    for (k, _) in present.iter().enumerate().filter(|(_, &p)| p) {
        let norm = max_normalized(&cam.data()[k * plane..(k + 1) * plane]);
        for (i, v) in norm.into_iter().enumerate() {
            if v > best[i] {
                best[i] = v;
                labels[i] = (k + 1) as u8;
            }
        }
    }
    SegMask::new(h, w, labels)
}

/// Per-class IoU over one global confusion matrix, background included.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IouReport {
    /// Index 0 is background; `None` when the class appears in neither
    /// prediction nor ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn miou(preds: &[SegMask], gts: &[SegMask], num_classes: usize) -> Result<IouReport> {
    if preds.len() != gts.len() {
        return Err(Error::shape("miou", format!("{} predictions for {} masks", preds.len(), gts.len())));
    }
    let k = num_classes + 1;
    let mut conf = vec![0u64; k * k];
    for (i, (p, t)) in preds.iter().zip(gts).enumerate() {
        if (p.h, p.w) != (t.h, t.w) {
            return Err(Error::shape(
                "miou",
                format!("image {i}: prediction {}×{} vs ground truth {}×{}", p.h, p.w, t.h, t.w),
            ));
        }
        for (&a, &b) in p.labels.iter().zip(&t.labels) {
            let (a, b) = (a as usize, b as usize);
            if a >= k || b >= k {
                return Err(Error::Validation(format!("image {i}: label outside 0..={num_classes}")));
            }
            conf[b * k + a] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = conf[c * k + c];
            let gt: u64 = conf[c * k..(c + 1) * k].iter().sum();
            let pred: u64 = (0..k).map(|r| conf[r * k + c]).sum();
            let union = gt + pred - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let seen: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if seen.is_empty() {
        0.0
    } else {
        seen.iter().sum::<f64>() / seen.len() as f64
    };
    Ok(IouReport { per_class, mean })
}

/// Box around the largest 4-connected region of `channel / max ≥ theta`,
/// mapped from the `h×w` grid to `image_h×image_w` pixels. An empty region
/// falls back to the whole image.
pub fn cam_to_bbox(channel: &Tensor, theta: f64, image_h: usize, image_w: usize, class: usize) -> Result<BBox> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::Contract(format!("theta {theta} must lie in (0, 1)")));
    }
    let (h, w) = match channel.shape() {
        &[h, w] => (h, w),
        s => return Err(Error::shape("cam_to_bbox", format!("expected h×w, got {s:?}"))),
    };
    let norm = max_normalized(channel.data());
    let on: Vec<bool> = norm.iter().map(|&v| v > 0.0 && v >= theta).collect();
    let full = BBox::new(0, 0, image_h, image_w, class)?;
    let Some((r0, c0, r1, c1)) = largest_component(&on, h, w) else {
        log::warn!("empty CAM mask for class {class}; using the whole image");
        return Ok(full);
    };
    BBox::new(r0 * image_h / h, c0 * image_w / w, r1 * image_h / h, c1 * image_w / w, class)
}

/// Half-open bounds of the largest 4-connected `true` region; the first in
/// raster order wins ties.
fn largest_component(on: &[bool], h: usize, w: usize) -> Option<(usize, usize, usize, usize)> {
    let mut seen = vec![false; on.len()];
    let mut best: Option<(usize, (usize, usize, usize, usize))> = None;
    let mut stack = Vec::new();
    for start in 0..on.len() {
        if !on[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut size, mut b) = (0, (usize::MAX, usize::MAX, 0, 0));
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            size += 1;
            b = (b.0.min(r), b.1.min(c), b.2.max(r + 1), b.3.max(c + 1));
            let mut visit = |j: usize| {
                if on[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        if best.is_none_or(|(s, _)| size > s) {
            best = Some((size, b));
        }
    }
    best.map(|(_, b)| b)
}

/// One localization instance: predicted box, class scores, ground truth.
#[derive(Clone, Debug)]
pub struct LocInstance {
    pub pred: BBox,
    pub scores: Vec<f64>,
    pub gt: BBox,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LocAccuracy {
    pub top1: f64,
    pub top5: f64,
    pub gt_known: f64,
}

/// Rank of `class` by descending score, ties broken by lower index.
fn rank_of(scores: &[f64], class: usize) -> usize {
    let s = scores[class];
    scores
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > s || (v == s && i < class))
        .count()
}

/// Fractions of instances with IoU ≥ 0.5 and the class among the top 1 /
/// top 5 / not required.
pub fn loc_accuracy(items: &[LocInstance]) -> LocAccuracy {
    if items.is_empty() {
        return LocAccuracy::default();
    }
    let (mut t1, mut t5, mut gk) = (0usize, 0usize, 0usize);
    for it in items {
        if it.pred.iou(&it.gt) < 0.5 {
            continue;
        }
        gk += 1;
        let rank = if it.gt.class < it.scores.len() {
            rank_of(&it.scores, it.gt.class)
        } else {
            usize::MAX
        };
        t5 += (rank < 5) as usize;
        t1 += (rank == 0) as usize;
    }
    let n = items.len() as f64;
    LocAccuracy {
        top1: t1 as f64 / n,
        top5: t5 as f64 / n,
        gt_known: gk as f64 / n,
    }
}

/// Cosine between two flattened, equally shaped tensors.
pub fn token_cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("token_cosine", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Contract("cosine of a zero vector".into()));
    }
    Ok(dot / (na * nb))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(r0: usize, c0: usize, r1: usize, c1: usize) -> BBox {
        BBox::new(r0, c0, r1, c1, 0).unwrap()
    }

    #[test]
    fn seed_examples() {
        let neg = Tensor::full(&[2, 2, 2], -1.0);
        assert!(cam_to_seed(&neg, &[true, true], 0.3).unwrap().labels.iter().all(|&v| v == 0));

        let one = Tensor::new(vec![1, 1, 2], vec![0.9, 1.0]).unwrap();
        assert_eq!(cam_to_seed(&one, &[true], 0.3).unwrap().labels, vec![1, 1]);
        let low = Tensor::new(vec![1, 1, 2], vec![0.2, 1.0]).unwrap();
        assert_eq!(cam_to_seed(&low, &[true], 0.3).unwrap().labels, vec![0, 1]);

        let two = Tensor::new(vec![2, 1, 2], vec![0.8, 1.0, 0.5, 1.0]).unwrap();
        assert_eq!(cam_to_seed(&two, &[true, true], 0.3).unwrap().labels[0], 1);
        assert_eq!(cam_to_seed(&two, &[false, true], 0.3).unwrap().labels[0], 2);
        assert!(cam_to_seed(&two, &[false, false], 0.3).unwrap().labels.iter().all(|&v| v == 0));
        assert!(cam_to_seed(&two, &[true, true], 1.0).is_err());
    }

    #[test]
    fn miou_examples() {
        let gt = SegMask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        let pred = SegMask::new(2, 2, vec![1, 0, 0, 0]).unwrap();
        let r = miou(&[pred], &[gt.clone()], 2).unwrap();
        assert_eq!(r.per_class, vec![Some(2.0 / 3.0), Some(0.5), None]);
        assert!((r.mean - 0.5833).abs() < 1e-4);
        assert_eq!(miou(&[gt.clone()], &[gt.clone()], 2).unwrap().mean, 1.0);
        let miss = SegMask::new(2, 2, vec![0, 0, 0, 0]).unwrap();
        assert_eq!(miou(&[miss], &[gt.clone()], 2).unwrap().per_class[1], Some(0.0));
        let wrong = SegMask::new(1, 4, vec![0; 4]).unwrap();
        let err = miou(&[gt.clone(), wrong], &[gt.clone(), gt], 2).unwrap_err();
        assert!(err.to_string().contains("image 1"));
    }

    #[test]
    fn bbox_examples() {
        let mut cam = Tensor::zeros(&[6, 8]);
        for r in 1..3 {
            for c in 2..5 {
                cam.set(&[r, c], 1.0);
            }
        }
        assert_eq!(cam_to_bbox(&cam, 0.2, 6, 8, 0).unwrap(), bx(1, 2, 3, 5));

        let mut two = Tensor::zeros(&[5, 5]);
        for i in [0, 1, 2] {
            two.set(&[0, i], 1.0);
        }
        for (r, c) in [(2, 2), (3, 2), (4, 2), (3, 3), (3, 1)] {
            two.set(&[r, c], 1.0);
        }
        assert_eq!(cam_to_bbox(&two, 0.2, 5, 5, 0).unwrap(), bx(2, 1, 5, 4));

        let flat = Tensor::full(&[4, 4], 0.7);
        assert_eq!(cam_to_bbox(&flat, 0.2, 64, 64, 3).unwrap(), BBox::new(0, 0, 64, 64, 3).unwrap());
        let dead = Tensor::full(&[4, 4], -0.7);
        assert_eq!(cam_to_bbox(&dead, 0.2, 64, 64, 0).unwrap(), bx(0, 0, 64, 64));
    }

    #[test]
    fn bbox_scales_cells_to_pixels() {
        let mut cam = Tensor::zeros(&[14, 14]);
        cam.set(&[3, 4], 2.0);
        assert_eq!(cam_to_bbox(&cam, 0.5, 224, 224, 0).unwrap(), bx(48, 64, 64, 80));
    }

    #[test]
    fn box_iou_and_accuracy() {
        assert!((bx(0, 0, 10, 10).iou(&bx(0, 5, 10, 15)) - 1.0 / 3.0).abs() < 1e-15);
        let gt = BBox::new(0, 0, 10, 10, 2).unwrap();
        let same = LocInstance {
            pred: gt,
            scores: vec![0.1, 0.2, 0.9],
            gt,
        };
        let a = loc_accuracy(std::slice::from_ref(&same));
        assert_eq!((a.top1, a.top5, a.gt_known), (1.0, 1.0, 1.0));
        let far = LocInstance {
            pred: BBox::new(20, 20, 30, 30, 2).unwrap(),
            ..same.clone()
        };
        assert_eq!(loc_accuracy(&[far]), LocAccuracy::default());
        let shifted = LocInstance {
            pred: BBox::new(0, 5, 10, 15, 2).unwrap(),
            ..same.clone()
        };
        assert_eq!(loc_accuracy(&[shifted]).gt_known, 0.0);
        let wrong_class = LocInstance {
            scores: vec![0.9, 0.2, 0.1],
            ..same
        };
        let a = loc_accuracy(&[wrong_class]);
        assert_eq!((a.top1, a.top5, a.gt_known), (0.0, 1.0, 1.0));
    }

    #[test]
    fn cosine_examples() {
        let a = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let o = Tensor::new(vec![2], vec![0.0, 3.0]).unwrap();
        assert_eq!(token_cosine(&a, &a).unwrap(), 1.0);
        assert_eq!(token_cosine(&a, &o).unwrap(), 0.0);
        assert!((token_cosine(&a, &b).unwrap() - 0.70711).abs() < 1e-5);
        assert!(token_cosine(&a, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn resample_reads_cell_centres() {
        let m = SegMask::new(4, 4, (0..16).map(|v| v as u8).collect()).unwrap();
        assert_eq!(m.resample(2, 2).labels, vec![5, 7, 13, 15]);
        assert_eq!(m.resample(4, 4), m);
    }
}
