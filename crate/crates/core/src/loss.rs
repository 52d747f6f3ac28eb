//! Joint objective: two multi-label classification terms plus a weighted
//! L1 agreement term between the branch CAMs.

use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

/// Mean per-class sigmoid cross-entropy of `scores[B×C]`.
///
/// `labels` is row-major `B×C` with entries in {0, 1} and at least one
/// positive per row.
pub fn multilabel_cls_loss(g: &mut Graph, scores: Var, labels: &[f64]) -> Result<Var> {
    let s = g.shape(scores).to_vec();
    if s.len() != 2 || labels.len() != s[0] * s[1] {
        return Err(Error::shape(
            "multilabel_cls_loss",
            format!("{} labels for scores {s:?}", labels.len()),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::Contract(format!("label {bad} is not 0 or 1")));
    }
    if let Some(row) = labels.chunks(s[1]).position(|r| !r.contains(&1.0)) {
        return Err(Error::Contract(format!("image {row} has no positive class")));
    }
    g.bce_with_logits(scores, labels)
}

/// Mean absolute difference of two equally shaped raw CAMs.
pub fn l1_cam_loss(g: &mut Graph, cam1: Var, cam2: Var) -> Result<Var> {
    if g.shape(cam1) != g.shape(cam2) {
        return Err(Error::shape(
            "l1_cam_loss",
            format!("{:?} vs {:?}", g.shape(cam1), g.shape(cam2)),
        ));
    }
    let d = g.sub(cam1, cam2)?;
    let d = g.abs(d)?;
    g.mean(d)
}

/// Graph handles of the loss and its components.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub cls1: Var,
    pub cls2: Var,
    pub l1: Var,
    pub total: Var,
}

/// Scalar values of [`LossTerms`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossValues {
    pub cls1: f64,
    pub cls2: f64,
    pub l1: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn values(&self, g: &Graph) -> LossValues {
        let v = |x: Var| g.value(x).data()[0];
        LossValues {
            cls1: v(self.cls1),
            cls2: v(self.cls2),
            l1: v(self.l1),
            total: v(self.total),
        }
    }
}

/// `(cls1 + cls2) + λ·l1`, in the same order the graph evaluates it.
pub fn combine(cls1: f64, cls2: f64, l1: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        cls1 + cls2
    } else {
        (cls1 + cls2) + lambda * l1
    }
}

/// `L_cls1 + L_cls2 + λ·L_l1` with branch 1 the transformer and branch 2
/// the CNN. The L1 term is built even when `λ = 0` so it can be logged.
pub fn total_loss(g: &mut Graph, s1: Var, s2: Var, cam1: Var, cam2: Var, labels: &[f64], lambda: f64) -> Result<LossTerms> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Contract(format!("lambda {lambda} must be a finite value ≥ 0")));
    }
    let cls1 = multilabel_cls_loss(g, s1, labels)?;
    let cls2 = multilabel_cls_loss(g, s2, labels)?;
    let l1 = l1_cam_loss(g, cam1, cam2)?;
    let cls = g.add(cls1, cls2)?;
    let total = if lambda == 0.0 {
        cls
    } else {
        let weighted = g.scale(l1, lambda)?;
        g.add(cls, weighted)?
    };
    Ok(LossTerms { cls1, cls2, l1, total })
}
