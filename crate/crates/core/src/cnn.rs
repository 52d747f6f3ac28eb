//! Small residual CNN branch.
//!
//! A stride-2 3×3 stem followed by four stages of basic blocks (two 3×3
//! conv + GroupNorm + ReLU, identity or 1×1 projection shortcut). Stage
//! strides are 2, 2, 2, 1, so the 1×1 classifier emits a CAM at 1/16 of
//! the input side, the same grid as the transformer branch.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;

pub const STAGE_STRIDES: [usize; 4] = [2, 2, 2, 1];
/// Total downsampling of stem and stages.
pub const OUTPUT_STRIDE: usize = 16;
const GN_EPS: f64 = 1e-5;
const HEAD_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnnConfig {
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
    pub groups: usize,
    pub num_classes: usize,
    pub image_channels: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            stem_channels: 16,
            stage_channels: [16, 32, 64, 64],
            blocks_per_stage: 1,
            groups: 4,
            num_classes: 5,
            image_channels: 3,
        }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.num_classes == 0 || self.image_channels == 0 || self.blocks_per_stage == 0 {
            return Err(Error::Validation("cnn sizes must be positive".into()));
        }
        for c in std::iter::once(self.stem_channels).chain(self.stage_channels) {
            if c == 0 || c % self.groups != 0 {
                return Err(Error::Validation(format!(
                    "channel count {c} is not a positive multiple of {} groups",
                    self.groups
                )));
            }
        }
        Ok(())
    }
}

fn norm_pair(s: &mut ParamStore, base: &str, c: usize) {
    s.insert(format!("{base}.g"), Tensor::full(&[c], 1.0));
    s.insert(format!("{base}.b"), Tensor::zeros(&[c]));
}

/// Fresh `cnn.*` parameters.
pub fn init_params(cfg: &CnnConfig, rng: &mut StreamRng) -> Result<ParamStore> {
    cfg.validate()?;
    let mut s = ParamStore::new();
    let c0 = cfg.stem_channels;
    s.insert("cnn.stem.w", rng::kaiming_normal(rng, &[c0, cfg.image_channels, 3, 3]));
    norm_pair(&mut s, "cnn.stem.gn", c0);
    let mut cin = c0;
    for (si, &cout) in cfg.stage_channels.iter().enumerate() {
        for bi in 0..cfg.blocks_per_stage {
            let base = format!("cnn.s{si}.b{bi}");
            let stride = if bi == 0 { STAGE_STRIDES[si] } else { 1 };
            s.insert(format!("{base}.conv1.w"), rng::kaiming_normal(rng, &[cout, cin, 3, 3]));
            norm_pair(&mut s, &format!("{base}.gn1"), cout);
            s.insert(format!("{base}.conv2.w"), rng::kaiming_normal(rng, &[cout, cout, 3, 3]));
            norm_pair(&mut s, &format!("{base}.gn2"), cout);
            if stride != 1 || cin != cout {
                s.insert(format!("{base}.proj.w"), rng::kaiming_normal(rng, &[cout, cin, 1, 1]));
                norm_pair(&mut s, &format!("{base}.projgn"), cout);
            }
            cin = cout;
        }
    }
    s.insert("cnn.head.w", rng::trunc_normal(rng, &[cfg.num_classes, cin, 1, 1], HEAD_STD));
    s.insert("cnn.head.b", Tensor::zeros(&[cfg.num_classes]));
    Ok(s)
}

fn conv_gn(g: &mut Graph, p: &Bound, x: Var, conv: &str, gn: &str, stride: usize, groups: usize) -> Result<Var> {
    let w = p.get(&format!("{conv}.w"))?;
    let pad = g.shape(w)[2] / 2;
    let y = g.conv2d(x, w, stride, pad)?;
    g.group_norm(y, p.get(&format!("{gn}.g"))?, p.get(&format!("{gn}.b"))?, groups, GN_EPS)
}

/// `image[B×C_0×H×W]` to a CAM `B×C×(H/16)×(W/16)`; both sides must be multiples of 16.
pub fn cnn_forward(g: &mut Graph, p: &Bound, cfg: &CnnConfig, image: Var) -> Result<Var> {
    let s = g.shape(image);
    if s.len() != 4 || s[1] != cfg.image_channels {
        return Err(Error::shape(
            "cnn_forward",
            format!("expected B×{}×H×W, got {s:?}", cfg.image_channels),
        ));
    }
    if s[2] % OUTPUT_STRIDE != 0 || s[3] % OUTPUT_STRIDE != 0 {
        return Err(Error::shape(
            "cnn_forward",
            format!("sides {}×{} are not multiples of {OUTPUT_STRIDE}", s[2], s[3]),
        ));
    }
    let mut x = conv_gn(g, p, image, "cnn.stem", "cnn.stem.gn", 2, cfg.groups)?;
    x = g.relu(x)?;
    for si in 0..4 {
        for bi in 0..cfg.blocks_per_stage {
            let base = format!("cnn.s{si}.b{bi}");
            let stride = if bi == 0 { STAGE_STRIDES[si] } else { 1 };
            let y = conv_gn(g, p, x, &format!("{base}.conv1"), &format!("{base}.gn1"), stride, cfg.groups)?;
            let y = g.relu(y)?;
            let y = conv_gn(g, p, y, &format!("{base}.conv2"), &format!("{base}.gn2"), 1, cfg.groups)?;
            let shortcut = if p.get(&format!("{base}.proj.w")).is_ok() {
                conv_gn(g, p, x, &format!("{base}.proj"), &format!("{base}.projgn"), stride, cfg.groups)?
            } else {
                x
            };
            let y = g.add(y, shortcut)?;
            x = g.relu(y)?;
        }
    }
    let cam = g.conv2d(x, p.get("cnn.head.w")?, 1, 0)?;
    g.add_bias(cam, p.get("cnn.head.b")?, 1)
}

/// Per-class scores by global average pooling.
pub fn cnn_scores(g: &mut Graph, cam: Var) -> Result<Var> {
    g.global_avg_pool(cam)
}
