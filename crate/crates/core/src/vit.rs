//! Miniature DeiT-style transformer branch.
//!
//! Pipeline: non-overlapping patch projection, class token, learned
//! position embedding, `num_layers` pre-norm encoder blocks, then a 1×1
//! classifier over the patch tokens that yields a class activation map.
//! The encoder can be re-entered with its own summed output
//! ([`VitBranch::residual_correct`]); at inference the CAM is sharpened by
//! the class-token attention row ([`refine_cam`]).

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_classes: usize,
    /// Extra encoder passes of the residual-like correction (0 = plain encoder).
    pub loop_count: usize,
    pub image_channels: usize,
    pub mlp_ratio: usize,
    /// Side of the square input the position embedding is sized for.
    pub tile_size: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            patch_size: 16,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            num_classes: 5,
            loop_count: 3,
            image_channels: 3,
            mlp_ratio: 4,
            tile_size: 224,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.patch_size == 0 || self.embed_dim == 0 || self.num_heads == 0 || self.num_classes == 0 {
            return bad("vit sizes must be positive".into());
        }
        if self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.tile_size % self.patch_size != 0 {
            return bad(format!(
                "patch_size {} does not divide tile_size {}",
                self.patch_size, self.tile_size
            ));
        }
        if self.mlp_ratio == 0 || self.image_channels == 0 {
            return bad("mlp_ratio and image_channels must be positive".into());
        }
        Ok(())
    }

    /// Patches per side of a tile.
    pub fn grid(&self) -> usize {
        self.tile_size / self.patch_size
    }

    /// Tokens per tile, class token included.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }
}

/// Token matrix `B×(N²+1)×D`, class token first.
#[derive(Clone, Copy, Debug)]
pub struct TokenBatch {
    pub tokens: Var,
    pub grid: usize,
}

/// Head-averaged post-softmax attention of each layer, and their mean.
#[derive(Clone, Debug)]
pub struct AttentionStack {
    pub per_layer: Vec<Tensor>,
    pub mean: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamKind {
    Semantic,
    Refined,
    Merged,
}

/// `B×C×h×w` class activation map values.
#[derive(Clone, Debug)]
pub struct CamMap {
    pub values: Tensor,
    pub kind: CamKind,
}

/// Every encoder pass of one residual-like correction run.
#[derive(Clone, Debug)]
pub struct Correction {
    /// `T_in` of each pass; the first entry is the patch embedding.
    pub inputs: Vec<TokenBatch>,
    /// `T_out` of each pass.
    pub outputs: Vec<TokenBatch>,
    /// Attention recorded during the final pass.
    pub attention: AttentionStack,
}

impl Correction {
    pub fn final_output(&self) -> TokenBatch {
        *self.outputs.last().expect("at least one encoder pass")
    }

    pub fn final_input(&self) -> TokenBatch {
        *self.inputs.last().expect("at least one encoder pass")
    }
}

/// Fresh `vit.*` parameters.
pub fn init_params(cfg: &VitConfig, rng: &mut StreamRng) -> Result<ParamStore> {
    cfg.validate()?;
    let (d, p, c0) = (cfg.embed_dim, cfg.patch_size, cfg.image_channels);
    let hidden = d * cfg.mlp_ratio;
    let mut s = ParamStore::new();
    s.insert("vit.patch.w", rng::trunc_normal(rng, &[d, c0, p, p], INIT_STD));
    s.insert("vit.patch.b", Tensor::zeros(&[d]));
    s.insert("vit.cls", rng::trunc_normal(rng, &[1, 1, d], INIT_STD));
    s.insert("vit.pos", rng::trunc_normal(rng, &[1, cfg.tokens(), d], INIT_STD));
    for l in 0..cfg.num_layers {
        let n = |s: &str| format!("vit.blocks.{l}.{s}");
        s.insert(n("ln1.g"), Tensor::full(&[d], 1.0));
        s.insert(n("ln1.b"), Tensor::zeros(&[d]));
        s.insert(n("qkv.w"), rng::trunc_normal(rng, &[d, 3 * d], INIT_STD));
        s.insert(n("qkv.b"), Tensor::zeros(&[3 * d]));
        s.insert(n("proj.w"), rng::trunc_normal(rng, &[d, d], INIT_STD));
        s.insert(n("proj.b"), Tensor::zeros(&[d]));
        s.insert(n("ln2.g"), Tensor::full(&[d], 1.0));
        s.insert(n("ln2.b"), Tensor::zeros(&[d]));
        s.insert(n("fc1.w"), rng::trunc_normal(rng, &[d, hidden], INIT_STD));
        s.insert(n("fc1.b"), Tensor::zeros(&[hidden]));
        s.insert(n("fc2.w"), rng::trunc_normal(rng, &[hidden, d], INIT_STD));
        s.insert(n("fc2.b"), Tensor::zeros(&[d]));
    }
    s.insert("vit.head.w", rng::trunc_normal(rng, &[d, cfg.num_classes], INIT_STD));
    s.insert("vit.head.b", Tensor::zeros(&[cfg.num_classes]));
    Ok(s)
}

/// The transformer branch bound to a graph.
pub struct VitBranch<'a> {
    pub cfg: &'a VitConfig,
    params: &'a Bound,
}

impl<'a> VitBranch<'a> {
    pub fn new(cfg: &'a VitConfig, params: &'a Bound) -> Self {
        VitBranch { cfg, params }
    }

    fn p(&self, name: &str) -> Result<Var> {
        self.params.get(name)
    }

    /// `image[B×C_0×S×S]` to tokens. `S` must equal the configured tile size.
    pub fn patch_embed(&self, g: &mut Graph, image: Var) -> Result<TokenBatch> {
        let s = g.shape(image).to_vec();
        let ps = self.cfg.patch_size;
        if s.len() != 4 || s[1] != self.cfg.image_channels || s[2] != s[3] {
            return Err(Error::shape("patch_embed", format!("expected B×{}×S×S, got {s:?}", self.cfg.image_channels)));
        }
        if s[2] % ps != 0 {
            return Err(Error::shape("patch_embed", format!("side {} not divisible by patch {ps}", s[2])));
        }
        if s[2] != self.cfg.tile_size {
            return Err(Error::shape(
                "patch_embed",
                format!("side {} differs from the position-embedding tile {}", s[2], self.cfg.tile_size),
            ));
        }
        let (b, d, n) = (s[0], self.cfg.embed_dim, s[2] / ps);
        let x = g.conv2d(image, self.p("vit.patch.w")?, ps, 0)?;
        let x = g.add_bias(x, self.p("vit.patch.b")?, 1)?;
        let x = g.reshape(x, &[b, d, n * n])?;
        let patches = g.permute(x, &[0, 2, 1])?;
        let cls = repeat_batch(g, self.p("vit.cls")?, b)?;
        let tokens = g.concat(&[cls, patches], 1)?;
        let pos = repeat_batch(g, self.p("vit.pos")?, b)?;
        let tokens = g.add(tokens, pos)?;
        Ok(TokenBatch { tokens, grid: n })
    }

    /// All encoder layers; output has the input's shape.
    pub fn encode(&self, g: &mut Graph, t: &TokenBatch) -> Result<(TokenBatch, AttentionStack)> {
        let (out, att) = self.encode_inner(g, t, true)?;
        Ok((out, att.expect("recorded")))
    }

    fn encode_inner(&self, g: &mut Graph, t: &TokenBatch, record: bool) -> Result<(TokenBatch, Option<AttentionStack>)> {
        let s = g.shape(t.tokens).to_vec();
        let d = self.cfg.embed_dim;
        if s.len() != 3 || s[2] != d || s[1] != t.grid * t.grid + 1 {
            return Err(Error::shape(
                "encode",
                format!("tokens {s:?} do not match D={d}, grid {}", t.grid),
            ));
        }
        let (b, n_tok) = (s[0], s[1]);
        let mut x = g.reshape(t.tokens, &[b * n_tok, d])?;
        let mut per_layer = Vec::new();
        for l in 0..self.cfg.num_layers {
            let (y, att) = self.block(g, x, l, b, n_tok, record)?;
            x = y;
            per_layer.extend(att);
        }
        let tokens = g.reshape(x, &[b, n_tok, d])?;
        let att = record.then(|| {
            let mut mean = Tensor::zeros(&[b, n_tok, n_tok]);
            for a in &per_layer {
                for (m, v) in mean.data_mut().iter_mut().zip(a.data()) {
                    *m += v;
                }
            }
            let inv = 1.0 / per_layer.len().max(1) as f64;
            mean.data_mut().iter_mut().for_each(|m| *m *= inv);
            AttentionStack { per_layer, mean }
        });
        Ok((TokenBatch { tokens, grid: t.grid }, att))
    }

    fn block(&self, g: &mut Graph, x: Var, l: usize, b: usize, n_tok: usize, record: bool) -> Result<(Var, Option<Tensor>)> {
        let n = |s: &str| format!("vit.blocks.{l}.{s}");
        let (d, h) = (self.cfg.embed_dim, self.cfg.num_heads);
        let dh = d / h;

        let y = g.layer_norm(x, self.p(&n("ln1.g"))?, self.p(&n("ln1.b"))?, LN_EPS)?;
        let qkv = linear(g, y, self.p(&n("qkv.w"))?, self.p(&n("qkv.b"))?)?;
        let qkv = g.reshape(qkv, &[b, n_tok, 3, h, dh])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut heads = [qkv; 3];
        for (i, slot) in heads.iter_mut().enumerate() {
            let part = g.slice(qkv, 0, i, 1)?;
            *slot = g.reshape(part, &[b * h, n_tok, dh])?;
        }
        let [q, k, v] = heads;
        let scores = g.bmm(q, k, false, true, 1.0 / (dh as f64).sqrt())?;
        let attn = g.softmax(scores, 2)?;
        let recorded = record.then(|| head_average(g.value(attn), b, h, n_tok));
        let ctx = g.bmm(attn, v, false, false, 1.0)?;
        let ctx = g.reshape(ctx, &[b, h, n_tok, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b * n_tok, d])?;
        let out = linear(g, ctx, self.p(&n("proj.w"))?, self.p(&n("proj.b"))?)?;
        let x = g.add(x, out)?;

        let y = g.layer_norm(x, self.p(&n("ln2.g"))?, self.p(&n("ln2.b"))?, LN_EPS)?;
        let y = linear(g, y, self.p(&n("fc1.w"))?, self.p(&n("fc1.b"))?)?;
        let y = g.gelu(y)?;
        let y = linear(g, y, self.p(&n("fc2.w"))?, self.p(&n("fc2.b"))?)?;
        Ok((g.add(x, y)?, recorded))
    }

    /// Residual-like correction: `T_in⁽ᵏ⁺¹⁾ = T_in⁽ᵏ⁾ + T_out⁽ᵏ⁾` for
    /// `loop_count` rounds with shared weights, then one final pass. The
    /// encoder runs `loop_count + 1` times in total.
    pub fn residual_correct(&self, g: &mut Graph, image: Var) -> Result<Correction> {
        let mut input = self.patch_embed(g, image)?;
        let mut inputs = Vec::with_capacity(self.cfg.loop_count + 1);
        let mut outputs = Vec::with_capacity(self.cfg.loop_count + 1);
        for _ in 0..self.cfg.loop_count {
            let (out, _) = self.encode_inner(g, &input, false)?;
            inputs.push(input);
            outputs.push(out);
            input = TokenBatch {
                tokens: g.add(input.tokens, out.tokens)?,
                grid: input.grid,
            };
        }
        let (out, attention) = self.encode(g, &input)?;
        inputs.push(input);
        outputs.push(out);
        Ok(Correction {
            inputs,
            outputs,
            attention,
        })
    }

    /// Drops the class token and classifies each patch token: `B×C×N×N`.
    pub fn semantic_cam(&self, g: &mut Graph, t: &TokenBatch) -> Result<Var> {
        let s = g.shape(t.tokens).to_vec();
        let n2 = t.grid * t.grid;
        if s.len() != 3 || s[1] != n2 + 1 || s[2] != self.cfg.embed_dim {
            return Err(Error::shape(
                "semantic_cam",
                format!("{s:?} is not B×(N²+1)×D for N={}", t.grid),
            ));
        }
        let (b, d, c) = (s[0], s[2], self.cfg.num_classes);
        let patches = g.slice(t.tokens, 1, 1, n2)?;
        let patches = g.reshape(patches, &[b * n2, d])?;
        let logits = linear(g, patches, self.p("vit.head.w")?, self.p("vit.head.b")?)?;
        let logits = g.reshape(logits, &[b, n2, c])?;
        let logits = g.permute(logits, &[0, 2, 1])?;
        g.reshape(logits, &[b, c, t.grid, t.grid])
    }
}

/// Per-class scores by global average pooling of a CAM.
pub fn class_scores(g: &mut Graph, cam: Var) -> Result<Var> {
    g.global_avg_pool(cam)
}

/// Multiplies every class channel by the class-to-patch attention map.
///
/// The map is row 0 (class token) of the layer-averaged attention,
/// restricted to the patch columns and reshaped to the CAM grid.
pub fn refine_cam(cam: &CamMap, att: &AttentionStack) -> Result<CamMap> {
    if cam.kind == CamKind::Refined {
        return Err(Error::Contract("CAM is already refined".into()));
    }
    let cs = cam.values.shape();
    let a = att.mean.shape();
    if cs.len() != 4 || a.len() != 3 || cs[0] != a[0] || cs[2] != cs[3] || a[1] != cs[2] * cs[3] + 1 {
        return Err(Error::shape(
            "refine_cam",
            format!("CAM {cs:?} does not match attention {a:?}"),
        ));
    }
    let (b, c, plane, n_tok) = (cs[0], cs[1], cs[2] * cs[3], a[1]);
    let am = att.mean.data();
    let mut out = cam.values.clone();
    let data = out.data_mut();
    for bi in 0..b {
        let c2p = &am[bi * n_tok * n_tok + 1..bi * n_tok * n_tok + n_tok];
        for ch in 0..c {
            let base = (bi * c + ch) * plane;
            for (v, w) in data[base..base + plane].iter_mut().zip(c2p) {
                *v *= w;
            }
        }
    }
    Ok(CamMap {
        values: out,
        kind: CamKind::Refined,
    })
}

/// `x[M×K] · w[K×N] + b[N]`.
pub(crate) fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b, 1)
}

/// Stacks `b` copies of a `1×...` tensor along the leading axis.
pub(crate) fn repeat_batch(g: &mut Graph, x: Var, b: usize) -> Result<Var> {
    if b == 1 {
        return Ok(x);
    }
    let copies = vec![x; b];
    g.concat(&copies, 0)
}

fn head_average(attn: &Tensor, b: usize, h: usize, n_tok: usize) -> Tensor {
    let plane = n_tok * n_tok;
    let src = attn.data();
    let mut out = vec![0.0; b * plane];
    for bi in 0..b {
        let dst = &mut out[bi * plane..(bi + 1) * plane];
        for hi in 0..h {
            let from = &src[(bi * h + hi) * plane..(bi * h + hi + 1) * plane];
            dst.iter_mut().zip(from).for_each(|(d, s)| *d += s);
        }
        let inv = 1.0 / h as f64;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    Tensor::new(vec![b, n_tok, n_tok], out).expect("consistent extents")
}
