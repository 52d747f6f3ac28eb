//! Joint training of both branches.
//!
//! Each sample of a batch gets its own graph; gradients are accumulated
//! with weight `1/B` and applied in one SGD step. All normalization is
//! per-sample, so this equals a batched forward pass.
//!
//! Randomness: parameters come from the `init` stream, the epoch order from
//! `shuffle[epoch]`, and each training view from
//! `augment[epoch·2³² + sample]`. Resuming at an epoch boundary therefore
//! reproduces an uninterrupted run exactly.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint;
use crate::cnn::{self, CnnConfig};
use crate::data::{Dataset, ToySample};
use crate::error::{Error, Result};
use crate::loss::{self, LossValues};
use crate::metrics;
use crate::params::ParamStore;
use crate::preprocess::{self, Sampling};
use crate::rng;
use crate::tensor::Tensor;
use crate::tiler::{self, TileSpec};
use crate::vit::{self, VitBranch, VitConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub momentum: f64,
    /// Exponent of the polynomial learning-rate decay to zero.
    pub poly_power: f64,
    /// Largest global L2 norm of the batch gradient; larger gradients are
    /// rescaled to it (0 = no clipping).
    pub grad_clip: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Sgd,
            momentum: 0.9,
            poly_power: 0.9,
            grad_clip: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub crop: usize,
    /// Shorter-side range of the random rescale before cropping.
    pub resize_range: (usize, usize),
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub optimizer: OptimizerSpec,
    pub vit: VitConfig,
    pub cnn: CnnConfig,
    pub tile: TileSpec,
    /// Training images (from the front of the set) used for the per-epoch
    /// token cosine trace.
    pub cosine_probe: usize,
    /// Keep a checkpoint every this many epochs (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.1,
            crop: 336,
            resize_range: (336, 504),
            epochs: 8,
            batch_size: 4,
            learning_rate: 0.01,
            weight_decay: 1e-4,
            seed: 0,
            optimizer: OptimizerSpec::default(),
            vit: VitConfig::default(),
            cnn: CnnConfig::default(),
            tile: TileSpec::default(),
            cosine_probe: 4,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be ≥ 0", self.lambda));
        }
        self.vit.validate()?;
        self.cnn.validate()?;
        self.tile.validate()?;
        if self.crop == 0 || self.crop % cnn::OUTPUT_STRIDE != 0 || self.crop % self.tile.stride != 0 {
            return bad(format!(
                "crop {} must be a multiple of 16 and of the tile stride {}",
                self.crop, self.tile.stride
            ));
        }
        if self.resize_range.0 < self.crop || self.resize_range.1 < self.resize_range.0 {
            return bad(format!("resize_range {:?} cannot supply a {} crop", self.resize_range, self.crop));
        }
        if self.tile.tile != self.vit.tile_size || self.tile.cell != self.vit.patch_size {
            return bad("tile size and cell must equal the encoder tile and patch size".into());
        }
        if self.vit.num_classes != self.cnn.num_classes || self.vit.image_channels != self.cnn.image_channels {
            return bad("both branches must agree on classes and input channels".into());
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("batch_size and learning_rate must be positive, weight_decay ≥ 0".into());
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) || !(self.optimizer.poly_power >= 0.0) {
            return bad("momentum must be in [0, 1) and poly_power ≥ 0".into());
        }
        if !(self.optimizer.grad_clip >= 0.0) {
            return bad(format!("grad_clip {} must be ≥ 0", self.optimizer.grad_clip));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Validation(format!(
            "config line {} column {}: {e}",
            e.line(),
            e.column()
        )))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// Parameters, optimizer momenta and progress counters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// `vit.*` and `cnn.*` entries.
    pub params: ParamStore,
    /// Momentum buffers keyed like `params`.
    pub momenta: ParamStore,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub last: LossValues,
}

const MOMENTUM_PREFIX: &str = "opt.m.";

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let mut params = vit::init_params(&cfg.vit, &mut rng::stream(cfg.seed, "init", 0))?;
        params.extend(cnn::init_params(&cfg.cnn, &mut rng::stream(cfg.seed, "init", 1))?);
        let momenta = params.zeros_like();
        Ok(TrainState {
            params,
            momenta,
            epoch: 0,
            step: 0,
            last: LossValues::default(),
        })
    }

    /// Checkpoint contents: parameters, momenta, counters and model shape.
    pub fn to_store(&self, cfg: &TrainConfig) -> ParamStore {
        let mut s = self.params.clone();
        for (name, t) in self.momenta.iter() {
            s.insert(format!("{MOMENTUM_PREFIX}{name}"), t.clone());
        }
        s.insert("train.epoch", Tensor::scalar(self.epoch as f64));
        s.insert("train.step", Tensor::scalar(self.step as f64));
        s.extend(model_meta(cfg));
        s
    }

    pub fn from_store(store: &ParamStore, cfg: &TrainConfig) -> Result<Self> {
        let (vit_cfg, tile) = model_from_meta(store)?;
        if vit_cfg != cfg.vit || tile != cfg.tile || cnn_from_meta(store)? != cfg.cnn {
            return Err(Error::Validation("checkpoint model shape differs from the config".into()));
        }
        let mut params = store.with_prefix("vit.");
        params.extend(store.with_prefix("cnn."));
        let mut momenta = ParamStore::new();
        for (name, t) in params.iter() {
            let m = store
                .get(&format!("{MOMENTUM_PREFIX}{name}"))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            momenta.insert(name, m);
        }
        let counter = |name: &str| -> Result<usize> { Ok(store.require(name)?.data()[0] as usize) };
        Ok(TrainState {
            params,
            momenta,
            epoch: counter("train.epoch")?,
            step: counter("train.step")?,
            last: LossValues::default(),
        })
    }
}

fn as_f64(v: &[usize]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn meta_vec(store: &ParamStore, name: &str, len: usize) -> Result<Vec<usize>> {
    let t = store.require(name)?;
    if t.numel() != len || t.data().iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
        return Err(Error::Validation(format!("malformed checkpoint entry `{name}`")));
    }
    Ok(t.data().iter().map(|&v| v as usize).collect())
}

/// `meta.*` entries that let inference rebuild the model from a checkpoint.
pub fn model_meta(cfg: &TrainConfig) -> ParamStore {
    let v = &cfg.vit;
    let c = &cfg.cnn;
    let mut s = ParamStore::new();
    let vit = [v.patch_size, v.embed_dim, v.num_layers, v.num_heads, v.num_classes, v.loop_count, v.image_channels, v.mlp_ratio, v.tile_size];
    s.insert("meta.vit", Tensor::new(vec![vit.len()], as_f64(&vit)).expect("1-D"));
    let tile = [cfg.tile.tile, cfg.tile.stride, cfg.tile.cell];
    s.insert("meta.tile", Tensor::new(vec![3], as_f64(&tile)).expect("1-D"));
    let sc = c.stage_channels;
    let cnn = [c.stem_channels, sc[0], sc[1], sc[2], sc[3], c.blocks_per_stage, c.groups, c.num_classes, c.image_channels];
    s.insert("meta.cnn", Tensor::new(vec![cnn.len()], as_f64(&cnn)).expect("1-D"));
    s
}

/// Encoder and tiling configuration recorded in a checkpoint.
pub fn model_from_meta(store: &ParamStore) -> Result<(VitConfig, TileSpec)> {
    let v = meta_vec(store, "meta.vit", 9)?;
    let t = meta_vec(store, "meta.tile", 3)?;
    let cfg = VitConfig {
        patch_size: v[0],
        embed_dim: v[1],
        num_layers: v[2],
        num_heads: v[3],
        num_classes: v[4],
        loop_count: v[5],
        image_channels: v[6],
        mlp_ratio: v[7],
        tile_size: v[8],
    };
    cfg.validate()?;
    let tile = TileSpec {
        tile: t[0],
        stride: t[1],
        cell: t[2],
    };
    tile.validate()?;
    Ok((cfg, tile))
}

fn cnn_from_meta(store: &ParamStore) -> Result<CnnConfig> {
    let c = meta_vec(store, "meta.cnn", 9)?;
    Ok(CnnConfig {
        stem_channels: c[0],
        stage_channels: [c[1], c[2], c[3], c[4]],
        blocks_per_stage: c[5],
        groups: c[6],
        num_classes: c[7],
        image_channels: c[8],
    })
}

/// One preprocessed training example.
pub struct Example {
    /// `1×C_0×crop×crop`, standardized.
    pub image: Tensor,
    pub labels: Vec<f64>,
}

pub fn learning_rate(cfg: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    let frac = step as f64 / total_steps.max(1) as f64;
    cfg.learning_rate * (1.0 - frac).max(0.0).powf(cfg.optimizer.poly_power)
}

/// Forward, loss and backward for one example; `scale·grad` is added to `grads`.
pub fn accumulate(cfg: &TrainConfig, params: &ParamStore, ex: &Example, grads: &mut ParamStore, scale: f64) -> Result<LossValues> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, "", true);
    let branch = VitBranch::new(&cfg.vit, &bound);
    let tiled = tiler::tiled_cam(&mut g, &branch, &ex.image, cfg.tile).map_err(|e| diagnose("transformer branch", e))?;
    let s1 = vit::class_scores(&mut g, tiled.cam)?;
    let x = g.input(ex.image.clone());
    let cam2 = cnn::cnn_forward(&mut g, &bound, &cfg.cnn, x).map_err(|e| diagnose("CNN branch", e))?;
    let s2 = cnn::cnn_scores(&mut g, cam2)?;
    let terms = loss::total_loss(&mut g, s1, s2, tiled.cam, cam2, &ex.labels, cfg.lambda).map_err(|e| diagnose("loss", e))?;
    g.backward(terms.total).map_err(|e| diagnose("backward pass", e))?;
    bound.accumulate_grads(&g, grads, scale)?;
    Ok(terms.values(&g))
}

fn diagnose(stage: &str, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Contract(format!("non-finite value from `{op}` in the {stage}")),
        other => other,
    }
}

/// One optimizer update on `batch`; returns the batch-mean loss terms.
pub fn train_step(cfg: &TrainConfig, state: &mut TrainState, batch: &[Example], total_steps: usize) -> Result<LossValues> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut grads = state.params.zeros_like();
    let scale = 1.0 / batch.len() as f64;
    let mut mean = LossValues::default();
    for ex in batch {
        let v = accumulate(cfg, &state.params, ex, &mut grads, scale)?;
        mean.cls1 += scale * v.cls1;
        mean.cls2 += scale * v.cls2;
        mean.l1 += scale * v.l1;
    }
    mean.total = loss::combine(mean.cls1, mean.cls2, mean.l1, cfg.lambda);
    for (name, v) in [("L_cls1", mean.cls1), ("L_cls2", mean.cls2), ("L_l1", mean.l1), ("L_total", mean.total)] {
        if !v.is_finite() {
            return Err(Error::Contract(format!("{name} is not finite at step {}", state.step)));
        }
    }
    let norm = grads.iter().flat_map(|(_, g)| g.data()).map(|g| g * g).sum::<f64>().sqrt();
    log::debug!("step {}: gradient norm {norm:.4e}", state.step + 1);
    let clip = cfg.optimizer.grad_clip;
    let gscale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
    let lr = learning_rate(cfg, state.step, total_steps);
    let (mu, wd) = (cfg.optimizer.momentum, cfg.weight_decay);
    for (name, w) in state.params.iter_mut() {
        let g = grads.get(name).expect("same keys");
        let m = state.momenta.get_mut(name).expect("same keys");
        for ((wi, mi), gi) in w.data_mut().iter_mut().zip(m.data_mut()).zip(g.data()) {
            *mi = mu * *mi + gscale * gi + wd * *wi;
            *wi -= lr * *mi;
        }
    }
    state.step += 1;
    state.last = mean;
    Ok(mean)
}

/// Training view of sample `index` in `epoch`.
pub fn training_example(cfg: &TrainConfig, sample: &ToySample, epoch: usize, index: usize) -> Result<Example> {
    let mut r = rng::stream(cfg.seed, "augment", ((epoch as u64) << 32) | index as u64);
    let view = preprocess::preprocess(&sample.image, cfg.crop, cfg.resize_range, Sampling::Random(&mut r))?;
    Ok(Example {
        image: Tensor::stack(&[view])?,
        labels: sample.label_row(),
    })
}

/// Sample order of `epoch` (0-based).
pub fn epoch_order(cfg: &TrainConfig, n: usize, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(cfg.seed, "shuffle", epoch as u64));
    order
}

/// Mean cosine between the final-pass encoder input and output over the
/// first `cosine_probe` training images (centre view).
pub fn probe_cosine(cfg: &TrainConfig, params: &ParamStore, data: &Dataset) -> Result<f64> {
    let n = cfg.cosine_probe.min(data.samples.len());
    if n == 0 {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for s in &data.samples[..n] {
        let view = preprocess::preprocess(&s.image, cfg.crop, cfg.resize_range, Sampling::Center)?;
        let mut g = Graph::new();
        let bound = params.bind(&mut g, "vit.", false);
        let branch = VitBranch::new(&cfg.vit, &bound);
        let tiled = tiler::tiled_cam(&mut g, &branch, &Tensor::stack(&[view])?, cfg.tile)?;
        let c = &tiled.correction;
        total += metrics::token_cosine(g.value(c.final_input().tokens), g.value(c.final_output().tokens))?;
    }
    Ok(total / n as f64)
}

/// Output files of a run directory.
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn log(&self) -> PathBuf {
        self.dir.join("log.csv")
    }
    pub fn cosine(&self) -> PathBuf {
        self.dir.join("cosine.csv")
    }
    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }
    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch-{epoch:03}.ckpt"))
    }
}

fn open_log(path: &Path, header: &str, fresh: bool) -> Result<File> {
    let mut f = if fresh {
        File::create(path)
    } else {
        OpenOptions::new().append(true).create(true).open(path)
    }
    .map_err(|e| Error::io(path, e))?;
    if fresh {
        writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

/// Everything a finished run produced.
pub struct TrainOutcome {
    pub state: TrainState,
    /// Per-step batch-mean losses of this invocation.
    pub losses: Vec<LossValues>,
    /// `(epoch, cosine)` after every completed epoch of this invocation.
    pub cosine: Vec<(usize, f64)>,
}

/// Runs (or resumes) training up to `cfg.epochs`. With an output directory
/// it writes `log.csv`, `cosine.csv`, periodic and final checkpoints.
pub fn train(cfg: &TrainConfig, data: &Dataset, out: Option<&Path>, resume: Option<TrainState>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.samples.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    if data.spec.classes != cfg.vit.num_classes {
        return Err(Error::Validation(format!(
            "dataset has {} classes, model expects {}",
            data.spec.classes, cfg.vit.num_classes
        )));
    }
    let fresh = resume.is_none();
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::init(cfg)?,
    };
    let n = data.samples.len();
    let total_steps = cfg.epochs * cfg.steps_per_epoch(n);
    let files = out.map(|d| RunFiles { dir: d.to_path_buf() });
    let mut logs = match &files {
        Some(f) => {
            fs::create_dir_all(&f.dir).map_err(|e| Error::io(&f.dir, e))?;
            Some((
                open_log(&f.log(), "step,L_cls1,L_cls2,L_l1,L_total", fresh)?,
                open_log(&f.cosine(), "epoch,cosine", fresh)?,
            ))
        }
        None => None,
    };
    let mut outcome_losses = Vec::new();
    let mut outcome_cos = Vec::new();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let order = epoch_order(cfg, n, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| training_example(cfg, &data.samples[i], epoch, i))
                .collect::<Result<Vec<_>>>()?;
            let v = train_step(cfg, &mut state, &batch, total_steps)?;
            if let (Some((log, _)), Some(f)) = (&mut logs, &files) {
                writeln!(log, "{},{:e},{:e},{:e},{:e}", state.step, v.cls1, v.cls2, v.l1, v.total)
                    .map_err(|e| Error::io(&f.log(), e))?;
            }
            outcome_losses.push(v);
        }
        state.epoch += 1;
        let cos = probe_cosine(cfg, &state.params, data)?;
        log::info!(
            "epoch {}/{}: L_total {:.4} (cls1 {:.4}, cls2 {:.4}, l1 {:.4}), cosine {:.4}",
            state.epoch, cfg.epochs, state.last.total, state.last.cls1, state.last.cls2, state.last.l1, cos
        );
        outcome_cos.push((state.epoch, cos));
        if let (Some((_, cl)), Some(f)) = (&mut logs, &files) {
            writeln!(cl, "{},{:e}", state.epoch, cos).map_err(|e| Error::io(&f.cosine(), e))?;
            if cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0 {
                checkpoint::save(&f.epoch_checkpoint(state.epoch), &state.to_store(cfg))?;
            }
        }
    }
    if let Some(f) = &files {
        checkpoint::save(&f.final_checkpoint(), &state.to_store(cfg))?;
    }
    Ok(TrainOutcome {
        state,
        losses: outcome_losses,
        cosine: outcome_cos,
    })
}
