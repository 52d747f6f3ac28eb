//! `dualcam`: dataset generation, training, evaluation, sweeps and CAM
//! renderings. Every command leaves a `manifest.json`-style record next to
//! its outputs.

mod manifest;

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use dualcam::ablation::{self, SweepKind, SweepPlan};
use dualcam::checkpoint;
use dualcam::data::{self, DatasetSpec, CLASS_NAMES};
use dualcam::eval::{self, EvalOptions, InferenceModel, TileMode};
use dualcam::train::{self, TrainConfig, TrainState};
use dualcam::viz;

use manifest::{DatasetRef, RunManifest};

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "dualcam", version, about = "Dual-branch CAM training and evaluation on a toy shapes set")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset.
    GenData(GenData),
    /// Train both branches jointly.
    Train(Train),
    /// Score seeds (mIoU) or boxes (top-1/top-5/GT-known) of a checkpoint.
    Eval(Eval),
    /// Write input, CAM heatmap and seed overlay images.
    Viz(Viz),
    /// Train and score a sweep grid over several seeds.
    Ablate(Ablate),
}

#[derive(Args)]
struct GenData {
    /// DatasetSpec JSON; defaults apply to missing keys.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the dataset seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the image count.
    #[arg(long)]
    num_images: Option<usize>,
    /// Replace an existing dataset in `out`.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    /// TrainConfig JSON; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    loops: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from this checkpoint (must match the config's model shape).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMode {
    Seed,
    Wsol,
}

#[derive(Clone, Copy, ValueEnum)]
enum TileArg {
    None,
    NonOverlap,
    Overlap,
}

impl From<TileArg> for TileMode {
    fn from(t: TileArg) -> Self {
        match t {
            TileArg::None => TileMode::None,
            TileArg::NonOverlap => TileMode::NonOverlap,
            TileArg::Overlap => TileMode::Overlap,
        }
    }
}

#[derive(Args)]
struct CamArgs {
    #[arg(long, value_enum, default_value = "overlap")]
    tile_mode: TileArg,
    /// Use the semantic CAM without class-token attention refinement.
    #[arg(long)]
    no_refine: bool,
    /// Average CAMs over input scales 0.75, 1 and 1.25.
    #[arg(long)]
    multiscale: bool,
    #[arg(long, default_value_t = 0.3)]
    bg_tau: f64,
    #[arg(long, default_value_t = 0.2)]
    theta: f64,
}

impl CamArgs {
    fn options(&self, image_resolution: bool) -> EvalOptions {
        EvalOptions {
            mode: self.tile_mode.into(),
            refine: !self.no_refine,
            multiscale: self.multiscale,
            bg_tau: self.bg_tau,
            theta: self.theta,
            image_resolution,
        }
    }
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum, default_value = "seed")]
    mode: EvalMode,
    #[command(flatten)]
    cam: CamArgs,
    /// Score seeds against full-resolution masks.
    #[arg(long)]
    image_resolution: bool,
    /// Metrics JSON path [default: eval-<mode>.json next to the checkpoint].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Viz {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Comma-separated sample ids.
    #[arg(long, value_delimiter = ',', required = true)]
    ids: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cam: CamArgs,
}

#[derive(Args)]
struct Ablate {
    /// Training set.
    #[arg(long)]
    data: PathBuf,
    /// Evaluation set.
    #[arg(long)]
    eval_data: PathBuf,
    #[arg(long)]
    sweep: SweepKind,
    /// Base TrainConfig JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Result CSV; run directories, the cosine trace and the manifest go next to it.
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Viz(a) => cmd_viz(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_data(dir: &Path) -> Result<data::Dataset> {
    data::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_json(&read_text(p)?).with_context(|| format!("config {}", p.display())),
        None => Ok(TrainConfig::default()),
    }
}

const DATASET_ENTRIES: [&str; 6] = ["images", "masks", "labels.csv", "boxes.csv", "meta.json", "manifest.json"];

fn gen_data(a: GenData) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => DatasetSpec::from_json(&read_text(p)?).with_context(|| format!("spec {}", p.display()))?,
        None => DatasetSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.num_images {
        spec.num_images = n;
    }
    if a.out.exists() {
        let non_empty = fs::read_dir(&a.out)
            .with_context(|| format!("reading {}", a.out.display()))?
            .next()
            .is_some();
        if non_empty && !a.force {
            bail!("{} exists and is not empty; pass --force to replace the dataset in it", a.out.display());
        }
        for name in DATASET_ENTRIES {
            let p = a.out.join(name);
            if p.is_dir() {
                fs::remove_dir_all(&p).with_context(|| format!("removing {}", p.display()))?;
            } else if p.exists() {
                fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
            }
        }
    }
    let dataset = data::generate(&spec)?;
    data::save(&dataset, &a.out)?;
    let mut per_class = vec![0usize; spec.classes];
    let mut objects = 0;
    for s in &dataset.samples {
        objects += s.boxes.len();
        for (c, &l) in s.labels.iter().enumerate() {
            per_class[c] += l as usize;
        }
    }
    println!("{} images, {} objects in {}", dataset.samples.len(), objects, a.out.display());
    for (name, n) in CLASS_NAMES.iter().zip(&per_class) {
        println!("  {name:<10} {n:>5} images");
    }
    let mut m = RunManifest::new("gen-data");
    m.config = serde_json::to_value(&spec)?;
    m.datasets.push(DatasetRef::of(&a.out)?);
    m.outputs.push(a.out.clone());
    m.metrics = json!({ "images": dataset.samples.len(), "objects": objects, "images_per_class": per_class });
    m.write(&a.out.join("manifest.json"))
}

fn cmd_train(a: Train) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    if let Some(n) = a.loops {
        cfg.vit.loop_count = n;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let dataset = load_data(&a.data)?;
    let resume = match &a.resume {
        Some(p) => Some(TrainState::from_store(&checkpoint::load(p)?, &cfg)?),
        None => None,
    };
    let outcome = train::train(&cfg, &dataset, Some(&a.out), resume)?;
    let files = train::RunFiles { dir: a.out.clone() };
    let last = outcome.state.last;
    println!(
        "trained to epoch {} ({} steps): L_total {:.4}  L_cls1 {:.4}  L_cls2 {:.4}  L_l1 {:.4}",
        outcome.state.epoch, outcome.state.step, last.total, last.cls1, last.cls2, last.l1
    );
    let mut m = RunManifest::new("train");
    m.config = serde_json::to_value(&cfg)?;
    m.datasets.push(DatasetRef::of(&a.data)?);
    let mut ckpts: Vec<PathBuf> = (1..=cfg.epochs)
        .map(|e| files.epoch_checkpoint(e))
        .filter(|p| p.exists())
        .collect();
    ckpts.push(files.final_checkpoint());
    m.checkpoints = ckpts;
    m.outputs = vec![files.log(), files.cosine()];
    m.metrics = json!({
        "epoch": outcome.state.epoch,
        "step": outcome.state.step,
        "last": last,
        "cosine": outcome.cosine.iter().map(|&(e, c)| json!({"epoch": e, "cosine": c})).collect::<Vec<_>>(),
    });
    m.write(&a.out.join("manifest.json"))
}

fn load_model(ckpt: &Path) -> Result<InferenceModel> {
    let store = checkpoint::load(ckpt)?;
    Ok(InferenceModel::from_checkpoint(&store)?)
}

fn cmd_eval(a: Eval) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let dataset = load_data(&a.data)?;
    let opts = a.cam.options(a.image_resolution);
    let (name, report) = match a.mode {
        EvalMode::Seed => {
            let r = eval::evaluate_seeds(&model, &dataset, &opts)?;
            print!("{}", eval::seed_table(&r));
            ("seed", serde_json::to_value(&r)?)
        }
        EvalMode::Wsol => {
            let r = eval::evaluate_wsol(&model, &dataset, &opts)?;
            print!("{}", eval::wsol_table(&r));
            ("wsol", serde_json::to_value(&r)?)
        }
    };
    let out = a.out.unwrap_or_else(|| {
        a.ckpt.parent().unwrap_or(Path::new(".")).join(format!("eval-{name}.json"))
    });
    fs::write(&out, serde_json::to_string_pretty(&report)? + "\n").with_context(|| format!("writing {}", out.display()))?;
    let mut m = RunManifest::new("eval");
    m.config = serde_json::to_value(opts)?;
    m.datasets.push(DatasetRef::of(&a.data)?);
    m.checkpoints.push(a.ckpt.clone());
    m.outputs.push(out.clone());
    m.metrics = report;
    m.write(&out.with_extension("manifest.json"))
}

fn cmd_viz(a: Viz) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let dataset = load_data(&a.data)?;
    model.check_dataset(&dataset)?;
    let opts = a.cam.options(false);
    let mut samples = Vec::new();
    for id in &a.ids {
        match dataset.samples.iter().find(|s| &s.id == id) {
            Some(s) => samples.push(s),
            None => bail!("unknown id `{id}`; available ids: {}", dataset.ids().join(", ")),
        }
    }
    let mut outputs = Vec::new();
    for s in samples {
        outputs.extend(viz::render(&model, s, &opts, &a.out)?);
    }
    println!("wrote {} files to {}", outputs.len(), a.out.display());
    let mut m = RunManifest::new("viz");
    m.config = json!({ "options": opts, "ids": a.ids });
    m.datasets.push(DatasetRef::of(&a.data)?);
    m.checkpoints.push(a.ckpt.clone());
    m.outputs = outputs;
    m.write(&a.out.join("manifest.json"))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "ablation".into());
    path.with_file_name(format!("{stem}{suffix}"))
}

fn cmd_ablate(a: Ablate) -> Result<()> {
    let base = load_config(a.config.as_deref())?;
    let train_set = load_data(&a.data)?;
    let eval_set = load_data(&a.eval_data)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let runs = sibling(&a.out, "-runs");
    let cos_path = sibling(&a.out, "-cosine.csv");
    let mut csv = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut cos = File::create(&cos_path).with_context(|| format!("creating {}", cos_path.display()))?;
    writeln!(csv, "sweep,cell,seed,miou")?;
    writeln!(cos, "sweep,cell,seed,epoch,cosine")?;
    let plan = SweepPlan {
        base: &base,
        cells: ablation::grid(a.sweep),
        seeds: (0..a.seeds).collect(),
        train: &train_set,
        eval: &eval_set,
        options: EvalOptions::default(),
        out: Some(&runs),
    };
    let rows = ablation::run(&plan, |r| {
        let write = |csv: &mut File, cos: &mut File| -> std::io::Result<()> {
            writeln!(csv, "{},{},{},{:e}", a.sweep, r.cell, r.seed, r.miou)?;
            csv.flush()?;
            for (e, c) in r.cosine.iter().enumerate() {
                writeln!(cos, "{},{},{},{},{:e}", a.sweep, r.cell, r.seed, e + 1, c)?;
            }
            cos.flush()
        };
        write(&mut csv, &mut cos).map_err(|e| dualcam::Error::io(&a.out, e))?;
        log::info!("{} = {} seed {}: mIoU {:.4}", a.sweep, r.cell, r.seed, r.miou);
        Ok(())
    })?;
    let medians: Vec<_> = ablation::grid(a.sweep)
        .iter()
        .map(|c| json!({ "cell": c.label(), "median_miou": ablation::median_miou(&rows, &c.label()) }))
        .collect();
    for m in &medians {
        println!("{} = {:<12} median mIoU {}", a.sweep, m["cell"].as_str().unwrap_or(""), m["median_miou"]);
    }
    let mut m = RunManifest::new("ablate");
    m.config = json!({ "sweep": a.sweep, "seeds": a.seeds, "base": base, "eval": EvalOptions::default() });
    m.datasets = vec![DatasetRef::of(&a.data)?, DatasetRef::of(&a.eval_data)?];
    m.checkpoints = rows.iter().filter_map(|r| r.checkpoint.clone()).collect();
    m.checkpoints.dedup();
    m.outputs = vec![a.out.clone(), cos_path];
    m.metrics = json!({ "rows": rows, "medians": medians });
    m.write(&sibling(&a.out, ".manifest.json"))
}
