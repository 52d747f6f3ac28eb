//! Sweeps over the loss weight, the loop count and the inference tiling.
//!
//! Every cell is trained once per seed on the training set and scored by
//! seed mIoU on a separate evaluation set. The tiler sweep trains one model
//! per seed and evaluates it under each tiling mode.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{self, EvalOptions, InferenceModel, TileMode};
use crate::train::{self, TrainConfig};

pub const LAMBDAS: [f64; 4] = [0.0, 0.01, 0.1, 0.2];
pub const LOOPS: [usize; 5] = [0, 1, 2, 3, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    Lambda,
    Loops,
    Tiler,
}

impl FromStr for SweepKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepKind::Lambda),
            "loops" => Ok(SweepKind::Loops),
            "tiler" => Ok(SweepKind::Tiler),
            _ => Err(Error::Validation(format!("unknown sweep `{s}` (expected lambda, loops or tiler)"))),
        }
    }
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepKind::Lambda => "lambda",
            SweepKind::Loops => "loops",
            SweepKind::Tiler => "tiler",
        })
    }
}

/// One column of a sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Cell {
    Lambda(f64),
    Loops(usize),
    Tiler(TileMode),
}

impl Cell {
    pub fn label(&self) -> String {
        match self {
            Cell::Lambda(l) => l.to_string(),
            Cell::Loops(n) => n.to_string(),
            Cell::Tiler(m) => m.name().to_string(),
        }
    }

    /// Training configuration of this cell for `seed`.
    pub fn config(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.seed = seed;
        match *self {
            Cell::Lambda(l) => cfg.lambda = l,
            Cell::Loops(n) => cfg.vit.loop_count = n,
            Cell::Tiler(_) => {}
        }
        cfg
    }
}

pub fn grid(kind: SweepKind) -> Vec<Cell> {
    match kind {
        SweepKind::Lambda => LAMBDAS.iter().map(|&l| Cell::Lambda(l)).collect(),
        SweepKind::Loops => LOOPS.iter().map(|&n| Cell::Loops(n)).collect(),
        SweepKind::Tiler => TileMode::ALL.iter().map(|&m| Cell::Tiler(m)).collect(),
    }
}

/// Result of one (cell, seed) pair.
#[derive(Clone, Debug, Serialize)]
pub struct Row {
    pub cell: String,
    pub seed: u64,
    pub miou: f64,
    /// Token cosine after each epoch.
    pub cosine: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
}

pub struct SweepPlan<'a> {
    pub base: &'a TrainConfig,
    pub cells: Vec<Cell>,
    pub seeds: Vec<u64>,
    pub train: &'a Dataset,
    pub eval: &'a Dataset,
    pub options: EvalOptions,
    /// Run directories go under `<out>/<cell>-seed<seed>`.
    pub out: Option<&'a Path>,
}

fn run_dir(out: Option<&Path>, tag: &str, seed: u64) -> Option<PathBuf> {
    out.map(|o| o.join(format!("{tag}-seed{seed}")))
}

/// Runs the plan, handing each row to `sink` as soon as it is scored.
pub fn run(plan: &SweepPlan, mut sink: impl FnMut(&Row) -> Result<()>) -> Result<Vec<Row>> {
    let mut rows = Vec::new();
    let tiler_only = plan.cells.iter().all(|c| matches!(c, Cell::Tiler(_)));
    let mut emit = |row: Row| -> Result<()> {
        sink(&row)?;
        rows.push(row);
        Ok(())
    };
    if tiler_only {
        for &seed in &plan.seeds {
            let cfg = plan.cells.first().map_or(plan.base.clone(), |c| c.config(plan.base, seed));
            let dir = run_dir(plan.out, "tiler", seed);
            let outcome = train::train(&cfg, plan.train, dir.as_deref(), None)?;
            let model = InferenceModel::from_checkpoint(&outcome.state.to_store(&cfg))?;
            let cosine: Vec<f64> = outcome.cosine.iter().map(|&(_, c)| c).collect();
            for cell in &plan.cells {
                let Cell::Tiler(mode) = *cell else { unreachable!() };
                let opts = EvalOptions { mode, ..plan.options };
                let report = eval::evaluate_seeds(&model, plan.eval, &opts)?;
                emit(Row {
                    cell: cell.label(),
                    seed,
                    miou: report.miou,
                    cosine: cosine.clone(),
                    checkpoint: dir.as_ref().map(|d| d.join("final.ckpt")),
                })?;
            }
        }
    } else {
        for cell in &plan.cells {
            if matches!(cell, Cell::Tiler(_)) {
                return Err(Error::Validation("tiler cells cannot be mixed with training cells".into()));
            }
            for &seed in &plan.seeds {
                let cfg = cell.config(plan.base, seed);
                let dir = run_dir(plan.out, &format!("{}-{}", kind_of(cell), cell.label()), seed);
                let outcome = train::train(&cfg, plan.train, dir.as_deref(), None)?;
                let model = InferenceModel::from_checkpoint(&outcome.state.to_store(&cfg))?;
                let report = eval::evaluate_seeds(&model, plan.eval, &plan.options)?;
                emit(Row {
                    cell: cell.label(),
                    seed,
                    miou: report.miou,
                    cosine: outcome.cosine.iter().map(|&(_, c)| c).collect(),
                    checkpoint: dir.map(|d| d.join("final.ckpt")),
                })?;
            }
        }
    }
    Ok(rows)
}

fn kind_of(cell: &Cell) -> SweepKind {
    match cell {
        Cell::Lambda(_) => SweepKind::Lambda,
        Cell::Loops(_) => SweepKind::Loops,
        Cell::Tiler(_) => SweepKind::Tiler,
    }
}

/// Median of `miou` over the rows of `cell`.
pub fn median_miou(rows: &[Row], cell: &str) -> Option<f64> {
    let mut v: Vec<f64> = rows.iter().filter(|r| r.cell == cell).map(|r| r.miou).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}
