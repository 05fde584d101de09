use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::config::ExperimentConfig;
use super::run::{load_models, load_task, run_with, RunReport};
use super::table::{write_summary, SummaryRow};
use crate::error::{Error, Result};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const THREADS_VAR: &str = "PROMPTLAB_THREADS";

/// Sweepable fields; the declaration order is the grid's nesting order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GridParam {
    Lambda,
    Alpha,
    PromptLen,
    Seed,
}

impl std::str::FromStr for GridParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(Self::Lambda),
            "alpha" => Ok(Self::Alpha),
            "prompt_len" | "prompt-len" => Ok(Self::PromptLen),
            "seed" => Ok(Self::Seed),
            other => Err(Error::Config(format!("unknown grid key {other:?}"))),
        }
    }
}

pub type Grid = BTreeMap<GridParam, Vec<f64>>;

/// Parses `key=v1,v2,...` entries into a grid.
pub fn parse_grid<'a>(entries: impl IntoIterator<Item = &'a str>) -> Result<Grid> {
    let mut grid = Grid::new();
    for entry in entries {
        let (key, values) = entry
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid entry {entry:?} is not key=values")))?;
        let values = values
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("grid value {v:?} is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        grid.insert(key.trim().parse()?, values);
    }
    Ok(grid)
}

/// One grid point per element of the Cartesian product, later parameters
/// varying fastest.
pub fn grid_points(grid: &Grid) -> Result<Vec<Vec<(GridParam, f64)>>> {
    if grid.is_empty() || grid.values().any(Vec::is_empty) {
        return Err(Error::Config(
            "grid must name at least one value per key".into(),
        ));
    }
    let mut points = vec![Vec::new()];
    for (&param, values) in grid {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push((param, v));
                    q
                })
            })
            .collect();
    }
    Ok(points)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Tuning seed of a grid point: derived from the master seed and the grid's
/// `seed` value when it has one, else from the grid index.
pub fn run_seed(master: u64, index: usize, grid_seed: Option<u64>) -> u64 {
    splitmix64(master ^ splitmix64(grid_seed.unwrap_or(index as u64)))
}

fn non_negative_int(param: GridParam, v: f64) -> Result<u64> {
    if v < 0.0 || v.fract() != 0.0 || v > u64::MAX as f64 {
        return Err(Error::Config(format!(
            "{param:?} value {v} must be a non-negative integer"
        )));
    }
    Ok(v as u64)
}

/// Experiment config of grid point `index`, writing into `out/run_{index:03}`.
pub fn point_config(
    base: &ExperimentConfig,
    out: &Path,
    master_seed: u64,
    index: usize,
    point: &[(GridParam, f64)],
) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    let mut grid_seed = None;
    for &(param, v) in point {
        match param {
            GridParam::Lambda => cfg.tune.lambda = v,
            GridParam::Alpha => cfg.tune.alpha = v,
            GridParam::PromptLen => cfg.tune.prompt_len = non_negative_int(param, v)? as usize,
            GridParam::Seed => grid_seed = Some(non_negative_int(param, v)?),
        }
    }
    cfg.tune.seed = run_seed(master_seed, index, grid_seed);
    cfg.output_dir = out.join(format!("run_{index:03}"));
    cfg.tune.validate()?;
    Ok(cfg)
}

/// Worker count from `PROMPTLAB_THREADS`, 1 when unset.
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(1),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!(
                "{THREADS_VAR}={s:?} is not a positive integer"
            ))),
        },
    }
}

pub fn summary_row(report: &RunReport) -> SummaryRow {
    let tune = &report.config.tune;
    SummaryRow {
        method: tune.method.name().to_string(),
        lambda: tune.lambda,
        alpha: tune.alpha,
        prompt_len: tune.prompt_len,
        seed: tune.seed,
        accuracy: report.accuracy,
        task_loss: report.task_loss,
        judge_perplexity: report.scrutability.judge_perplexity,
        delta_distance: report.faithfulness.delta_distance,
        delta_output: report.faithfulness.delta_output,
        delta_performance: report.faithfulness.delta_performance,
        steps: tune.steps,
        wall_clock_s: report.wall_clock_s,
    }
}

pub struct SweepOutcome {
    pub reports: Vec<RunReport>,
    pub summary: PathBuf,
}

/// Runs every grid point on up to `threads` workers and writes the summary
/// CSV in grid order once all runs are done.
pub fn sweep(
    base: &ExperimentConfig,
    grid: &Grid,
    master_seed: u64,
    threads: usize,
) -> Result<SweepOutcome> {
    base.validate()?;
    let points = grid_points(grid)?;
    let out = &base.output_dir;
    let configs = points
        .iter()
        .enumerate()
        .map(|(i, p)| point_config(base, out, master_seed, i, p))
        .collect::<Result<Vec<_>>>()?;
    let (model, judge) = load_models(&base.model, &base.judge)?;
    let splits = load_task(&base.task, model.vocab_size())?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunReport>>>> =
        Mutex::new((0..configs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, configs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cfg) = configs.get(i) else { break };
                let r = run_with(cfg, &model, &judge, &splits);
                results.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    let reports = results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every index claimed"))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<SummaryRow> = reports.iter().map(summary_row).collect();
    let summary = out.join(SUMMARY_FILE);
    write_summary(&summary, &rows)?;
    Ok(SweepOutcome { reports, summary })
}
