//! Ablation grids: one cell per setting along an axis, one run per seed.
//!
//! Every run starts from its own seed, so results do not depend on the
//! order or parallelism of the grid.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Result};
use dspert_core::{Aggregation, HeadKind, RunConfig};
use log::info;
use serde::{Deserialize, Serialize};

use crate::args::{AblateArgs, Axis};
use crate::commands::{train_model, write_train_outputs, TrainMetrics};
use crate::output::{write_csv, write_json};
use crate::splits::{load_config, load_splits, Splits};

/// One grid cell: a name and the config it trains.
#[derive(Clone, Debug)]
pub struct Cell {
    pub name: String,
    pub config: RunConfig,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Depth => "depth",
            Axis::Aggregation => "aggregation",
            Axis::WeightSharing => "weight-sharing",
            Axis::Head => "head",
        }
    }
}

/// Cells along `axis`; `depths` defaults to `0..=num_layers`.
pub fn cells(base: &RunConfig, axis: Axis, depths: Option<&[usize]>) -> Result<Vec<Cell>> {
    let cell = |name: String, f: &dyn Fn(&mut RunConfig)| {
        let mut config = base.clone();
        f(&mut config);
        config.check().map_err(|e| anyhow!("cell `{name}`: {e}"))?;
        Ok::<_, anyhow::Error>(Cell { name, config })
    };
    let needs_dspert = |what: &str| {
        if base.model.head != HeadKind::Dspert {
            bail!("the {what} axis varies the span encoder and needs head = dspert");
        }
        Ok(())
    };
    match axis {
        Axis::Depth => {
            needs_dspert("depth")?;
            let default: Vec<usize> = (0..=base.model.num_layers).collect();
            depths
                .unwrap_or(&default)
                .iter()
                .map(|&d| cell(format!("depth-{d}"), &|c| c.model.span_depth = Some(d)))
                .collect()
        }
        Axis::Aggregation => {
            needs_dspert("aggregation")?;
            Aggregation::ALL
                .iter()
                .map(|&a| cell(a.name().to_string(), &|c| c.model.initial_aggregation = a))
                .collect()
        }
        Axis::WeightSharing => {
            needs_dspert("weight-sharing")?;
            [
                ("separate", false, false),
                ("shared", true, false),
                ("per-width", false, true),
            ]
            .iter()
            .map(|&(name, share, per_width)| {
                cell(name.to_string(), &|c| {
                    c.model.share_weights = share;
                    c.model.per_width_params = per_width;
                })
            })
            .collect()
        }
        Axis::Head => HeadKind::ALL
            .iter()
            .map(|&h| {
                cell(h.name().to_string(), &|c| {
                    c.model.head = h;
                    if h != HeadKind::Dspert {
                        c.model.span_depth = None;
                        c.model.share_weights = false;
                        c.model.per_width_params = false;
                    }
                    if h.is_biaffine() {
                        c.model.use_bilstm = Some(false);
                    }
                })
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub dev_f1: f64,
    pub test_f1: Option<f64>,
    pub dev_by_nestedness: BTreeMap<String, f64>,
    pub dev_by_length: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub name: String,
    pub runs: Vec<RunResult>,
    pub dev_f1: MeanStd,
    pub test_f1: Option<MeanStd>,
    /// Per-bucket dev F1 over the seeds where the bucket is populated.
    pub dev_by_nestedness: BTreeMap<String, MeanStd>,
    pub dev_by_length: BTreeMap<String, MeanStd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: String,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellSummary>,
}

impl AblationReport {
    pub fn cell(&self, name: &str) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.name == name)
    }
}

fn run_result(seed: u64, m: &TrainMetrics) -> RunResult {
    RunResult {
        seed,
        dev_f1: m.dev.micro.f1,
        test_f1: m.test.as_ref().map(|t| t.micro.f1),
        dev_by_nestedness: m
            .dev
            .by_nestedness
            .iter()
            .map(|(k, p)| (k.clone(), p.f1))
            .collect(),
        dev_by_length: m
            .dev
            .by_length
            .iter()
            .map(|(k, p)| (k.clone(), p.f1))
            .collect(),
    }
}

fn bucket_stats(
    runs: &[RunResult],
    get: impl Fn(&RunResult) -> &BTreeMap<String, f64>,
) -> BTreeMap<String, MeanStd> {
    let mut pooled: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in runs {
        for (k, &v) in get(r) {
            pooled.entry(k.clone()).or_default().push(v);
        }
    }
    pooled
        .into_iter()
        .filter_map(|(k, v)| MeanStd::of(&v).map(|m| (k, m)))
        .collect()
}

fn summarize(name: String, runs: Vec<RunResult>) -> CellSummary {
    let dev: Vec<f64> = runs.iter().map(|r| r.dev_f1).collect();
    let test: Vec<f64> = runs.iter().filter_map(|r| r.test_f1).collect();
    CellSummary {
        dev_f1: MeanStd::of(&dev).expect("at least one seed"),
        test_f1: MeanStd::of(&test),
        dev_by_nestedness: bucket_stats(&runs, |r| &r.dev_by_nestedness),
        dev_by_length: bucket_stats(&runs, |r| &r.dev_by_length),
        name,
        runs,
    }
}

/// Parallelism from `DSPERT_THREADS` (default 1).
pub fn thread_count() -> Result<usize> {
    match std::env::var("DSPERT_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => bail!("DSPERT_THREADS must be a positive integer, got `{v}`"),
        },
        Err(_) => Ok(1),
    }
}

/// Trains every `(cell, seed)` pair, writing each run to
/// `out/<cell>/seed-<seed>/`, and summarises the grid.
pub fn run_grid(
    axis: Axis,
    cells: &[Cell],
    seeds: &[u64],
    splits: &Splits,
    out: &Path,
    threads: usize,
) -> Result<AblationReport> {
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results: Mutex<Vec<Option<Result<RunResult>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let j = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(c, seed)) = jobs.get(j) else { break };
        let cell = &cells[c];
        let mut cfg = cell.config.clone();
        cfg.seed = seed;
        let dir: PathBuf = out.join(&cell.name).join(format!("seed-{seed}"));
        let r = train_model(&cfg, splits)
            .and_then(|t| write_train_outputs(&dir, &cfg, &t))
            .map(|m| run_result(seed, &m))
            .map_err(|e| e.context(format!("cell `{}`, seed {seed}", cell.name)));
        if let Ok(r) = &r {
            info!("{} seed {seed}: dev F1 {:.4}", cell.name, r.dev_f1);
        }
        results.lock().expect("no worker panicked")[j] = Some(r);
    };
    std::thread::scope(|s| {
        for _ in 0..threads.max(1).min(jobs.len()) {
            s.spawn(worker);
        }
    });
    let mut flat = results
        .into_inner()
        .expect("no worker panicked")
        .into_iter();
    let mut summaries = Vec::with_capacity(cells.len());
    for cell in cells {
        let runs = flat
            .by_ref()
            .take(seeds.len())
            .map(|r| r.expect("every job ran"))
            .collect::<Result<Vec<_>>>()?;
        summaries.push(summarize(cell.name.clone(), runs));
    }
    let report = AblationReport {
        axis: axis.name().to_string(),
        seeds: seeds.to_vec(),
        cells: summaries,
    };
    write_report(out, &report)?;
    Ok(report)
}

fn fmt_opt(m: Option<&MeanStd>, f: impl Fn(&MeanStd) -> f64) -> String {
    m.map(|m| f(m).to_string()).unwrap_or_default()
}

/// `ablation.json` plus a flat `ablation.csv`, one row per cell.
pub fn write_report(out: &Path, report: &AblationReport) -> Result<()> {
    write_json(&out.join("ablation.json"), report)?;
    let tags = ["nested", "covering", "both", "flat"];
    let mut header = vec![
        "cell",
        "seeds",
        "dev_f1_mean",
        "dev_f1_std",
        "test_f1_mean",
        "test_f1_std",
    ];
    let tag_cols: Vec<String> = tags.iter().map(|t| format!("dev_f1_{t}")).collect();
    header.extend(tag_cols.iter().map(String::as_str));
    let rows: Vec<Vec<String>> = report
        .cells
        .iter()
        .map(|c| {
            let mut row = vec![
                c.name.clone(),
                c.dev_f1.n.to_string(),
                c.dev_f1.mean.to_string(),
                c.dev_f1.std.to_string(),
                fmt_opt(c.test_f1.as_ref(), |m| m.mean),
                fmt_opt(c.test_f1.as_ref(), |m| m.std),
            ];
            row.extend(
                tags.iter()
                    .map(|t| fmt_opt(c.dev_by_nestedness.get(*t), |m| m.mean)),
            );
            row
        })
        .collect();
    write_csv(&out.join("ablation.csv"), &header, &rows)
}

pub fn run(a: AblateArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let seeds = a.seeds.clone().unwrap_or_else(|| cfg.seeds.clone());
    let grid = cells(&cfg, a.axis, a.depths.as_deref())?;
    let splits = load_splits(&cfg, a.data.as_deref(), a.format)?;
    let report = run_grid(a.axis, &grid, &seeds, &splits, &a.out, thread_count()?)?;
    let mut out = std::io::stdout().lock();
    for c in &report.cells {
        writeln!(
            out,
            "{:<18} dev F1 {:.4} ± {:.4} (n={})",
            c.name, c.dev_f1.mean, c.dev_f1.std, c.dev_f1.n
        )?;
    }
    Ok(())
}
