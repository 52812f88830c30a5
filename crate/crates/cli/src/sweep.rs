//! Segment-count sweeps: one run per `(segments, seed)` cell, aggregated into
//! a CSV table and a gnuplot data file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use gcl_core::evalmetrics::mean_std;
use gcl_core::synthdata::SourceSpec;
use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::pipeline::{execute, run_seed, EvalDocument};

/// Name written to the `method` column for the headline score.
pub const METHOD_PROPOSED_WITH_ICA: &str = "proposed_with_ica";
pub const METHOD_PROPOSED: &str = "proposed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub segments: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    pub run_id: String,
    /// Headline score: after FastICA when enabled.
    pub mcc: f64,
    /// Raw-feature score.
    pub proposed_mcc: f64,
    pub control_mcc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub exit_code: i32,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: CellKey,
    pub outcome: Result<CellScore, CellFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub segments: usize,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub control_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub config_hash: String,
    pub method: String,
    pub strategy: String,
    /// Sorted by `(segments, seed)`.
    pub cells: Vec<CellResult>,
    pub plot: Vec<PlotRow>,
}

impl SweepSummary {
    pub fn failures(&self) -> impl Iterator<Item = (&CellKey, &CellFailure)> {
        self.cells.iter().filter_map(|c| c.outcome.as_ref().err().map(|f| (&c.key, f)))
    }

    pub fn successes(&self) -> impl Iterator<Item = (&CellKey, &CellScore)> {
        self.cells.iter().filter_map(|c| c.outcome.as_ref().ok().map(|s| (&c.key, s)))
    }
}

/// Copy of `cfg` with the segment count replaced and a single seed.
pub fn cell_config(cfg: &ExperimentConfig, key: CellKey) -> Result<ExperimentConfig, CliError> {
    let mut cell = cfg.clone();
    match &mut cell.generator.sources {
        SourceSpec::Segmented(p) => p.n_segments = key.segments,
        _ => {
            return Err(CliError::Config(
                "generator.sources must be segmented to sweep over segment counts".into(),
            ))
        }
    }
    cell.seeds = vec![key.seed];
    Ok(cell)
}

fn score(eval: &EvalDocument) -> CellScore {
    CellScore {
        run_id: eval.run_id.clone(),
        mcc: eval.proposed.headline(),
        proposed_mcc: eval.proposed.features.mcc,
        control_mcc: eval.control.as_ref().map(|c| c.headline()),
    }
}

/// Effective worker count: `GCL_DETERMINISTIC=1` forces one.
pub fn effective_jobs(requested: usize) -> usize {
    if std::env::var("GCL_DETERMINISTIC").is_ok_and(|v| v == "1") {
        1
    } else {
        requested.max(1)
    }
}

/// Runs every cell. With `out` set, each cell persists its run directory
/// under it; otherwise runs stay in memory. Failed cells are kept with their
/// error and the sweep continues.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    segments: &[usize],
    out: Option<&Path>,
    jobs: usize,
) -> Result<SweepSummary, CliError> {
    if segments.is_empty() {
        return Err(CliError::Config("sweep needs at least one segment count".into()));
    }
    let mut keys: Vec<CellKey> = segments
        .iter()
        .flat_map(|&s| cfg.seeds.iter().map(move |&seed| CellKey { segments: s, seed }))
        .collect();
    keys.sort();
    keys.dedup();
    // validate every cell up front, so config errors abort before any training
    let cells: Vec<(CellKey, ExperimentConfig)> = keys
        .iter()
        .map(|&k| {
            let c = cell_config(cfg, k)?;
            c.validate()?;
            Ok((k, c))
        })
        .collect::<Result<_, CliError>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(effective_jobs(jobs))
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let mut results: Vec<CellResult> = pool.install(|| {
        cells
            .par_iter()
            .map(|(key, cell)| {
                let outcome = match out {
                    Some(dir) => run_seed(cell, key.seed, dir).map(|o| score(&o.eval)),
                    None => execute(cell, key.seed).map(|(eval, _, _)| score(&eval)),
                };
                let outcome = outcome.map_err(|e| {
                    log::warn!("cell segments={} seed={} failed: {e}", key.segments, key.seed);
                    CellFailure {
                        exit_code: e.exit_code(),
                        message: e.to_string(),
                    }
                });
                CellResult { key: *key, outcome }
            })
            .collect()
    });
    results.sort_by_key(|r| r.key);
    let plot = plot_rows(&results);
    Ok(SweepSummary {
        config_hash: cfg.config_hash(),
        method: if cfg.eval.apply_fastica {
            METHOD_PROPOSED_WITH_ICA
        } else {
            METHOD_PROPOSED
        }
        .to_string(),
        strategy: cfg.strategy.name().to_string(),
        cells: results,
        plot,
    })
}

fn plot_rows(results: &[CellResult]) -> Vec<PlotRow> {
    let mut segs: Vec<usize> = results.iter().map(|r| r.key.segments).collect();
    segs.dedup();
    segs.into_iter()
        .map(|s| {
            let ok: Vec<&CellScore> = results
                .iter()
                .filter(|r| r.key.segments == s)
                .filter_map(|r| r.outcome.as_ref().ok())
                .collect();
            let (mean, std) = mean_std(Array1::from_iter(ok.iter().map(|c| c.mcc)).view());
            let controls: Vec<f64> = ok.iter().filter_map(|c| c.control_mcc).collect();
            let control_mean =
                (!controls.is_empty()).then(|| controls.iter().sum::<f64>() / controls.len() as f64);
            PlotRow {
                segments: s,
                mean,
                std,
                n: ok.len(),
                control_mean,
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// One row per successful cell.
pub fn sweep_csv(summary: &SweepSummary) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "strategy", "segments", "seed", "mcc", "proposed_mcc", "control_mcc", "run_id"])?;
    for (key, s) in summary.successes() {
        w.write_record([
            summary.method.clone(),
            summary.strategy.clone(),
            key.segments.to_string(),
            key.seed.to_string(),
            s.mcc.to_string(),
            s.proposed_mcc.to_string(),
            opt(s.control_mcc),
            s.run_id.clone(),
        ])?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| CliError::Data(e.to_string()))?)
        .map_err(|e| CliError::Data(e.to_string()))?;
    Ok(format!("# config_hash={}\n{body}", summary.config_hash))
}

pub fn failures_csv(summary: &SweepSummary) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["segments", "seed", "exit_code", "message"])?;
    for (key, f) in summary.failures() {
        w.write_record([
            key.segments.to_string(),
            key.seed.to_string(),
            f.exit_code.to_string(),
            f.message.clone(),
        ])?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| CliError::Data(e.to_string()))?)
        .map_err(|e| CliError::Data(e.to_string()))?;
    Ok(format!("# config_hash={}\n{body}", summary.config_hash))
}

/// Whitespace-separated columns for gnuplot's `with yerrorbars`.
pub fn plot_data(summary: &SweepSummary) -> String {
    let mut s = format!("# config_hash={}\n# segments mean std n control_mean\n", summary.config_hash);
    for r in &summary.plot {
        let control = r.control_mean.map_or("nan".to_string(), |c| c.to_string());
        let _ = writeln!(s, "{} {} {} {} {}", r.segments, r.mean, r.std, r.n, control);
    }
    s
}

/// Paths written by [`write_sweep`].
pub struct SweepFiles {
    pub csv: PathBuf,
    pub plot: PathBuf,
    pub failures: PathBuf,
}

pub fn write_sweep(summary: &SweepSummary, out: &Path) -> Result<SweepFiles, CliError> {
    std::fs::create_dir_all(out)?;
    let files = SweepFiles {
        csv: out.join("sweep.csv"),
        plot: out.join("sweep.plot.dat"),
        failures: out.join("sweep.failures.csv"),
    };
    std::fs::write(&files.csv, sweep_csv(summary)?)?;
    std::fs::write(&files.plot, plot_data(summary))?;
    std::fs::write(&files.failures, failures_csv(summary)?)?;
    Ok(files)
}
