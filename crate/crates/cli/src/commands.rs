//! Subcommand bodies. Each returns the text it would print, so the binary
//! stays a thin argument parser and the commands are testable in-process.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::pipeline::{evaluate_checkpoint, grad_check_run, run_seed, synth_to, RunOutcome};
use crate::sweep::{run_sweep, write_sweep, SweepSummary};
use crate::theory::{load_doc, run_check};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Format {
    #[default]
    Json,
    Csv,
}

/// Settings shared by most subcommands.
#[derive(Debug, Clone, Default)]
pub struct Common {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub format: Format,
}

impl Common {
    pub fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.out.clone().unwrap_or_else(|| cfg.output_dir.clone())
    }
}

fn json<T: Serialize>(v: &T) -> Result<String, CliError> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

/// Writes one dataset per seed; `--out` is the file for a single seed and a
/// directory otherwise.
pub fn cmd_synth(c: &Common) -> Result<String, CliError> {
    let cfg = c.load()?;
    let mut written = Vec::new();
    for &seed in &cfg.seeds {
        let path = match (&c.out, cfg.seeds.len()) {
            (Some(p), 1) => p.clone(),
            (Some(p), _) => p.join(format!("data-seed{seed}.gcldata")),
            (None, _) => cfg.output_dir.join(format!("data-seed{seed}.gcldata")),
        };
        synth_to(&cfg, seed, &path)?;
        written.push(path);
    }
    json(&written)
}

#[derive(Debug, Clone, Serialize)]
struct RunRow {
    seed: u64,
    run_id: String,
    proposed_mcc: f64,
    mcc: f64,
    control_mcc: Option<f64>,
    final_accuracy: f64,
}

fn run_rows(outcomes: &[RunOutcome]) -> Vec<RunRow> {
    outcomes
        .iter()
        .map(|o| RunRow {
            seed: o.eval.seed,
            run_id: o.eval.run_id.clone(),
            proposed_mcc: o.eval.proposed.features.mcc,
            mcc: o.eval.proposed.headline(),
            control_mcc: o.eval.control.as_ref().map(|c| c.headline()),
            final_accuracy: o.eval.train.final_accuracy,
        })
        .collect()
}

fn runs_csv(hash: &str, rows: &[RunRow]) -> Result<String, CliError> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| CliError::Data(e.to_string()))?)
        .map_err(|e| CliError::Data(e.to_string()))?;
    Ok(format!("# config_hash={hash}\n{body}"))
}

/// Runs every seed of the config in order and writes `runs.csv` next to the
/// run directories.
pub fn cmd_run(c: &Common) -> Result<(Vec<RunOutcome>, String), CliError> {
    let cfg = c.load()?;
    let out = c.out_dir(&cfg);
    let outcomes = cfg
        .seeds
        .iter()
        .map(|&seed| run_seed(&cfg, seed, &out))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = run_rows(&outcomes);
    let csv = runs_csv(&cfg.config_hash(), &rows)?;
    std::fs::write(out.join(format!("runs-{}.csv", cfg.config_hash())), &csv)?;
    let text = match c.format {
        Format::Csv => csv,
        Format::Json => json(&outcomes.iter().map(|o| &o.record).collect::<Vec<_>>())?,
    };
    Ok((outcomes, text))
}

pub fn cmd_sweep(c: &Common, segments: &[usize], jobs: usize) -> Result<(SweepSummary, String), CliError> {
    let cfg = c.load()?;
    let out = c.out_dir(&cfg);
    let summary = run_sweep(&cfg, segments, Some(&out), jobs)?;
    let files = write_sweep(&summary, &out)?;
    let text = match c.format {
        Format::Csv => std::fs::read_to_string(&files.csv)?,
        Format::Json => json(&summary)?,
    };
    Ok((summary, text))
}

pub fn cmd_theory(spec: &Path) -> Result<String, CliError> {
    let doc = load_doc(spec)?;
    json(&run_check(&doc)?)
}

pub fn cmd_grad_check(c: &Common, points: usize, eps: f64) -> Result<String, CliError> {
    let cfg = c.load()?;
    let seed = cfg.seeds[0];
    json(&grad_check_run(&cfg, seed, 256, points, eps)?)
}

pub fn cmd_eval(c: &Common, checkpoint: &Path) -> Result<String, CliError> {
    let cfg = c.load()?;
    json(&evaluate_checkpoint(&cfg, cfg.seeds[0], checkpoint)?)
}
