//! End-to-end runs: generate, pair, train, extract features, unmix, score.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use gcl_core::contrastive::{build_pairs, ContrastiveSet};
use gcl_core::evalmetrics::{mcc, EvalReport, MccVariant};
use gcl_core::linear_ica::{fastica, FastIcaConfig};
use gcl_core::model::{save_checkpoint, Architecture, ExpFamHead, FeatureNet, GeneralHead, HeadKind, Model};
use gcl_core::numerics::{Matrix, SeededRng};
use gcl_core::synthdata::{save_dataset, SourceDataset};
use gcl_core::trainer::{grad_check, train, GradCheckReport, TrainConfig, TrainTrace};
use ndarray::{ArrayView2, Axis};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, HeadChoice};
use crate::error::CliError;

/// Child streams of a run, all derived from its seed.
struct RunStreams {
    pairs: SeededRng,
    init: SeededRng,
    train_seed: u64,
    fastica_seed: u64,
}

impl RunStreams {
    fn new(seed: u64) -> Self {
        let root = SeededRng::with_stream(seed, 1);
        Self {
            pairs: root.split(0),
            init: root.split(1),
            train_seed: root.split(2).next_u64(),
            fastica_seed: root.split(3).next_u64(),
        }
    }
}

/// Centers and scales each column to unit variance.
pub fn standardize(x: ArrayView2<f64>) -> Result<Matrix, CliError> {
    let mean = x.mean_axis(Axis(0)).ok_or_else(|| CliError::Data("empty observations".into()))?;
    let mut out = &x - &mean;
    for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
        let sd = (col.dot(&col) / col.len() as f64).sqrt();
        if !(sd > 0.0) {
            return Err(CliError::Data(format!("observed channel {j} is constant")));
        }
        col /= sd;
    }
    Ok(out)
}

/// Centers every continuous auxiliary column and scales it to standard
/// deviation `scale`. Positives and negatives share one transform, so the
/// negatives remain a permutation of the positives.
pub fn scale_aux(cs: &mut ContrastiveSet, scale: f64) -> Result<(), CliError> {
    let mean = cs
        .u
        .mean_axis(Axis(0))
        .ok_or_else(|| CliError::Data("empty contrastive set".into()))?;
    cs.u -= &mean;
    for (j, mut col) in cs.u.axis_iter_mut(Axis(1)).enumerate() {
        let sd = (col.dot(&col) / col.len() as f64).sqrt();
        if !(sd > 0.0) {
            return Err(CliError::Data(format!("auxiliary column {j} is constant")));
        }
        col *= scale / sd;
    }
    Ok(())
}

/// Architecture implied by the config for a given contrastive set.
pub fn architecture(cfg: &ExperimentConfig, cs: &ContrastiveSet) -> Result<Architecture, CliError> {
    let n = cfg.n();
    let features = FeatureNet {
        input_dim: cs.input_dim(),
        n_features: n,
        hidden_layers: cfg.model.hidden_layers,
        hidden_units: cfg.model.hidden_units.unwrap_or(2 * n),
        maxout_group: 2,
        output: cfg.model.output,
    };
    let head = match cfg.model.head {
        HeadChoice::General { width } => HeadKind::General(GeneralHead {
            aux_dim: cs.aux_dim(),
            width,
        }),
        HeadChoice::ExpFam { k, a_width } => {
            let n_classes = cs
                .n_classes
                .ok_or_else(|| CliError::Config("model.head exp_fam needs discrete aux classes".into()))?;
            HeadKind::ExpFam(ExpFamHead { k, n_classes, a_width })
        }
    };
    Ok(Architecture { features, head })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub warnings: Vec<String>,
}

impl From<&TrainTrace> for TrainSummary {
    fn from(t: &TrainTrace) -> Self {
        Self {
            epochs: t.epochs.len(),
            initial_loss: t.initial_loss,
            final_loss: t.final_loss,
            initial_accuracy: t.initial_accuracy,
            final_accuracy: t.final_accuracy,
            warnings: t.warnings.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FastIcaSummary {
    pub converged: bool,
    pub iters: usize,
}

/// Scores of one way of turning features into source estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScores {
    /// MCC of the raw features.
    pub features: EvalReport,
    /// MCC after FastICA, when enabled.
    pub with_ica: Option<EvalReport>,
    pub fastica: Option<FastIcaSummary>,
}

impl FeatureScores {
    /// The headline number: post-ICA when available, raw otherwise.
    pub fn headline(&self) -> f64 {
        self.with_ica.as_ref().unwrap_or(&self.features).mcc
    }
}

/// Contents of `eval.json`. Contains no timing, so equal config and seed
/// give byte-identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDocument {
    pub config_hash: String,
    pub run_id: String,
    pub seed: u64,
    pub proposed: FeatureScores,
    pub control: Option<FeatureScores>,
    pub train: TrainSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub trace_path: PathBuf,
    pub eval_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub struct RunOutcome {
    pub record: RunRecord,
    pub eval: EvalDocument,
    pub trace: TrainTrace,
}

/// Maps each column into the nonnegative orthant: sign chosen for positive
/// skewness, then shifted to a zero minimum. Unmixed features estimate
/// nonnegative statistics only up to sign and offset.
pub fn orient_nonnegative(components: &mut Matrix) {
    for mut col in components.axis_iter_mut(Axis(1)) {
        let mean = col.mean().unwrap_or(0.0);
        let skew: f64 = col.iter().map(|v| (v - mean).powi(3)).sum();
        if skew < 0.0 {
            col.mapv_inplace(|v| -v);
        }
        let min = col.iter().copied().fold(f64::INFINITY, f64::min);
        col.mapv_inplace(|v| v - min);
    }
}

/// Scores features against the true sources, optionally after FastICA.
pub fn score_features(
    features: ArrayView2<f64>,
    truth: ArrayView2<f64>,
    cfg: &ExperimentConfig,
    fastica_seed: u64,
) -> Result<FeatureScores, CliError> {
    let raw = mcc(features, truth, cfg.eval.variant)?;
    if !cfg.eval.apply_fastica {
        return Ok(FeatureScores {
            features: raw,
            with_ica: None,
            fastica: None,
        });
    }
    let ica_cfg = FastIcaConfig {
        seed: fastica_seed,
        ..cfg.eval.fastica.clone()
    };
    let mut unmixed = fastica(features, &ica_cfg)?;
    if cfg.eval.variant == MccVariant::AbsoluteValue {
        orient_nonnegative(&mut unmixed.components);
    }
    let with_ica = mcc(unmixed.components.view(), truth, cfg.eval.variant)?;
    Ok(FeatureScores {
        features: raw,
        with_ica: Some(with_ica),
        fastica: Some(FastIcaSummary {
            converged: unmixed.converged,
            iters: unmixed.iters,
        }),
    })
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Generated data of a run, with observations standardized if configured.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<SourceDataset, CliError> {
    let mut ds = cfg.generator_spec(seed).generate()?;
    if !ds.has_observations() {
        ds.observations = ds.sources.clone();
    }
    if cfg.generator.standardize {
        ds.observations = standardize(ds.observations.view())?;
    }
    Ok(ds)
}

struct Prepared {
    ds: SourceDataset,
    cs: ContrastiveSet,
    model: Model,
    streams: RunStreams,
}

fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared, CliError> {
    cfg.validate()?;
    let mut streams = RunStreams::new(seed);
    let ds = prepare_data(cfg, seed)?;
    let mut cs = build_pairs(&ds, &cfg.strategy, &mut streams.pairs)?;
    if cs.n_classes.is_none() {
        scale_aux(&mut cs, cfg.model.aux_scale)?;
    }
    let arch = architecture(cfg, &cs)?;
    let model = Model::new(arch, &mut streams.init)?;
    Ok(Prepared { ds, cs, model, streams })
}

/// Runs one seed in memory, without touching the filesystem.
pub fn execute(cfg: &ExperimentConfig, seed: u64) -> Result<(EvalDocument, Model, TrainTrace), CliError> {
    let Prepared {
        ds,
        cs,
        mut model,
        streams,
    } = prepare(cfg, seed)?;
    let control = if cfg.eval.control {
        let h0 = model.features(ds.observations.view())?;
        Some(score_features(h0.view(), ds.sources.view(), cfg, streams.fastica_seed)?)
    } else {
        None
    };
    let train_cfg = TrainConfig {
        seed: streams.train_seed,
        ..cfg.train.clone()
    };
    let trace = train(&mut model, &cs, &train_cfg)?;
    let h = model.features(ds.observations.view())?;
    let proposed = score_features(h.view(), ds.sources.view(), cfg, streams.fastica_seed)?;
    let eval = EvalDocument {
        config_hash: cfg.config_hash(),
        run_id: cfg.run_id(seed),
        seed,
        proposed,
        control,
        train: TrainSummary::from(&trace),
    };
    Ok((eval, model, trace))
}

pub fn eval_json(eval: &EvalDocument) -> Result<String, CliError> {
    Ok(serde_json::to_string_pretty(eval)? + "\n")
}

/// Runs one seed and writes `eval.json`, `trace.csv`, `model.gclmodel` and
/// `record.json` under `<out>/<run_id>/`.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<RunOutcome, CliError> {
    let started = now_unix();
    let run_id = cfg.run_id(seed);
    let config_hash = cfg.config_hash();
    log::info!("run {run_id} (seed {seed}) starting");
    let (eval, model, trace) = execute(cfg, seed)?;
    let dir = out.join(&run_id);
    std::fs::create_dir_all(&dir)?;
    let eval_path = dir.join("eval.json");
    std::fs::write(&eval_path, eval_json(&eval)?)?;
    let trace_path = dir.join("trace.csv");
    std::fs::write(
        &trace_path,
        format!("# config_hash={config_hash} run_id={run_id}\n{}", trace.to_csv()),
    )?;
    let checkpoint_path = dir.join("model.gclmodel");
    let meta = serde_json::json!({
        "config_hash": config_hash,
        "run_id": run_id,
        "seed": seed,
        "train": cfg.train,
    });
    save_checkpoint(&model, &meta, &checkpoint_path)?;
    let record = RunRecord {
        run_id,
        config_hash,
        seed,
        config: cfg.clone(),
        trace_path,
        eval_path,
        checkpoint_path,
        started_unix: started,
        finished_unix: now_unix(),
    };
    std::fs::write(dir.join("record.json"), serde_json::to_string_pretty(&record)? + "\n")?;
    log::info!(
        "run {} done: mcc {:.4} (control {})",
        record.run_id,
        eval.proposed.headline(),
        eval.control
            .as_ref()
            .map_or("n/a".to_string(), |c| format!("{:.4}", c.headline()))
    );
    Ok(RunOutcome { record, eval, trace })
}

/// Gradient check of the freshly initialized model of `(cfg, seed)` on a
/// batch of up to `batch_rows` rows drawn equally from positives and negatives.
pub fn grad_check_run(
    cfg: &ExperimentConfig,
    seed: u64,
    batch_rows: usize,
    n_points: usize,
    eps: f64,
) -> Result<GradCheckReport, CliError> {
    let p = prepare(cfg, seed)?;
    let half = p.cs.half_len();
    let per_side = (batch_rows / 2).clamp(1, half);
    let rows: Vec<usize> = (0..per_side).chain(half..half + per_side).collect();
    let batch = p.cs.batch(&rows);
    let mut rng = SeededRng::with_stream(seed, 2);
    Ok(grad_check(&p.model, &batch, cfg.train.l2, n_points, eps, &mut rng)?)
}

/// Generates the dataset of `(cfg, seed)` as configured, without
/// standardization, and writes it with its JSON sidecar.
pub fn synth_to(cfg: &ExperimentConfig, seed: u64, path: &Path) -> Result<SourceDataset, CliError> {
    cfg.validate()?;
    let ds = cfg.generator_spec(seed).generate()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_dataset(&ds, path)?;
    Ok(ds)
}

/// Re-scores a saved model against the regenerated data of `seed`.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, seed: u64, checkpoint: &Path) -> Result<FeatureScores, CliError> {
    let (model, _) = gcl_core::model::load_checkpoint(checkpoint)?;
    let ds = prepare_data(cfg, seed)?;
    let h = model.features(ds.observations.view())?;
    score_features(h.view(), ds.sources.view(), cfg, RunStreams::new(seed).fastica_seed)
}
