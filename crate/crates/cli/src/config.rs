//! Experiment configuration, a JSON document that fully determines a run.

use std::path::{Path, PathBuf};

use gcl_core::contrastive::AuxStrategy;
use gcl_core::evalmetrics::MccVariant;
use gcl_core::linear_ica::FastIcaConfig;
use gcl_core::model::OutputActivation;
use gcl_core::synthdata::{GeneratorSpec, MixingParams, SourceSpec};
use gcl_core::trainer::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    pub sources: SourceSpec,
    #[serde(default)]
    pub mixing: Option<MixingParams>,
    /// Center and scale every observed channel to unit variance before training.
    #[serde(default = "yes")]
    pub standardize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HeadChoice {
    General {
        #[serde(default = "default_psi_width")]
        width: usize,
    },
    ExpFam {
        #[serde(default = "default_k")]
        k: usize,
        #[serde(default = "default_a_width")]
        a_width: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_hidden_layers")]
    pub hidden_layers: usize,
    /// Defaults to `2n`.
    #[serde(default)]
    pub hidden_units: Option<usize>,
    #[serde(default = "default_output")]
    pub output: OutputActivation,
    pub head: HeadChoice,
    /// Continuous auxiliary inputs are standardized and multiplied by this
    /// factor before reaching the head. Discrete labels are left alone.
    #[serde(default = "default_aux_scale")]
    pub aux_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub variant: MccVariant,
    pub apply_fastica: bool,
    /// Also score the untrained network, through the same evaluation path.
    pub control: bool,
    pub fastica: FastIcaConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            variant: MccVariant::Raw,
            apply_fastica: true,
            control: true,
            fastica: FastIcaConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub generator: GeneratorSection,
    pub strategy: AuxStrategy,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn yes() -> bool {
    true
}
fn default_psi_width() -> usize {
    32
}
fn default_k() -> usize {
    1
}
fn default_a_width() -> usize {
    16
}
fn default_hidden_layers() -> usize {
    2
}
fn default_output() -> OutputActivation {
    OutputActivation::Abs
}
fn default_aux_scale() -> f64 {
    3.0
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Parses JSON, reporting the path of the offending key on failure.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("at `{path}`: {}", e.inner()))
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_json(&text)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn n(&self) -> usize {
        self.generator.sources.n()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let n = self.n();
        if n < 2 {
            return bad(format!("generator.sources.n must be at least 2, got {n}"));
        }
        match &self.generator.sources {
            SourceSpec::Grid(p) if p.grid_side < 2 => return bad("generator.sources.grid_side must be at least 2".into()),
            SourceSpec::Segmented(p) if p.n_segments == 0 || p.n_segments > p.t => {
                return bad(format!(
                    "generator.sources.n_segments must lie in 1..={}, got {}",
                    p.t, p.n_segments
                ))
            }
            SourceSpec::Autoregressive(p) if p.t < 2 => return bad("generator.sources.t must be at least 2".into()),
            _ => {}
        }
        if let Some(m) = &self.generator.mixing {
            if m.layers == 0 {
                return bad("generator.mixing.layers must be at least 1".into());
            }
            if !(m.condition_bound >= 1.0) {
                return bad("generator.mixing.condition_bound must be at least 1".into());
            }
        }
        self.strategy
            .validate()
            .map_err(|e| CliError::Config(format!("strategy: {e}")))?;
        if let HeadChoice::ExpFam { k, a_width } = self.model.head {
            if k == 0 || a_width == 0 {
                return bad("model.head.k and model.head.a_width must be positive".into());
            }
            if !matches!(
                self.strategy,
                AuxStrategy::SegmentLabel { .. } | AuxStrategy::ClassLabel { .. }
            ) {
                return bad("model.head exp_fam needs a discrete strategy (segment_label or class_label)".into());
            }
        }
        if let HeadChoice::General { width: 0 } = self.model.head {
            return bad("model.head.width must be positive".into());
        }
        if !(self.model.aux_scale > 0.0 && self.model.aux_scale.is_finite()) {
            return bad(format!("model.aux_scale must be positive, got {}", self.model.aux_scale));
        }
        if self.model.hidden_units == Some(0) {
            return bad("model.hidden_units must be positive".into());
        }
        self.train
            .validate()
            .map_err(|e| CliError::Config(format!("train: {e}")))?;
        if self.seeds.is_empty() {
            return bad("seeds must list at least one seed".into());
        }
        Ok(())
    }

    /// Generator specification of the run with the given seed.
    pub fn generator_spec(&self, seed: u64) -> GeneratorSpec {
        GeneratorSpec {
            sources: self.generator.sources.clone(),
            mixing: self.generator.mixing.clone(),
            seed,
            stream: 0,
        }
    }

    /// SHA-256 of the canonical JSON form, excluding `output_dir`.
    pub fn config_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("output_dir");
        }
        let digest = Sha256::digest(value.to_string().as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    /// Stable identifier of the run `(config, seed)`.
    pub fn run_id(&self, seed: u64) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("output_dir");
            obj.insert("seeds".into(), serde_json::json!([seed]));
        }
        let digest = Sha256::digest(format!("{value}#seed={seed}").as_bytes());
        hex::encode(digest)[..16].to_string()
    }
}
