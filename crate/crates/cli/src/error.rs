use gcl_core::contrastive::ContrastiveError;
use gcl_core::evalmetrics::EvalError;
use gcl_core::linear_ica::IcaError;
use gcl_core::model::ModelError;
use gcl_core::synthdata::SynthError;
use gcl_core::theorycheck::TheoryError;
use gcl_core::trainer::TrainError;
use thiserror::Error;

/// Errors of the harness, each tagged with the stage that raised it.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("evaluation degenerate: {0}")]
    EvalDegenerate(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::EvalDegenerate(_) => 5,
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidInput(m) => CliError::Config(format!("generator: {m}")),
            other => CliError::Data(format!("synth: {other}")),
        }
    }
}

impl From<ContrastiveError> for CliError {
    fn from(e: ContrastiveError) -> Self {
        CliError::Config(format!("strategy: {e}"))
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidInput(m) => CliError::Config(format!("model: {m}")),
            other => CliError::Data(format!("model: {other}")),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => CliError::Divergence(e.to_string()),
            TrainError::InvalidConfig(m) => CliError::Config(format!("train: {m}")),
            TrainError::Model(m) => m.into(),
        }
    }
}

impl From<IcaError> for CliError {
    fn from(e: IcaError) -> Self {
        match e {
            IcaError::Degenerate(m) => CliError::EvalDegenerate(format!("fastica: {m}")),
            IcaError::InvalidInput(m) => CliError::Config(format!("fastica: {m}")),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::EvalDegenerate(format!("mcc: {e}"))
    }
}

impl From<TheoryError> for CliError {
    fn from(e: TheoryError) -> Self {
        match e {
            TheoryError::Evaluation { .. } => CliError::Data(format!("theory: {e}")),
            other => CliError::Config(format!("theory: {other}")),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(format!("json: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(format!("csv: {e}"))
    }
}
