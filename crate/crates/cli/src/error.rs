use slu_core::corpus::CorpusError;
use slu_core::data::DataError;
use slu_core::evaluation::EvalError;
use slu_core::features::FeatureError;
use slu_core::inference::InferenceError;
use slu_core::model::ModelError;
use slu_core::numeric::TensorError;
use slu_core::trainer::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn model_error(e: ModelError) -> CliError {
    match e {
        ModelError::NonFinite(_) | ModelError::Tensor(TensorError::NonFinite { .. }) => CliError::Numeric(e.to_string()),
        ModelError::Config(_) => CliError::Usage(e.to_string()),
        _ => CliError::Data(e.to_string()),
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        model_error(e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient => CliError::Numeric(e.to_string()),
            TrainError::Config(_) | TrainError::ZeroWeights => CliError::Usage(e.to_string()),
            TrainError::Model(m) => model_error(m),
            TrainError::Task { source, task, id } => match model_error(source) {
                CliError::Numeric(m) => CliError::Numeric(format!("task {task}, example {id}: {m}")),
                other => CliError::Data(format!("task {task}, example {id}: {other}")),
            },
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::Model(m) => model_error(m),
            InferenceError::BeamSize => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

macro_rules! data_errors {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        })*
    };
}

data_errors!(CorpusError, DataError, EvalError, FeatureError, serde_json::Error, slu_core::bpe::BpeError, csv::Error);
