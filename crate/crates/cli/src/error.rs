use std::path::Path;

use poseflow::data::DataError;
use poseflow::eval::EvalError;
use poseflow::flow::FlowError;
use poseflow::nncore::NnError;
use poseflow::training::TrainError;
use thiserror::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Missing or unreadable file (exit 3).
    #[error("{0}")]
    Io(String),
    /// Malformed config, spec, dataset or checkpoint (exit 4).
    #[error("{0}")]
    Schema(String),
    /// Pose width does not match the model or dataset (exit 5).
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// Non-finite loss or gradient during training (exit 6).
    #[error("{0}")]
    Diverged(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Io(_) => 3,
            CliError::Schema(_) => 4,
            CliError::Dimension(_) => 5,
            CliError::Diverged(_) => 6,
            CliError::Other(_) => 1,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn csv(path: &Path, e: csv::Error) -> Self {
        match e.kind() {
            csv::ErrorKind::Io(_) => CliError::Io(format!("{}: {e}", path.display())),
            _ => CliError::Schema(format!("{}: {e}", path.display())),
        }
    }

    pub fn data(path: &Path, e: DataError) -> Self {
        let msg = format!("{}: {e}", path.display());
        match e {
            DataError::Io(_) => CliError::Io(msg),
            DataError::Csv(ref c) if matches!(c.kind(), csv::ErrorKind::Io(_)) => CliError::Io(msg),
            DataError::RecordLength { .. } | DataError::Hyperparameters(_) => CliError::Dimension(msg),
            DataError::Flow(f) => CliError::flow(f),
            _ => CliError::Schema(msg),
        }
    }

    pub fn flow(e: FlowError) -> Self {
        match e {
            FlowError::Dimension { .. } => CliError::Dimension(e.to_string()),
            FlowError::Diverged | FlowError::Nn(NnError::Diverged) => CliError::Diverged(e.to_string()),
            FlowError::Config(_) => CliError::Schema(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }

    pub fn train(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Schema(e.to_string()),
            TrainError::Dimension { .. } => CliError::Dimension(e.to_string()),
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            TrainError::Flow(f) => CliError::flow(f),
            TrainError::Data(d) => CliError::data(Path::new("<training>"), d),
            TrainError::EmptyDataset => CliError::Schema(e.to_string()),
        }
    }

    pub fn eval(e: EvalError) -> Self {
        match e {
            EvalError::Flow(f) => CliError::flow(f),
            EvalError::Data(d) => CliError::data(Path::new("<eval>"), d),
            EvalError::Train(t) => CliError::train(t),
            EvalError::Io(io) => CliError::Io(io.to_string()),
            EvalError::SampleSize { .. } | EvalError::JointIndex { .. } => CliError::Schema(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}
