use std::fmt;
use std::path::Path;

use stner_core::data::DataError;
use stner_core::decode::DecodeError;
use stner_core::eval::EvalError;
use stner_core::experiment::ExperimentError;
use stner_core::model::ModelError;
use stner_core::simul::SimulError;
use stner_core::train::TrainError;

/// Error with a process exit code: 1 usage, 2 data or config, 3 runtime.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            kind: "usage",
            message: message.into(),
        }
    }

    pub fn config(kind: &'static str, message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            kind,
            message: message.into(),
        }
    }

    pub fn runtime(kind: &'static str, message: impl Into<String>) -> Self {
        CliError {
            code: 3,
            kind,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::config("io", format!("{}: {e}", path.display()))
    }

    /// Single line for standard error.
    pub fn machine_line(&self) -> String {
        format!("stner-error code={} kind={} message={:?}", self.code, self.kind, self.message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let msg = e.to_string();
        match e {
            DataError::CorruptFile { .. } => CliError::runtime("corrupt_file", msg),
            DataError::InvalidSpec(_) => CliError::config("invalid_spec", msg),
            DataError::Io { .. } => CliError::config("io", msg),
            DataError::Annotation { .. } => CliError::config("annotation", msg),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let msg = e.to_string();
        match e {
            ModelError::InvalidConfig(_) => CliError::config("invalid_model", msg),
            ModelError::UnknownToken(_) => CliError::config("unknown_token", msg),
            ModelError::Checkpoint(_) => CliError::runtime("corrupt_checkpoint", msg),
            _ => CliError::runtime("model", msg),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let msg = e.to_string();
        match e {
            TrainError::DivergedLoss { .. } => CliError::runtime("diverged", msg),
            TrainError::InvalidConfig(_) => CliError::config("invalid_train", msg),
            TrainError::EmptySplit(_) => CliError::config("empty_split", msg),
            TrainError::Model(m) => m.into(),
        }
    }
}

impl From<DecodeError> for CliError {
    fn from(e: DecodeError) -> Self {
        match e {
            DecodeError::Model(m) => m.into(),
            e => CliError::config("decode", e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::config("eval", e.to_string())
    }
}

impl From<SimulError> for CliError {
    fn from(e: SimulError) -> Self {
        match e {
            SimulError::InvalidPolicy(m) => CliError::config("invalid_policy", m),
            SimulError::Model(m) => m.into(),
            e => CliError::runtime("simul", e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Invalid(m) => CliError::config("invalid_experiment", m),
            ExperimentError::Model(m) => m.into(),
            ExperimentError::Train(t) => t.into(),
            ExperimentError::Decode(d) => d.into(),
            ExperimentError::Eval(v) => v.into(),
        }
    }
}
