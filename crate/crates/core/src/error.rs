use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{kind} `{name}` not found (valid: {valid})")]
    NotFound {
        kind: &'static str,
        name: String,
        valid: String,
    },

    #[error("malformed schedule: {0}")]
    MalformedSchedule(String),

    #[error("syntax error: {0}")]
    Syntax(String),

    #[error("velocity field is singular at t = {t}")]
    Singularity { t: f64 },

    #[error("estimation failed: {0}")]
    EstimationFailure(String),

    #[error("corrupted model: {0}")]
    CorruptedModel(String),

    #[error("training diverged at step {step} (loss = {loss})")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("numerical blowup at solver step {step}{}", sample.map(|s| format!(" (sample {s})")).unwrap_or_default())]
    NumericalBlowup { step: usize, sample: Option<usize> },

    #[error("repeat {repeat}: {source}")]
    InRepeat {
        repeat: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("degenerate basis: {0}")]
    DegenerateBasis(String),

    #[error("search space too large: {0}")]
    TooLarge(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for failures of the numerics themselves rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Singularity { .. }
            | Error::EstimationFailure(_)
            | Error::CorruptedModel(_)
            | Error::TrainingDiverged { .. }
            | Error::NumericalBlowup { .. }
            | Error::DegenerateBasis(_) => true,
            Error::InRepeat { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
