use std::fmt;

use selagg_core::aggregation::AggregationError;
use selagg_core::localization::LocalizationError;
use selagg_core::metrics::MetricsError;
use selagg_core::probe::ProbeError;
use selagg_core::storage::StorageError;
use selagg_core::tensor::TensorError;
use selagg_core::vit::VitError;

/// Failure classes, each with its own process exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;

impl From<StorageError> for CliError {
    fn from(e: StorageError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<VitError> for CliError {
    fn from(e: VitError) -> Self {
        match e {
            VitError::Tensor(t) => t.into(),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<LocalizationError> for CliError {
    fn from(e: LocalizationError) -> Self {
        match e {
            LocalizationError::NonFinite => CliError::Numeric(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<AggregationError> for CliError {
    fn from(e: AggregationError) -> Self {
        match e {
            AggregationError::BadDepth(_)
            | AggregationError::ActivationAtDepthOne
            | AggregationError::MissingActivation(_)
            | AggregationError::MissingScoreModel(_)
            | AggregationError::UnexpectedScoreModel(_) => CliError::Usage(e.to_string()),
            AggregationError::Tensor(t) => t.into(),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        match e {
            ProbeError::NonFiniteLoss { .. } | ProbeError::NonFinite(_) => {
                CliError::Numeric(e.to_string())
            }
            ProbeError::Config(_)
            | ProbeError::Warmup { .. }
            | ProbeError::MissingScoreModel(_) => CliError::Usage(e.to_string()),
            ProbeError::Aggregation(a) => a.into(),
            ProbeError::Tensor(t) => t.into(),
            e => CliError::Data(e.to_string()),
        }
    }
}
