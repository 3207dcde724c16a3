use thiserror::Error;

use crate::record::RunRecord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration field violates its invariant. The message names the field.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An operation was called outside its precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error(
        "staleness violation: client {client} downloaded at step {download_step}, \
         applied at step {apply_step} (staleness {}), bound tau = {tau_max}",
        apply_step - download_step
    )]
    StalenessViolation {
        client: usize,
        download_step: u64,
        apply_step: u64,
        tau_max: u64,
    },

    #[error("event queue drained at server step {step} before horizon {horizon}")]
    Deadlock { step: u64, horizon: u64 },

    /// A run stopped mid-way; `partial` holds everything recorded up to the abort.
    #[error("run aborted: {source}")]
    Aborted {
        source: Box<Error>,
        partial: Box<RunRecord>,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    /// True for failures that happen while a run is executing (as opposed to
    /// configuration or I/O problems).
    pub fn is_runtime_abort(&self) -> bool {
        matches!(
            self,
            Error::Aborted { .. }
                | Error::NonFinite { .. }
                | Error::StalenessViolation { .. }
                | Error::Deadlock { .. }
        )
    }

    /// Innermost cause, looking through [`Error::Aborted`].
    pub fn root(&self) -> &Error {
        match self {
            Error::Aborted { source, .. } => source.root(),
            other => other,
        }
    }
}
