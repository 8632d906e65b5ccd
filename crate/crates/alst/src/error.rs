use std::fmt;
use std::path::PathBuf;

use numcore::NumError;
use thiserror::Error;

/// One offending manifest record.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordIssue {
    pub line: usize,
    pub patient_id: Option<String>,
    pub utterance_id: Option<String>,
    pub message: String,
}

impl fmt::Display for RecordIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}", self.line)?;
        if let Some(p) = &self.patient_id {
            write!(f, ", patient {p}")?;
        }
        if let Some(u) = &self.utterance_id {
            write!(f, ", utterance {u}")?;
        }
        write!(f, ": {}", self.message)
    }
}

fn join_issues(issues: &[RecordIssue]) -> String {
    issues.iter().map(|i| format!("\n  {i}")).collect()
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path} at byte {offset}: {detail}")]
    Format {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("manifest validation failed ({} record issue(s)):{}", .0.len(), join_issues(.0))]
    Validation(Vec<RecordIssue>),

    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric failure: {source} ({context})")]
    Numeric {
        context: String,
        #[source]
        source: NumError,
    },

    #[error("metric error: {0}")]
    Metric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn numeric(context: impl Into<String>, source: NumError) -> Self {
        Error::Numeric {
            context: context.into(),
            source,
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric { .. })
    }
}

impl From<NumError> for Error {
    fn from(source: NumError) -> Self {
        Error::Numeric {
            context: String::new(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
