use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Model(#[from] loadgp::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{}: {message}", path.display())]
    Config { path: PathBuf, message: String },
    #[error("{}: header must be `{expected}`, found `{found}`", path.display())]
    Header {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{}:{line}: missing value in column `{column}`", path.display())]
    MissingCell {
        path: PathBuf,
        line: u64,
        column: String,
    },
    #[error("{}:{line}: cannot parse `{value}` in column `{column}`", path.display())]
    Parse {
        path: PathBuf,
        line: u64,
        column: String,
        value: String,
    },
    #[error("{}:{line}: times of substation {substation}, day {day} are not increasing", path.display())]
    NonMonotoneTime {
        path: PathBuf,
        line: u64,
        substation: String,
        day: i64,
    },
    #[error("{}:{line}: unknown substation `{substation}`", path.display())]
    UnknownSubstation {
        path: PathBuf,
        line: u64,
        substation: String,
    },
    #[error("{}:{line}: negative customer count {count} for substation {substation}", path.display())]
    NegativeCount {
        path: PathBuf,
        line: u64,
        substation: String,
        count: i64,
    },
    #[error("{}:{line}: duplicate entry", path.display())]
    Duplicate { path: PathBuf, line: u64 },
    #[error("{}: {message}", path.display())]
    Incomplete { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Model(e) => e.code(),
            CliError::Io { .. } => "io",
            CliError::Json { .. } => "json",
            CliError::Config { .. } => "config",
            CliError::Header { .. } => "bad_header",
            CliError::MissingCell { .. } => "missing_cell",
            CliError::Parse { .. } => "parse",
            CliError::NonMonotoneTime { .. } => "non_monotone_time",
            CliError::UnknownSubstation { .. } => "unknown_substation",
            CliError::NegativeCount { .. } => "negative_count",
            CliError::Duplicate { .. } => "duplicate_row",
            CliError::Incomplete { .. } => "incomplete_data",
            CliError::Usage(_) => "usage",
        }
    }

    /// 2 for identifiability failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Model(e) if e.is_identifiability() => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
