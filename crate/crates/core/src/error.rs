use std::path::PathBuf;

use thiserror::Error;

/// Every failure the engine can report.
///
/// Variants carry enough context to print a single diagnostic line; the CLI
/// maps them onto exit codes through [`Error::kind`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },

    #[error("cycle detected through node {node}")]
    CycleDetected { node: String },

    #[error("level gap: node {node} has level {level} but parent {parent} has level {parent_level}")]
    LevelGap {
        node: String,
        level: u8,
        parent: String,
        parent_level: u8,
    },

    #[error("duplicate node id {0}")]
    DuplicateId(String),

    #[error("taxonomy deeper than {max} levels (node {node} at level {level})")]
    TooDeep { node: String, level: u8, max: usize },

    #[error("unknown code {0}")]
    UnknownCode(String),

    #[error("{0} is not a leaf code")]
    NotALeaf(String),

    #[error("sentence is empty after tokenization")]
    EmptySentence,

    #[error("no precomputed embedding for key {0:?}")]
    MissingKey(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("trial {0} has no criteria")]
    NoCriteria(String),

    #[error("batch is empty")]
    EmptyBatch,

    #[error("need at least two trials to sample unknown pairs, found {0}")]
    InsufficientTrials(usize),

    #[error("non-finite loss at batch {batch}: {term}")]
    NonFiniteLoss { batch: usize, term: String },

    #[error("only one label class present")]
    DegenerateLabels,

    #[error("infeasible synthetic config: {0}")]
    InfeasibleConfig(String),

    #[error("unknown concept {0}")]
    UnknownConcept(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("model format version {found} is newer than supported {supported}")]
    FormatVersionMismatch { found: u32, supported: u32 },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Stable variant name, used in machine-readable error output.
    pub fn name(&self) -> &'static str {
        match self {
            Error::MalformedRow { .. } => "MalformedRow",
            Error::CycleDetected { .. } => "CycleDetected",
            Error::LevelGap { .. } => "LevelGap",
            Error::DuplicateId(_) => "DuplicateId",
            Error::TooDeep { .. } => "TooDeep",
            Error::UnknownCode(_) => "UnknownCode",
            Error::NotALeaf(_) => "NotALeaf",
            Error::EmptySentence => "EmptySentence",
            Error::MissingKey(_) => "MissingKey",
            Error::DimMismatch { .. } => "DimMismatch",
            Error::NoCriteria(_) => "NoCriteria",
            Error::EmptyBatch => "EmptyBatch",
            Error::InsufficientTrials(_) => "InsufficientTrials",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::DegenerateLabels => "DegenerateLabels",
            Error::InfeasibleConfig(_) => "InfeasibleConfig",
            Error::UnknownConcept(_) => "UnknownConcept",
            Error::InvalidInput(_) => "InvalidInput",
            Error::Config(_) => "ConfigError",
            Error::FormatVersionMismatch { .. } => "FormatVersionMismatch",
            Error::Format { .. } => "FormatError",
            Error::Io { .. } => "IoError",
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::InfeasibleConfig(_) => ErrorKind::Config,
            Error::NonFiniteLoss { .. } | Error::EmptyBatch | Error::DegenerateLabels => {
                ErrorKind::Runtime
            }
            _ => ErrorKind::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimMismatch {
            context,
            expected,
            actual,
        })
    }
}
