use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes. The CLI maps each one onto a distinct exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Training,
    Degenerate,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty file")]
    EmptyFile,
    #[error("missing column '{0}'")]
    MissingColumn(String),
    #[error("non-binary outcome '{value}' at data row {row}")]
    NonBinaryOutcome { row: usize, value: String },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("feature '{0}' has zero non-missing values")]
    EmptyFeature(String),
    #[error("feature '{0}' absent from schema")]
    FeatureNotInSchema(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("unknown feature id {0}")]
    UnknownFeature(usize),
    #[error("malformed error-pair csv: {0}")]
    MalformedPairs(String),

    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("invalid row split: {0}")]
    InvalidSplit(String),
    #[error("single-class training data")]
    SingleClassTraining,
    #[error("requested {requested} interaction pairs but only {available} exist")]
    TooManyPairs { requested: usize, available: usize },
    #[error("singular design matrix")]
    SingularDesign,
    #[error("T too small: {rows} rows cannot populate every split of a {k}x{l} plan")]
    TooFewRows { rows: usize, k: usize, l: usize },
    #[error("mismatched bag plans")]
    MismatchedPlans,

    #[error("single distinct score")]
    SingleDistinctScore,
    #[error("single-class outcomes")]
    SingleClassOutcomes,
    #[error("degenerate margin: {0} errors have zero variance")]
    DegenerateMargin(&'static str),
    #[error("too few pairs: {0} (need at least 30)")]
    TooFewPairs(usize),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            Config(_) => ErrorClass::Config,
            Io { .. }
            | Csv(_)
            | Json(_)
            | EmptyFile
            | MissingColumn(_)
            | NonBinaryOutcome { .. }
            | InvalidDataset(_)
            | EmptyFeature(_)
            | FeatureNotInSchema(_)
            | SchemaMismatch(_)
            | UnknownFeature(_)
            | MalformedPairs(_) => ErrorClass::Data,
            EmptyTrainingSet
            | InvalidSplit(_)
            | SingleClassTraining
            | TooManyPairs { .. }
            | SingularDesign
            | TooFewRows { .. }
            | MismatchedPlans => ErrorClass::Training,
            SingleDistinctScore | SingleClassOutcomes | DegenerateMargin(_) | TooFewPairs(_) => {
                ErrorClass::Degenerate
            }
        }
    }
}
