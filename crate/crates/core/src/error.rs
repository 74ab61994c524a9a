use std::path::PathBuf;

/// Errors raised by the library.
///
/// Grouping violations are reported as data by
/// [`validate_grouping`](crate::data::validate_grouping); they only become an
/// [`Error::Grouping`] when an operation needs a valid grouping to proceed.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at data row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("partition error: {0}")]
    Partition(String),

    #[error("invalid grouping: {0}")]
    Grouping(String),

    #[error("group {group} is not identified: design rank {rank} < {columns} columns")]
    Identification {
        group: String,
        rank: usize,
        columns: usize,
    },

    #[error("group {0} is not identified")]
    UnidentifiedGroup(String),

    #[error("{what} = {value} exceeds the supported bound of {bound}")]
    Bound {
        what: &'static str,
        value: usize,
        bound: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("formula error: {0}")]
    Formula(String),

    #[error("all {0} interval programs are infeasible; choose a smaller epsilon_0")]
    AllInfeasible(usize),

    #[error("estimation error: {0}")]
    Estimation(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
