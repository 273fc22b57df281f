use std::path::PathBuf;

/// Errors produced by the decomposition routines and the experiment pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("size mismatch: {0}")]
    Size(String),

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e}, allowed {allowed:e})")]
    NotSymmetric { asymmetry: f64, allowed: f64 },

    #[error("non-finite entry encountered in {0}")]
    NonFinite(&'static str),

    #[error("{0} did not converge within the iteration limit")]
    NoConvergence(&'static str),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error(
        "normalization undefined: {which}[{index}] = {value:e} is not strictly positive; \
         choose a larger rank parameter"
    )]
    Normalization {
        which: &'static str,
        index: usize,
        value: f64,
    },

    #[error(
        "factor Gram matrix is numerically rank deficient (smallest/largest eigenvalue {ratio:e}); \
         use a smaller rank or a different seed"
    )]
    RankDeficient { ratio: f64 },

    #[error("insufficient rank: {0}")]
    InsufficientRank(String),

    #[error("integration became unstable at step {step}")]
    Instability { step: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn at(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures of the numerics (positivity, rank, convergence, blow-up)
    /// as opposed to bad inputs or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            Error::NotSymmetric { .. }
                | Error::NonFinite(_)
                | Error::NoConvergence(_)
                | Error::DegenerateData(_)
                | Error::Normalization { .. }
                | Error::RankDeficient { .. }
                | Error::InsufficientRank(_)
                | Error::Instability { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
