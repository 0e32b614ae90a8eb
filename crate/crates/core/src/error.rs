use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the registration pipeline and its building blocks.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no superpoints")]
    NoSuperpoints,

    #[error("fully masked row {0}")]
    FullyMaskedRow(usize),

    #[error("no image patches")]
    NoImagePatches,

    #[error("empty target set")]
    EmptyTarget,

    #[error("degenerate scores: {axis} {index} underflows to zero")]
    DegenerateScores { axis: &'static str, index: usize },

    #[error("not enough anchors: need {needed}, have {available}")]
    NotEnoughAnchors { needed: usize, available: usize },

    #[error("degenerate patch (cross-covariance rank < 2)")]
    DegeneratePatch,

    #[error("too few pairs: {got} < {min}")]
    TooFewPairs { got: usize, min: usize },

    #[error("no local candidates")]
    NoLocalCandidates,

    #[error("empty anchor set")]
    EmptyAnchorSet,

    #[error("zero probability at supervised entry ({row}, {col})")]
    ZeroProbability { row: usize, col: usize },

    #[error("unreachable overlap fraction {requested} after {attempts} attempts (last measured {measured})")]
    UnreachableOverlap {
        requested: f64,
        measured: f64,
        attempts: usize,
    },

    #[error("all points behind camera")]
    AllPointsBehindCamera,

    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("{stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Tags an error with the pipeline stage that raised it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }
}
