use std::path::PathBuf;

use thiserror::Error;

use crate::graph::Diagnostic;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid graph: {}", join_diagnostics(.0))]
    InvalidGraph(Vec<Diagnostic>),

    #[error("graph is already augmented with latent nodes")]
    AlreadyAugmented,

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range for {context} of length {len}")]
    IndexOutOfRange { context: String, index: usize, len: usize },

    #[error("penalty {penalty} does not exceed largest grounded cost {max_cost}")]
    PenaltyTooSmall { penalty: f64, max_cost: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("state space of {states} joint states exceeds the enumeration limit {limit}")]
    StateSpaceTooLarge { states: f64, limit: f64 },

    #[error("labeling has {actual} entries, graph has {expected} variables")]
    IncompleteLabeling { expected: usize, actual: usize },

    #[error("ground-truth contradiction on non-cuttable link: labels {label_a} and {label_b} are incompatible")]
    GroundTruthContradiction { label_a: usize, label_b: usize },

    #[error("node {node} has no ground-truth label")]
    MissingGroundTruth { node: usize },

    #[error("training diverged at iteration {iteration}: risk became non-finite")]
    Diverged {
        iteration: usize,
        trace: Vec<crate::learning::TrainLogEntry>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Numerical failures are reported separately from data errors by the CLI.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::Diverged { .. } | Error::PenaltyTooSmall { .. }
        )
    }

    pub(crate) fn dims(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            actual,
        }
    }
}

fn join_diagnostics(diags: &[Diagnostic]) -> String {
    diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; ")
}
