//! Fairness auditing for demographic segmentation in face pipelines.
//!
//! The crate covers per-group accuracy and fairness metrics, identity-level
//! robustness scores, the plug-in estimator of per-group success rates under
//! a noisy group classifier together with its confusion-matrix correction, a
//! Monte Carlo simulator for both, and linear and RBF SVM probing heads over
//! face embeddings. The `fairprobe` binary wraps all of it.

pub mod cli;
pub mod estimator;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod probing;
pub mod report;
pub mod simulator;

pub use cli::run_cli;

use thiserror::Error;

/// Any error raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Estimator(#[from] estimator::EstimatorError),
    #[error(transparent)]
    Sim(#[from] simulator::SimError),
    #[error(transparent)]
    Probe(#[from] probing::ProbeError),
    #[error(transparent)]
    Format(#[from] io::FormatError),
    #[error(transparent)]
    Report(#[from] report::ReportError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
