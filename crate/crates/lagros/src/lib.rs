//! Robust guidance pipeline: contraction metrics synthesized by convex
//! optimization, a min-norm contracting tracking controller, tube-eroded
//! trajectory optimization, expert demonstration sampling inside the robust
//! error tube, an imitation-learned one-evaluation policy, and a disturbed
//! closed-loop benchmark harness.

pub mod artifact;
pub mod bounds;
pub mod config;
pub mod controller;
pub mod cvstem;
pub mod demos;
pub mod dynamics;
pub mod learner;
pub mod planner;
pub mod sdp;
pub mod simbench;

use thiserror::Error;

/// Errors shared across the pipeline stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("integration diverged at t = {t:.6}: |x| = {norm:.3e}")]
    Divergence { t: f64, norm: f64 },
    #[error("SDP infeasible: {0}")]
    SdpInfeasible(String),
    #[error("metric synthesis infeasible at grid point {index}: {detail}")]
    SynthesisInfeasible { index: usize, detail: String },
    #[error("planning infeasible: {0}")]
    PlanningInfeasible(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing artifact: {path} (produce it with `{producer}`)")]
    MissingArtifact { path: String, producer: String },
    #[error("malformed artifact {path}: {detail}")]
    Artifact { path: String, detail: String },
    #[error("training failed: {0}")]
    Training(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
