//! A desk-scale laboratory for the geometry of refusal behavior in
//! transformer language models, built around a tiny self-contained
//! decoder-only model trained on a synthetic refuse-or-answer task.
//!
//! The crate provides, end to end:
//!
//! - a deterministic reverse-mode differentiation engine ([`tape`]),
//! - a toy transformer with residual-stream hooks and interventions
//!   ([`model`]), plus a trainer for the synthetic task ([`train`]),
//! - directional ablation, activation addition, and difference-in-means
//!   direction extraction ([`interventions`]),
//! - gradient-based refusal-direction optimization ([`rdo`]),
//! - multi-dimensional refusal concept cones ([`cone`]),
//! - representational-independence losses and verification ([`repind`]),
//! - discrete adversarial suffix search ([`attack`]),
//! - and an evaluation harness producing structured reports ([`eval`]).
//!
//! See the `book/` guide at the repository root for a narrative walk
//! through the concepts; its code snippets compile as doc-tests via the
//! [`guide`] module.

pub mod artifact;
pub mod attack;
pub mod cone;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod guide;
pub mod interventions;
pub mod model;
pub mod optim;
pub mod rdo;
pub mod repind;
pub mod tape;
pub mod tensor;
pub mod train;

pub use tensor::{Tensor, TensorError};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("empty {what}")]
    Empty { what: &'static str },
    #[error("context overflow: {needed} tokens exceed max_seq_len {max}")]
    ContextOverflow { needed: usize, max: usize },
    #[error("direction has {direction} dims but model d_model is {d_model}")]
    DirectionDim { direction: usize, d_model: usize },
    #[error(
        "toy training stopped at accuracy {reached:.4} (target {target:.4}) after {steps} steps"
    )]
    TrainingFailed {
        target: f64,
        reached: f64,
        steps: usize,
        curve: Vec<(usize, f64, f64)>,
    },
    #[error("optimization diverged: loss stayed above its initial value {initial:.4} for {steps} consecutive steps (last {last:.4})")]
    Diverged { initial: f64, last: f64, steps: usize },
    #[error("degenerate difference-in-means direction (norm {norm:.3e} < 1e-8)")]
    DegenerateDirection { norm: f64 },
    #[error("degenerate basis: vector {index} has residual norm {norm:.3e} after orthogonalization")]
    DegenerateBasis { index: usize, norm: f64 },
    #[error("model checksum mismatch: artifact was built for {expected}, model is {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

