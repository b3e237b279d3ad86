//! A learned population-based black-box optimizer.
//!
//! The optimizer maps an initial random population to an improved one by
//! stacking blocks of attention-based crossover, feed-forward mutation, and
//! residual pairwise selection. Blocks are trained end-to-end on cheap
//! differentiable surrogate functions via a reverse-mode tape, then applied
//! to expensive black-box targets using function values only.
//!
//! Module map:
//! - [`matrix`]: dense row-major f64 matrices
//! - [`tape`]: reverse-mode automatic differentiation over matrix ops
//! - [`objectives`]: benchmark functions, the planar arm task, evaluation metering
//! - [`model`]: the block architecture, population handling, checkpoints
//! - [`training`]: improvement loss, Adam, the training loop
//! - [`baselines`]: DE, (mu,lambda)-ES, canonical GA operators, random search

pub mod baselines;
pub mod matrix;
pub mod model;
pub mod objectives;
pub mod tape;
pub mod training;

pub use matrix::Matrix;
pub use objectives::{Bounds, EvalCounter, FunctionId, ObjectiveInstance};
pub use tape::{NodeId, ParamId, ParamSet, Tape};

use thiserror::Error as ThisError;

/// Errors surfaced by the library.
#[derive(Debug, ThisError)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("backward requires a scalar loss, got a {rows}x{cols} node")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("fitness of row {row} is NaN")]
    NanFitness { row: usize },
    #[error("unknown function id `{0}`")]
    UnknownFunction(String),
    #[error("{what}: expected {expected}, got {got}")]
    Mismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Derives a per-stream seed from a master seed.
///
/// SplitMix64 over `master XOR (stream + 1)`; stable across platforms so
/// persisted seed lists stay reproducible.
pub fn split_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ (stream.wrapping_add(1)).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
