//! 3D human pose lifting with a U-shaped conditional directed graph
//! convolutional network (U-CondDGCN).
//!
//! The human skeleton is represented as a rooted directed graph: joints are
//! nodes, bones are edges pointing from parent joints to child joints. A
//! directed graph convolution (DGConv) updates node and edge features over
//! this fixed topology; its conditional variant (CondDGConv) inserts an extra
//! node-updating step driven by a per-sample connection matrix blended from
//! trainable bases, so different poses can exploit different non-local
//! dependence. Blocks are assembled into a U-shaped encoder/decoder over the
//! temporal axis with skip connections and a multi-scale merging stage.
//!
//! Everything runs on a small reverse-mode autodiff core ([`diffcore`]) with
//! double-precision tensors, so gradients of every layer can be verified
//! against central finite differences.
//!
//! The crate ships:
//!
//! - [`skeleton`]: directed skeleton layouts, incidence maps, feature init;
//! - [`layers`]: DGConv / CondDGConv steps, routing, temporal conv, blocks;
//! - [`network`]: model assembly, forward pass, checkpoints;
//! - [`train`]: position + motion losses, the AdaMod optimizer, training loop;
//! - [`metrics`]: MPJPE, Procrustes-aligned MPJPE, PCK, AUC;
//! - [`data`]: the DGP pose-sequence file format, a synthetic forward
//!   kinematics corpus generator, and sliding-window inference;
//! - [`cli`]: the command implementations behind the `ucondgcn` binary.
//!
//! Each major capability has a runnable example under `examples/`; start with
//! `cargo run --release -p ucondgcn --example gradcheck`.

pub mod cli;
pub mod data;
pub mod diffcore;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod params;
pub mod skeleton;
pub mod train;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape mismatch; names the operation and the offending shapes.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid skeleton structure (cycle, multiple roots, disconnected node).
    #[error("invalid skeleton: {0}")]
    Skeleton(String),

    /// Invalid configuration value or file.
    #[error("invalid config: {0}")]
    Config(String),

    /// Numeric failure (non-finite value where finite was required).
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Pose-file parse failure with 1-based line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Checkpoint serialization/deserialization failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training/inference precondition failure.
    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub use diffcore::{Tape, Tensor, Var};
pub use network::{CondPlacement, Model, ModelConfig};
pub use skeleton::DirectedSkeleton;
