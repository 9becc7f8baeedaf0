//! Training, evaluation and the container format.

mod config;
mod container;
mod eval;
mod model;
mod scene;
mod train;

use thiserror::Error;

use crate::anchor::AnchorError;
use crate::entropy::EntropyError;
use crate::location::LocationError;
use crate::quantizer::QuantError;
use crate::range_coder::CoderError;
use crate::tensor::TensorError;

pub use config::{DistortionWeights, Phase, TrainConfig};
pub use container::{
    decode, encode, inspect_sections, read_header, CodedScene, DecodedScene, EncodeReport, Encoded,
    Section, SectionEntry, StreamHeader, MAGIC, VERSION,
};
pub use eval::{
    bit_allocation_stats, evaluate, lattice_coords, static_gaussian_bits, voxel_csv, Evaluation,
    VoxelStat,
};
pub use model::{Model, ModelRecord, TrainedState};
pub use train::{
    build_loss, train, LossGraph, LossInputs, LossReport, TrainData, TrainOutcome, Trainer,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Anchor(#[from] AnchorError),
    #[error("inputs disagree: {0}")]
    Mismatch(String),
    #[error("training diverged in phase {phase} at iteration {iteration}: {detail}")]
    Divergence {
        phase: u8,
        iteration: usize,
        detail: String,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Coder(#[from] CoderError),
    #[error(transparent)]
    Location(#[from] LocationError),
    #[error("not a compressed scene (bad magic)")]
    Magic,
    #[error("stream version {found}, this build reads {expected}")]
    Version { found: u16, expected: u16 },
    #[error("malformed stream: {0}")]
    Malformed(String),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Input,
    Stream,
    Divergence,
}

impl PipelineError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            PipelineError::Config(_)
            | PipelineError::Anchor(_)
            | PipelineError::Mismatch(_)
            | PipelineError::Quant(_) => ErrorKind::Input,
            PipelineError::Divergence { .. } => ErrorKind::Divergence,
            PipelineError::Tensor(TensorError::NonFiniteGradient(_)) => ErrorKind::Divergence,
            _ => ErrorKind::Stream,
        }
    }
}
