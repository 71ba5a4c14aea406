// SPDX-License-Identifier: Apache-2.0

use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid grid spec: {0}")]
    InvalidGrid(String),

    #[error("voxel has no points: ({0}, {1}, {2})")]
    EmptyVoxel(u32, u32, u32),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("feature length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("voxel size mismatch between stores")]
    VoxelSizeMismatch,

    #[error("cell size mismatch: {0} vs {1}")]
    CellSizeMismatch(f64, f64),

    #[error("channel mask is empty")]
    EmptyMask,

    #[error("invalid channel mask: {0}")]
    InvalidMask(String),

    #[error("non-positive box extent")]
    NonPositiveExtent,

    #[error("loss inputs inconsistent: {0}")]
    LossInput(String),

    #[error("malformed message: {0}")]
    Malformed(String),

    #[error("key out of range: {0}")]
    KeyOutOfRange(String),

    #[error("corrupted stream: {0}")]
    Corrupted(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
