// SPDX-License-Identifier: Apache-2.0

pub mod bundled;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod fusion;
pub mod geom;
pub mod netsim;
pub mod pipeline;
pub mod report;
pub mod voxel;
pub mod wire;

pub use error::{Error, Result};
