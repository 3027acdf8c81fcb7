//! Reflection-sensitive, rigid-motion-invariant molecular representations
//! built from chirality matrices and learnable determinant kernels.

pub mod error;
pub mod geometry;
pub mod numerics;
pub mod nn;
pub mod encoder;
pub mod attention;
pub mod data;
pub mod model;
pub mod gradcheck;

pub use error::{CheckpointError, Error, Result};
