//! Sparse convolution on 3D point clouds.
//!
//! A layer runs in two steps. The *map* step finds, for every output
//! coordinate and weight offset, the matching input point
//! ([`kernelmap`]). The *gather-GEMM-scatter* step copies matched input
//! features into padded buffers, multiplies each offset's slice by its weight
//! matrix and sum-reduces the products into output features ([`execution`]).

pub mod autotune;
pub mod error;
pub mod execution;
pub mod geometry;
pub mod kernelmap;
pub mod matrix;
pub mod netdef;
pub mod synthetic;
pub mod tracesim;

pub use error::{Error, Result};
pub use geometry::{Coordinate, OffsetSet, PackedKey, PointCloud};
pub use kernelmap::{KernelMap, Match};
pub use matrix::Matrix;
