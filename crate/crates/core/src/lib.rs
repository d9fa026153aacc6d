//! Sparse-voxel LiDAR driving stack.
//!
//! The crate is organized around the data path of a closed-loop run:
//! point clouds are voxelized ([`geometry`]), pushed through a sparse
//! convolutional backbone ([`sparse`], [`nn`]) that predicts lookahead
//! controls with evidential uncertainty ([`evidential`]), and the
//! predictions are fused across frames by travelled distance
//! ([`fusion`]) inside a deterministic simulator ([`sim`]). [`trainer`]
//! owns the optimization loop.

pub mod check;
pub mod evidential;
pub mod fusion;
pub mod geometry;
pub mod nn;
pub mod sim;
pub mod sparse;
pub mod trainer;
