//! Camera relocalization by scene-coordinate regression.
//!
//! A small regressor maps local appearance descriptors to world coordinates
//! and is trained against ground-truth poses with either the pixel-space
//! reprojection loss or the angle-based reprojection loss (plus optional
//! multi-view and photometric terms). Poses of query images are recovered
//! from the predicted 2D-3D correspondences with P3P inside RANSAC followed by
//! Gauss-Newton refinement.

// `!(x > 0.0)` is used on purpose: it rejects NaN along with non-positives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod ransac;
pub mod regressor;
pub mod scenegen;
pub mod stats;
