//! Core algorithms for stereo and multi-view 3D reconstruction.
//!
//! The crate turns rectified stereo pairs (or externally estimated depth maps)
//! into metric point clouds and fuses clouds from several viewpoints into one
//! model:
//!
//! * [`stereo`]: SAD block-matching disparity and disparity-to-depth.
//! * [`cloud`]: back-projection, k-d tree search, normals, voxel decimation.
//! * [`registration`]: point-to-plane and point-to-point ICP.
//! * [`posegraph`]: multiway registration over an SE(3) pose graph.
//! * [`synth`]: analytic scenes used as ground truth.
//!
//! The crate is `no_std` and needs only `alloc`. The default `std` feature
//! turns on rayon-backed parallel loops whose results are bit-identical to
//! the sequential ones.

#![no_std]
// `!(x > 0.0)` style checks deliberately reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod cloud;
pub mod geom;
pub mod math;
mod par;
pub mod posegraph;
pub mod raster;
pub mod registration;
pub mod stereo;
pub mod synth;

pub use cloud::{PinholeIntrinsics, PointCloud, SpatialIndex};
pub use geom::{RigidTransform, Twist};
pub use raster::{DepthMap, DisparityMap, GrayImage, RgbImage};
