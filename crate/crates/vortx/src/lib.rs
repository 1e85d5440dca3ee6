//! Volumetric multi-view 3D reconstruction with per-voxel transformer fusion.
//!
//! The pipeline backprojects per-view image features onto a sparse voxel
//! hierarchy (16/8/4 cm), fuses them per voxel with a small transformer
//! encoder weighted by predicted projective occupancy, runs a submanifold
//! sparse 3D CNN per hierarchy level to prune coarse-to-fine, and extracts
//! the zero isosurface of the predicted TSDF with marching cubes.
//!
//! Entry points:
//! - [`pipeline::synth_scene`] renders synthetic room scenes to disk,
//! - [`fuse_tsdf::make_gt`] builds ground-truth TSDF/occupancy volumes,
//! - [`pipeline::train`] runs the two-phase training schedule,
//! - [`pipeline::reconstruct`] produces a mesh from posed views,
//! - [`eval3d`] implements the trim-and-score mesh evaluation protocol.

pub mod diagnostics;
pub mod error;
pub mod eval3d;
pub mod feature;
pub mod fuse_tsdf;
pub mod fusion;
pub mod geom;
pub mod grid;
pub mod nn;
pub mod pipeline;
pub mod projective;
pub mod sparse_cnn;
pub mod surface;
pub mod threads;

pub use error::{Error, Result};
