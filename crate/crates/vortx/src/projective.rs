//! Projective SDF, projective occupancy, and visibility: the supervision
//! targets for the fusion transformer's occupancy head.
//!
//! The projective SDF of a voxel in one view is the surface depth along
//! the camera-voxel ray minus the camera-to-voxel depth, with the surface
//! depth sampled from a depth map at the nearest-neighbor pixel.

use crate::fuse_tsdf::{DepthMap, MAX_DEPTH};
use crate::geom::{self, Intrinsics, Pose, Vec3};

/// One voxel/view projective sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectiveSample {
    /// Projective SDF `d - d_v` in meters; meaningful only when `valid`.
    pub sdf: f64,
    /// Surface depth along the ray, meters.
    pub surface_depth: f64,
    /// Camera-to-voxel depth, meters.
    pub voxel_depth: f64,
    pub valid: bool,
}

impl ProjectiveSample {
    fn invalid(voxel_depth: f64) -> Self {
        ProjectiveSample { sdf: f64::NAN, surface_depth: 0.0, voxel_depth, valid: false }
    }
}

/// Tri-state supervision target: invalid samples carry no signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Supervision {
    Occupied,
    Empty,
    Unsupervised,
}

impl Supervision {
    pub fn target(self) -> Option<f64> {
        match self {
            Supervision::Occupied => Some(1.0),
            Supervision::Empty => Some(0.0),
            Supervision::Unsupervised => None,
        }
    }
}

/// Project a voxel center into a view and sample the depth map at the
/// nearest-neighbor pixel. Valid iff the pixel is in bounds, the sampled
/// depth is positive and within the 3 m cutoff, and the voxel is in
/// front of the camera.
pub fn projective_sdf(
    depth: &DepthMap,
    k: &Intrinsics,
    pose: &Pose,
    voxel_center: &Vec3,
) -> ProjectiveSample {
    let (u, v, d_v) = geom::project(k, pose, voxel_center);
    if d_v <= 0.0 {
        return ProjectiveSample::invalid(d_v);
    }
    let Some(d) = depth.sample_nearest(u, v) else {
        return ProjectiveSample::invalid(d_v);
    };
    if d > MAX_DEPTH {
        return ProjectiveSample::invalid(d_v);
    }
    ProjectiveSample { sdf: d - d_v, surface_depth: d, voxel_depth: d_v, valid: true }
}

/// Occupied iff the voxel lies strictly inside the truncation band of
/// the view's observed surface (`|S| < t`).
pub fn projective_occupancy(sample: &ProjectiveSample, truncation: f64) -> Supervision {
    assert!(truncation > 0.0);
    if !sample.valid {
        return Supervision::Unsupervised;
    }
    if sample.sdf.abs() < truncation {
        Supervision::Occupied
    } else {
        Supervision::Empty
    }
}

/// Visible iff the voxel is not occluded beyond the truncation band:
/// observed empty space plus the near-surface band (`S > -t`). Used only
/// for the visibility-supervised comparison mode.
pub fn visibility(sample: &ProjectiveSample, truncation: f64) -> Supervision {
    assert!(truncation > 0.0);
    if !sample.valid {
        return Supervision::Unsupervised;
    }
    if sample.sdf > -truncation {
        Supervision::Occupied
    } else {
        Supervision::Empty
    }
}
