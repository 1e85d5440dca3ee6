//! Pinhole camera math, frustum tests, keyframe selection and per-tile
//! view sampling.
//!
//! Poses are world-from-camera: `p_world = R * p_cam + t`. The camera
//! looks down +z in its own frame, x right, y down.

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::Geometry(format!("focal lengths must be positive, got ({fx}, {fy})")));
        }
        if cx < 0.0 || cx >= width as f64 || cy < 0.0 || cy >= height as f64 {
            return Err(Error::Geometry(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Intrinsics { fx, fy, cx, cy, width, height })
    }

    /// Rescale intrinsics for a feature map downsampled by `stride`.
    pub fn at_stride(&self, stride: usize) -> Intrinsics {
        let s = stride as f64;
        Intrinsics {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: self.cx / s,
            cy: self.cy / s,
            width: self.width.div_ceil(stride),
            height: self.height.div_ceil(stride),
        }
    }
}

/// World-from-camera rigid pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let rtr = rotation.transpose() * rotation;
        let err = (rtr - Mat3::identity()).norm();
        if err > 1e-6 || (rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::Geometry(format!(
                "rotation is not special orthogonal (orthonormality err {err:.2e}, det {})",
                rotation.determinant()
            )));
        }
        Ok(Pose { rotation, translation })
    }

    pub fn identity() -> Self {
        Pose { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.translation
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn camera_to_world(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Geodesic rotation angle to `other`, in degrees.
    pub fn rotation_angle_deg(&self, other: &Pose) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos().to_degrees()
    }

    /// Compose with a world-side transform: returns `m * self` where `m`
    /// maps world to world.
    pub fn pre_transform(&self, rot: &Mat3, trans: &Vec3) -> Pose {
        Pose {
            rotation: rot * self.rotation,
            translation: rot * self.translation + trans,
        }
    }
}

/// Camera at `eye` looking at `target`: x right, y down, z forward,
/// with world -z as the preferred image-down direction.
pub fn look_at_from(eye: Vec3, target: Vec3) -> Pose {
    let forward = (target - eye).normalize();
    let mut down0 = Vec3::new(0.0, 0.0, -1.0);
    if forward.dot(&down0).abs() > 0.99 {
        down0 = Vec3::new(0.0, -1.0, 0.0);
    }
    let right = down0.cross(&forward).normalize();
    let down = forward.cross(&right);
    let r = Mat3::from_columns(&[right, down, forward]);
    Pose {
        rotation: r,
        translation: eye,
    }
}

/// Axis-aligned box in world meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if min.x > max.x || min.y > max.y || min.z > max.z {
            return Err(Error::Geometry(format!("inverted AABB {min:?} .. {max:?}")));
        }
        Ok(Aabb { min, max })
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn is_empty(&self) -> bool {
        let e = self.extent();
        e.x <= 0.0 || e.y <= 0.0 || e.z <= 0.0
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let (a, b) = (self.min, self.max);
        [
            Vec3::new(a.x, a.y, a.z),
            Vec3::new(b.x, a.y, a.z),
            Vec3::new(a.x, b.y, a.z),
            Vec3::new(b.x, b.y, a.z),
            Vec3::new(a.x, a.y, b.z),
            Vec3::new(b.x, a.y, b.z),
            Vec3::new(a.x, b.y, b.z),
            Vec3::new(b.x, b.y, b.z),
        ]
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&other.min),
            max: self.max.sup(&other.max),
        }
    }

    pub fn padded(&self, m: f64) -> Aabb {
        Aabb {
            min: self.min - Vec3::repeat(m),
            max: self.max + Vec3::repeat(m),
        }
    }
}

/// Project a world point. Returns `(u, v, d_v)` where `d_v` is the
/// camera-frame depth; the pixel may lie outside image bounds and `d_v`
/// may be non-positive. The caller filters.
pub fn project(k: &Intrinsics, pose: &Pose, p: &Vec3) -> (f64, f64, f64) {
    let pc = pose.world_to_camera(p);
    let u = k.fx * pc.x / pc.z + k.cx;
    let v = k.fy * pc.y / pc.z + k.cy;
    (u, v, pc.z)
}

/// Backproject pixel `(u, v)` at camera depth `d` to a world point.
pub fn backproject(k: &Intrinsics, pose: &Pose, u: f64, v: f64, d: f64) -> Vec3 {
    let pc = Vec3::new((u - k.cx) / k.fx * d, (v - k.cy) / k.fy * d, d);
    pose.camera_to_world(&pc)
}

/// Camera-to-voxel unit direction (world frame) and camera-frame depth.
pub fn camera_to_voxel(pose: &Pose, voxel_center: &Vec3) -> Result<(Vec3, f64)> {
    let delta = voxel_center - pose.center();
    let n = delta.norm();
    if n < 1e-12 {
        return Err(Error::Geometry("voxel center coincides with camera center".into()));
    }
    let depth = pose.world_to_camera(voxel_center).z;
    Ok((delta / n, depth))
}

const FRUSTUM_EPS: f64 = 1e-6;

/// Corners of the truncated pyramid frustum, in world coordinates.
pub fn frustum_corners(k: &Intrinsics, pose: &Pose, near: f64, far: f64) -> [Vec3; 8] {
    let w = k.width as f64;
    let h = k.height as f64;
    let px = [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)];
    let mut out = [Vec3::zeros(); 8];
    for (i, &(u, v)) in px.iter().enumerate() {
        out[i] = backproject(k, pose, u, v, near);
        out[i + 4] = backproject(k, pose, u, v, far);
    }
    out
}

/// Outward-pointing frustum planes as `(normal, offset)` with
/// `n . p <= offset` for interior points.
fn frustum_planes(k: &Intrinsics, pose: &Pose, near: f64, far: f64) -> [(Vec3, f64); 6] {
    let c = frustum_corners(k, pose, near, far);
    // Each plane from three corners, normal oriented away from the
    // frustum centroid.
    let centroid = c.iter().sum::<Vec3>() / 8.0;
    let tri = [
        (0, 1, 2), // near
        (4, 6, 5), // far
        (0, 2, 4), // left
        (1, 5, 3), // right
        (0, 4, 1), // top
        (2, 3, 6), // bottom
    ];
    tri.map(|(a, b, d)| {
        let mut n = (c[b] - c[a]).cross(&(c[d] - c[a]));
        n /= n.norm();
        if n.dot(&(centroid - c[a])) > 0.0 {
            n = -n;
        }
        (n, n.dot(&c[a]))
    })
}

/// Conservative frustum/box overlap test: box corners against the six
/// frustum planes and frustum corners against the box slabs. May report
/// a near-miss within one plane epsilon as overlapping, never the
/// reverse.
pub fn frustum_intersects(k: &Intrinsics, pose: &Pose, depth_range: (f64, f64), aabb: &Aabb) -> bool {
    let (near, far) = depth_range;
    debug_assert!(near > 0.0 && far > near);
    let bc = aabb.corners();
    for (n, off) in frustum_planes(k, pose, near, far) {
        if bc.iter().all(|p| n.dot(p) > off + FRUSTUM_EPS) {
            return false;
        }
    }
    let fc = frustum_corners(k, pose, near, far);
    for axis in 0..3 {
        if fc.iter().all(|p| p[axis] > aabb.max[axis] + FRUSTUM_EPS)
            || fc.iter().all(|p| p[axis] < aabb.min[axis] - FRUSTUM_EPS)
        {
            return false;
        }
    }
    true
}

/// Keyframe filtering: frame 0 is always kept; a frame is kept iff its
/// geodesic rotation angle or translation to the last kept frame exceeds
/// the threshold.
pub fn select_keyframes(poses: &[Pose], r_max_deg: f64, t_max_m: f64) -> Vec<usize> {
    let mut out = Vec::new();
    let mut last: Option<&Pose> = None;
    // Angle slack absorbs arccos rounding when a trajectory lands
    // exactly on the threshold.
    const ANGLE_EPS: f64 = 1e-6;
    for (i, pose) in poses.iter().enumerate() {
        let keep = match last {
            None => true,
            Some(prev) => {
                let ang = prev.rotation_angle_deg(pose);
                let trans = (pose.translation - prev.translation).norm();
                ang > r_max_deg + ANGLE_EPS || trans > t_max_m + 1e-12
            }
        };
        if keep {
            out.push(i);
            last = Some(pose);
        }
    }
    out
}

/// Uniformly sample up to `n` keyframes whose frustums intersect `tile`,
/// without replacement. Returned indices are indices into `keyframes`,
/// sorted ascending; empty when no frustum intersects the tile.
pub fn sample_views(
    keyframes: &[(Intrinsics, Pose)],
    tile: &Aabb,
    depth_range: (f64, f64),
    n: usize,
    seed: u64,
) -> Vec<usize> {
    assert!(n >= 1);
    let mut candidates: Vec<usize> = keyframes
        .iter()
        .enumerate()
        .filter(|(_, (k, p))| frustum_intersects(k, p, depth_range, tile))
        .map(|(i, _)| i)
        .collect();
    if candidates.len() > n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        candidates.shuffle(&mut rng);
        candidates.truncate(n);
        candidates.sort_unstable();
    }
    candidates
}

/// Default depth range for frustum tests; far plane matches the 3 m depth
/// cutoff used for ground truth.
pub const DEFAULT_DEPTH_RANGE: (f64, f64) = (0.1, 3.0);

/// Read a 4x4 row-major world-from-camera pose matrix from a text file
/// (4 lines of 4 whitespace-separated floats).
pub fn read_pose_file(path: &Path) -> Result<Pose> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let vals = parse_floats(&text, path, 16)?;
    let r = Mat3::new(
        vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10],
    );
    let t = Vec3::new(vals[3], vals[7], vals[11]);
    Pose::new(r, t)
}

pub fn write_pose_file(path: &Path, pose: &Pose) -> Result<()> {
    let r = &pose.rotation;
    let t = &pose.translation;
    let mut s = String::new();
    for i in 0..3 {
        s.push_str(&format!(
            "{:.17e} {:.17e} {:.17e} {:.17e}\n",
            r[(i, 0)],
            r[(i, 1)],
            r[(i, 2)],
            t[i]
        ));
    }
    s.push_str("0 0 0 1\n");
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Read a 3x3 row-major intrinsics matrix (three lines of three floats).
/// The image size comes from the scene's depth maps.
pub fn read_intrinsics_file(path: &Path, width: usize, height: usize) -> Result<Intrinsics> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let vals = parse_floats(&text, path, 9)?;
    Intrinsics::new(vals[0], vals[4], vals[2], vals[5], width, height)
}

pub fn write_intrinsics_file(path: &Path, k: &Intrinsics) -> Result<()> {
    let s = format!(
        "{:.17e} 0 {:.17e}\n0 {:.17e} {:.17e}\n0 0 1\n",
        k.fx, k.cx, k.fy, k.cy
    );
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn parse_floats(text: &str, path: &Path, need: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(need);
    let mut offset = 0u64;
    for tok in text.split_whitespace() {
        let pos = tok.as_ptr() as usize - text.as_ptr() as usize;
        offset = pos as u64;
        let v: f64 = tok
            .parse()
            .map_err(|_| Error::parse(path, offset, format!("bad float token {tok:?}")))?;
        out.push(v);
    }
    if out.len() < need {
        return Err(Error::parse(
            path,
            offset,
            format!("expected at least {need} floats, found {}", out.len()),
        ));
    }
    Ok(out)
}

/// Rotation about z by `k * 90` degrees, exact.
pub fn rot_z_quarter(k: u8) -> Mat3 {
    match k % 4 {
        0 => Mat3::identity(),
        1 => Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0),
        2 => Mat3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0),
        _ => Mat3::new(0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0),
    }
}
