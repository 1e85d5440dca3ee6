//! Depth-map TSDF fusion for ground-truth construction, occupancy target
//! derivation, unobserved-column masking, and training subcrop extraction.
//!
//! TSDF values are stored normalized by the truncation distance `t`
//! (range [-1, 1]); conversion to meters happens only at mesh export.
//! Per-voxel accumulation is integer fixed-point (sum and count, divide
//! at read), so fusing the same depth maps in any order yields
//! bit-identical volumes.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::{self, Aabb, Intrinsics, Mat3, Pose, Vec3};
use crate::grid::{downsample_occupancy, Level, SparseVoxelGrid, VoxelKey};

/// Default truncation distance: 3 fine voxels.
pub const DEFAULT_TRUNCATION: f64 = 0.12;

/// Depth measurements beyond this range are discarded.
pub const MAX_DEPTH: f64 = 3.0;

/// Fixed-point scale for normalized-TSDF accumulation.
const TSDF_FIXED_SCALE: f64 = (1u64 << 32) as f64;

/// Dense depth image in meters; 0 marks invalid pixels.
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize) -> Self {
        DepthMap { width, height, data: vec![0.0; width * height] }
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, d: f64) {
        self.data[v * self.width + u] = d;
    }

    /// Nearest-neighbor sample at continuous pixel coordinates. Returns
    /// `None` outside the image or on invalid pixels.
    pub fn sample_nearest(&self, u: f64, v: f64) -> Option<f64> {
        let ui = u.round();
        let vi = v.round();
        if ui < 0.0 || vi < 0.0 || ui >= self.width as f64 || vi >= self.height as f64 {
            return None;
        }
        let d = self.get(ui as usize, vi as usize);
        (d > 0.0).then_some(d)
    }

    /// Mirror about the vertical image axis (`u -> width-1-u`).
    pub fn flip_horizontal(&self) -> DepthMap {
        let mut out = DepthMap::new(self.width, self.height);
        for v in 0..self.height {
            for u in 0..self.width {
                out.set(u, v, self.get(self.width - 1 - u, v));
            }
        }
        out
    }

    /// Read a 16-bit grayscale PNG storing millimeters (0 = invalid).
    pub fn read_png(path: &Path) -> Result<DepthMap> {
        let img = image::open(path).map_err(|e| Error::Image { path: path.into(), source: e })?;
        let img = img.into_luma16();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = DepthMap::new(w, h);
        for (x, y, p) in img.enumerate_pixels() {
            out.set(x as usize, y as usize, p.0[0] as f64 / 1000.0);
        }
        Ok(out)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
            self.width as u32,
            self.height as u32,
        );
        for (x, y, p) in img.enumerate_pixels_mut() {
            let mm = (self.get(x as usize, y as usize) * 1000.0).round();
            p.0[0] = mm.clamp(0.0, u16::MAX as f64) as u16;
        }
        img.save(path).map_err(|e| Error::Image { path: path.into(), source: e })
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Cell {
    /// Fixed-point sum of clamped normalized projective SDF values.
    sum: i64,
    count: u32,
    observed: bool,
    /// Set by `mask_unobserved_columns`: the voxel sits in a fully
    /// unobserved column and is supervisable empty space.
    column_masked: bool,
}

/// Per-voxel payload exposed to marching cubes and the debug dump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsdfVoxel {
    /// Normalized TSDF in [-1, 1].
    pub tsdf: f64,
    /// Observation count.
    pub weight: f64,
    pub observed: bool,
}

/// Dense-in-bounds TSDF volume on the fine lattice. The voxel-key
/// semantics match `SparseVoxelGrid`; storage is a dense block over the
/// integration bounds because fusion observes most of the free space.
#[derive(Debug, Clone)]
pub struct TsdfVolume {
    pub origin: Vec3,
    pub level: Level,
    pub truncation: f64,
    key_min: [i32; 3],
    dims: [usize; 3],
    cells: Vec<Cell>,
}

impl TsdfVolume {
    /// Volume covering every voxel whose center lies inside `bounds`.
    /// The lattice origin is `bounds.min`.
    pub fn new(bounds: &Aabb, level: Level, truncation: f64) -> Self {
        Self::with_origin(bounds.min, bounds, level, truncation)
    }

    pub fn with_origin(origin: Vec3, bounds: &Aabb, level: Level, truncation: f64) -> Self {
        assert!(truncation > 0.0);
        let s = level.voxel_size();
        let mut key_min = [0i32; 3];
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let lo = ((bounds.min[a] - origin[a]) / s - 0.5).ceil() as i32;
            let hi = ((bounds.max[a] - origin[a]) / s - 0.5).floor() as i32;
            key_min[a] = lo;
            dims[a] = (hi - lo + 1).max(0) as usize;
        }
        TsdfVolume {
            origin,
            level,
            truncation,
            key_min,
            dims,
            cells: vec![Cell::default(); dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn key_min(&self) -> [i32; 3] {
        self.key_min
    }

    fn index(&self, key: &VoxelKey) -> Option<usize> {
        let i = key.ix - self.key_min[0];
        let j = key.iy - self.key_min[1];
        let k = key.iz - self.key_min[2];
        if i < 0
            || j < 0
            || k < 0
            || i as usize >= self.dims[0]
            || j as usize >= self.dims[1]
            || k as usize >= self.dims[2]
        {
            return None;
        }
        Some((i as usize * self.dims[1] + j as usize) * self.dims[2] + k as usize)
    }

    pub fn contains_key(&self, key: &VoxelKey) -> bool {
        self.index(key).is_some()
    }

    pub fn voxel_center(&self, key: &VoxelKey) -> Vec3 {
        let s = self.level.voxel_size();
        self.origin
            + Vec3::new(
                (key.ix as f64 + 0.5) * s,
                (key.iy as f64 + 0.5) * s,
                (key.iz as f64 + 0.5) * s,
            )
    }

    /// Normalized TSDF at a voxel; `None` when never observed and not
    /// column-masked.
    pub fn tsdf(&self, key: &VoxelKey) -> Option<f64> {
        let cell = &self.cells[self.index(key)?];
        if cell.column_masked && cell.count == 0 {
            return Some(1.0);
        }
        (cell.count > 0).then(|| cell.sum as f64 / TSDF_FIXED_SCALE / cell.count as f64)
    }

    pub fn weight(&self, key: &VoxelKey) -> f64 {
        self.index(key).map_or(0.0, |i| self.cells[i].count as f64)
    }

    pub fn observed(&self, key: &VoxelKey) -> bool {
        self.index(key).is_some_and(|i| self.cells[i].observed)
    }

    pub fn column_masked(&self, key: &VoxelKey) -> bool {
        self.index(key).is_some_and(|i| self.cells[i].column_masked)
    }

    /// Occupied iff observed and strictly inside the truncation band.
    pub fn occupied(&self, key: &VoxelKey) -> bool {
        match self.index(key) {
            None => false,
            Some(i) => {
                let cell = &self.cells[i];
                if cell.column_masked && cell.count == 0 {
                    return false;
                }
                cell.observed
                    && cell.count > 0
                    && (cell.sum as f64 / TSDF_FIXED_SCALE / cell.count as f64).abs() < 1.0
            }
        }
    }

    /// Integrate one depth map. For every voxel projecting to a valid
    /// pixel with depth `d <= max_depth` and projective SDF
    /// `s = d - d_v > -t`, the clamped normalized SDF joins the running
    /// mean with unit weight. Voxels occluded beyond the truncation band
    /// (`s <= -t`) are untouched.
    pub fn integrate_depth(
        &mut self,
        depth: &DepthMap,
        k: &Intrinsics,
        pose: &Pose,
        max_depth: f64,
    ) {
        let t = self.truncation;
        for i in 0..self.dims[0] {
            for j in 0..self.dims[1] {
                for l in 0..self.dims[2] {
                    let key = VoxelKey::new(
                        self.key_min[0] + i as i32,
                        self.key_min[1] + j as i32,
                        self.key_min[2] + l as i32,
                    );
                    let center = self.voxel_center(&key);
                    let (u, v, d_v) = geom::project(k, pose, &center);
                    if d_v <= 0.0 {
                        continue;
                    }
                    let Some(d) = depth.sample_nearest(u, v) else {
                        continue;
                    };
                    if d > max_depth {
                        continue;
                    }
                    let s = d - d_v;
                    if s <= -t {
                        continue;
                    }
                    let norm = (s / t).clamp(-1.0, 1.0);
                    let idx = (i * self.dims[1] + j) * self.dims[2] + l;
                    let cell = &mut self.cells[idx];
                    cell.sum += (norm * TSDF_FIXED_SCALE).round() as i64;
                    cell.count += 1;
                    cell.observed = true;
                }
            }
        }
    }

    /// Mark every voxel of each fully-unobserved `(ix, iy)` column as
    /// unoccupied supervisable empty space (tsdf +1). Gravity is the grid
    /// z axis.
    pub fn mask_unobserved_columns(&mut self) {
        for i in 0..self.dims[0] {
            for j in 0..self.dims[1] {
                let col = |l: usize| (i * self.dims[1] + j) * self.dims[2] + l;
                let any_observed = (0..self.dims[2]).any(|l| self.cells[col(l)].observed);
                if !any_observed {
                    for l in 0..self.dims[2] {
                        self.cells[col(l)].column_masked = true;
                    }
                }
            }
        }
    }

    /// Keys of voxels carrying a value (observed or column-masked),
    /// sorted.
    pub fn defined_keys(&self) -> Vec<VoxelKey> {
        let mut out = Vec::new();
        for i in 0..self.dims[0] {
            for j in 0..self.dims[1] {
                for l in 0..self.dims[2] {
                    let idx = (i * self.dims[1] + j) * self.dims[2] + l;
                    let cell = &self.cells[idx];
                    if cell.observed || cell.column_masked {
                        out.push(VoxelKey::new(
                            self.key_min[0] + i as i32,
                            self.key_min[1] + j as i32,
                            self.key_min[2] + l as i32,
                        ));
                    }
                }
            }
        }
        out
    }

    /// All keys in bounds, sorted.
    pub fn all_keys(&self) -> Vec<VoxelKey> {
        let mut out = Vec::with_capacity(self.cells.len());
        for i in 0..self.dims[0] {
            for j in 0..self.dims[1] {
                for l in 0..self.dims[2] {
                    out.push(VoxelKey::new(
                        self.key_min[0] + i as i32,
                        self.key_min[1] + j as i32,
                        self.key_min[2] + l as i32,
                    ));
                }
            }
        }
        out
    }

    /// Sparse view of the defined voxels, for marching cubes and dumps.
    pub fn to_sparse(&self) -> SparseVoxelGrid<TsdfVoxel> {
        let mut out = SparseVoxelGrid::new(self.origin, self.level);
        for key in self.defined_keys() {
            out.insert(
                key,
                TsdfVoxel {
                    tsdf: self.tsdf(&key).unwrap(),
                    weight: self.weight(&key),
                    observed: self.observed(&key) || self.column_masked(&key),
                },
            );
        }
        out
    }

    /// Occupancy grid (occupied keys only).
    pub fn occupancy(&self) -> SparseVoxelGrid<bool> {
        let mut out = SparseVoxelGrid::new(self.origin, self.level);
        for key in self.defined_keys() {
            if self.occupied(&key) {
                out.insert(key, true);
            }
        }
        out
    }

    fn cell(&self, key: &VoxelKey) -> Option<&Cell> {
        self.index(key).map(|i| &self.cells[i])
    }
}

/// Ground-truth targets for one scene: fused fine TSDF plus the
/// dilation-downsampled occupancy at every level.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub fine: TsdfVolume,
    pub fine_occ: SparseVoxelGrid<bool>,
    pub medium_occ: SparseVoxelGrid<bool>,
    pub coarse_occ: SparseVoxelGrid<bool>,
}

/// Fuse all depth maps, apply the unobserved-column rule, and derive the
/// occupancy targets at every level.
pub fn make_gt(
    views: &[(Intrinsics, Pose, DepthMap)],
    bounds: &Aabb,
    truncation: f64,
) -> GroundTruth {
    let mut fine = TsdfVolume::new(bounds, Level::Fine, truncation);
    for (k, pose, depth) in views {
        fine.integrate_depth(depth, k, pose, MAX_DEPTH);
    }
    fine.mask_unobserved_columns();
    derive_targets(fine)
}

/// Occupancy targets from an already-fused fine volume.
pub fn derive_targets(fine: TsdfVolume) -> GroundTruth {
    let fine_occ = fine.occupancy();
    let medium_occ = downsample_occupancy(&fine_occ);
    let coarse_occ = downsample_occupancy(&medium_occ);
    GroundTruth { fine, fine_occ, medium_occ, coarse_occ }
}

/// Rigid-plus-reflection world transform tying a subcrop's voxel
/// relabeling to the camera poses.
#[derive(Debug, Clone)]
pub struct CropTransform {
    /// Quarter turns about the gravity axis through the crop center.
    pub rot_k: u8,
    /// Horizontal (x) reflection about the crop center plane, applied
    /// before the rotation.
    pub flip: bool,
    pub linear: Mat3,
    pub translation: Vec3,
}

impl CropTransform {
    pub fn identity() -> Self {
        CropTransform {
            rot_k: 0,
            flip: false,
            linear: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.linear * p + self.translation
    }

    /// Transform a world-from-camera pose. A reflection is absorbed by
    /// flipping the camera's x axis, keeping the pose proper; the
    /// matching image flip is reported by [`CropTransform::needs_image_flip`]
    /// and is exact when the principal point is centered
    /// (`cx = (width-1)/2`).
    pub fn apply_pose(&self, pose: &Pose) -> Pose {
        let mut rotation = self.linear * pose.rotation;
        if self.flip {
            // camera-frame x flip
            let f = Mat3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
            rotation *= f;
        }
        Pose {
            rotation,
            translation: self.linear * pose.translation + self.translation,
        }
    }

    pub fn needs_image_flip(&self) -> bool {
        self.flip
    }
}

/// One training subcrop: a transformed TSDF volume with its derived
/// occupancy targets and the world transform to apply to the cameras.
#[derive(Debug, Clone)]
pub struct Subcrop {
    pub gt: GroundTruth,
    pub transform: CropTransform,
}

/// Default subcrop footprint in fine voxels.
pub const CROP_SIZE: [usize; 3] = [96, 96, 48];

/// Extract a random augmented subcrop. The crop origin is uniform over
/// valid placements (clipped when the scene is smaller than the crop;
/// out-of-scene voxels stay unobserved). Augmentation is an optional
/// x-reflection plus a quarter-turn rotation about the gravity axis,
/// both exact on the lattice.
pub fn random_subcrop(
    fine: &TsdfVolume,
    crop_size: [usize; 3],
    rng: &mut impl Rng,
) -> Subcrop {
    assert_eq!(
        crop_size[0], crop_size[1],
        "rotation about the gravity axis needs a square horizontal footprint"
    );
    let dims = fine.dims();
    let key_min = fine.key_min();
    let mut crop_min = [0i32; 3];
    for a in 0..3 {
        let lo = key_min[a];
        let hi = key_min[a] + dims[a] as i32 - crop_size[a] as i32;
        crop_min[a] = if hi <= lo { lo } else { rng.gen_range(lo..=hi) };
    }
    let flip = rng.gen_bool(0.5);
    let rot_k = rng.gen_range(0u8..4);
    extract_subcrop(fine, crop_min, crop_size, flip, rot_k)
}

/// Deterministic subcrop extraction; exposed for tests.
pub fn extract_subcrop(
    fine: &TsdfVolume,
    crop_min: [i32; 3],
    crop_size: [usize; 3],
    flip: bool,
    rot_k: u8,
) -> Subcrop {
    let s = fine.level.voxel_size();
    let w = crop_size[0];

    // World transform matching the index relabeling below: reflection
    // about the crop-center x plane, then rot_k quarter turns about the
    // vertical axis through the crop center.
    let center = fine.origin
        + Vec3::new(
            (crop_min[0] as f64 + w as f64 / 2.0) * s,
            (crop_min[1] as f64 + crop_size[1] as f64 / 2.0) * s,
            0.0,
        );
    let rot = geom::rot_z_quarter(rot_k);
    let (lin_f, b_f) = if flip {
        (
            Mat3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0),
            Vec3::new(2.0 * center.x, 0.0, 0.0),
        )
    } else {
        (Mat3::identity(), Vec3::zeros())
    };
    let b_r = center - rot * center;
    let transform = CropTransform {
        rot_k,
        flip,
        linear: rot * lin_f,
        translation: rot * b_f + b_r,
    };

    // Output volume over the same crop window; out-voxel (i,j,k) sources
    // from the inverse index map.
    let crop_bounds = Aabb::new(
        fine.origin
            + Vec3::new(
                crop_min[0] as f64 * s,
                crop_min[1] as f64 * s,
                crop_min[2] as f64 * s,
            ),
        fine.origin
            + Vec3::new(
                (crop_min[0] as f64 + crop_size[0] as f64) * s,
                (crop_min[1] as f64 + crop_size[1] as f64) * s,
                (crop_min[2] as f64 + crop_size[2] as f64) * s,
            ),
    )
    .unwrap();
    let mut out = TsdfVolume::with_origin(fine.origin, &crop_bounds, fine.level, fine.truncation);

    for i in 0..crop_size[0] {
        for j in 0..crop_size[1] {
            // Invert: forward is flip then rot. Backward: un-rotate then
            // un-flip.
            let (mut si, mut sj) = (i, j);
            for _ in 0..rot_k {
                // inverse of (i,j) -> (w-1-j, i)
                let (pi, pj) = (sj, w - 1 - si);
                si = pi;
                sj = pj;
            }
            if flip {
                si = w - 1 - si;
            }
            for kk in 0..crop_size[2] {
                let src = VoxelKey::new(
                    crop_min[0] + si as i32,
                    crop_min[1] + sj as i32,
                    crop_min[2] + kk as i32,
                );
                let dst = VoxelKey::new(
                    crop_min[0] + i as i32,
                    crop_min[1] + j as i32,
                    crop_min[2] + kk as i32,
                );
                if let (Some(src_cell), Some(dst_idx)) = (fine.cell(&src), out.index(&dst)) {
                    out.cells[dst_idx] = *src_cell;
                }
            }
        }
    }
    Subcrop { gt: derive_targets(out), transform }
}


#[cfg(test)]
impl TsdfVolume {
    /// Test helper: key containing a world point.
    fn key_of_point_check(&self, p: &Vec3) -> VoxelKey {
        let s = self.level.voxel_size();
        VoxelKey::new(
            ((p.x - self.origin.x) / s).floor() as i32,
            ((p.y - self.origin.y) / s).floor() as i32,
            ((p.z - self.origin.z) / s).floor() as i32,
        )
    }
}
