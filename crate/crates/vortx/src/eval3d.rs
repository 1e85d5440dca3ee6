//! Mesh evaluation: render-and-mask trimming followed by 3D
//! accuracy/completeness/precision/recall/F-score.
//!
//! Depth rendering is exact per-pixel ray casting over a BVH, so no
//! rasterization quantization enters the trimming protocol.

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fuse_tsdf::{DepthMap, TsdfVolume, DEFAULT_TRUNCATION, MAX_DEPTH};
use crate::geom::{Aabb, Intrinsics, Pose};
use crate::grid::Level;
use crate::surface::{marching_cubes, TriMesh};

type Vec3 = Vector3<f64>;

pub const DEFAULT_TAU: f64 = 0.05;
/// Surface sampling density: 1 point per cm^2.
pub const POINTS_PER_M2: f64 = 10_000.0;
const RAY_EPS: f64 = 1e-9;

/// Evaluation summary; distances in meters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: f64,
    pub comp: f64,
    pub prec: f64,
    pub recall: f64,
    pub fscore: f64,
    pub tau: f64,
    pub n_pred_points: usize,
    pub n_gt_points: usize,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric report serializes")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

struct BvhNode {
    bounds_min: Vec3,
    bounds_max: Vec3,
    /// Leaf: triangle range into `order`; inner: child indices.
    content: NodeContent,
}

enum NodeContent {
    Leaf { start: usize, len: usize },
    Inner { left: usize, right: usize },
}

/// Bounding volume hierarchy over mesh triangles for ray casting.
pub struct Bvh<'a> {
    mesh: &'a TriMesh,
    nodes: Vec<BvhNode>,
    order: Vec<usize>,
}

const LEAF_SIZE: usize = 8;

impl<'a> Bvh<'a> {
    pub fn build(mesh: &'a TriMesh) -> Self {
        let mut order: Vec<usize> = (0..mesh.triangles.len()).collect();
        let centroids: Vec<Vec3> = mesh
            .triangles
            .iter()
            .map(|t| {
                (mesh.vertices[t[0] as usize]
                    + mesh.vertices[t[1] as usize]
                    + mesh.vertices[t[2] as usize])
                    / 3.0
            })
            .collect();
        let mut nodes = Vec::new();
        if !order.is_empty() {
            build_node(mesh, &centroids, &mut order, 0, mesh.triangles.len(), &mut nodes);
        }
        Bvh { mesh, nodes, order }
    }

    /// Depth (ray parameter) of the nearest hit with t > eps, if any.
    pub fn cast(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv = Vec3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut best = f64::INFINITY;
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            if !slab_hit(&node.bounds_min, &node.bounds_max, origin, &inv, best) {
                continue;
            }
            match node.content {
                NodeContent::Leaf { start, len } => {
                    for &ti in &self.order[start..start + len] {
                        let t = self.mesh.triangles[ti];
                        if let Some(hit) = ray_triangle(
                            origin,
                            dir,
                            &self.mesh.vertices[t[0] as usize],
                            &self.mesh.vertices[t[1] as usize],
                            &self.mesh.vertices[t[2] as usize],
                        ) {
                            if hit < best {
                                best = hit;
                            }
                        }
                    }
                }
                NodeContent::Inner { left, right } => {
                    stack.push(left);
                    stack.push(right);
                }
            }
        }
        (best < f64::INFINITY).then_some(best)
    }
}

fn build_node(
    mesh: &TriMesh,
    centroids: &[Vec3],
    order: &mut [usize],
    start: usize,
    len: usize,
    nodes: &mut Vec<BvhNode>,
) -> usize {
    let slice = &order[..len];
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for &ti in slice {
        for &vi in &mesh.triangles[ti] {
            let v = &mesh.vertices[vi as usize];
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
    }
    let idx = nodes.len();
    nodes.push(BvhNode {
        bounds_min: lo,
        bounds_max: hi,
        content: NodeContent::Leaf { start, len },
    });
    if len <= LEAF_SIZE {
        return idx;
    }
    let extent = hi - lo;
    let axis = if extent.x >= extent.y && extent.x >= extent.z {
        0
    } else if extent.y >= extent.z {
        1
    } else {
        2
    };
    let mid = len / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        centroids[a][axis]
            .partial_cmp(&centroids[b][axis])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let (left_slice, right_slice) = order.split_at_mut(mid);
    let left = build_node(mesh, centroids, left_slice, start, mid, nodes);
    let right = build_node(mesh, centroids, right_slice, start + mid, len - mid, nodes);
    nodes[idx].content = NodeContent::Inner { left, right };
    idx
}

fn slab_hit(lo: &Vec3, hi: &Vec3, origin: &Vec3, inv_dir: &Vec3, t_best: f64) -> bool {
    let mut t_min = RAY_EPS;
    let mut t_max = t_best;
    for a in 0..3 {
        let t0 = (lo[a] - origin[a]) * inv_dir[a];
        let t1 = (hi[a] - origin[a]) * inv_dir[a];
        let (t0, t1) = if t0 <= t1 { (t0, t1) } else { (t1, t0) };
        t_min = t_min.max(t0);
        t_max = t_max.min(t1);
        if t_min > t_max {
            return false;
        }
    }
    true
}

/// Moller-Trumbore intersection; returns the ray parameter of a hit
/// with t > eps.
fn ray_triangle(origin: &Vec3, dir: &Vec3, v0: &Vec3, v1: &Vec3, v2: &Vec3) -> Option<f64> {
    let e1 = v1 - v0;
    let e2 = v2 - v0;
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < RAY_EPS {
        return None;
    }
    let inv_det = 1.0 / det;
    let s = origin - v0;
    let u = s.dot(&p) * inv_det;
    if !(-RAY_EPS..=1.0 + RAY_EPS).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv_det;
    if v < -RAY_EPS || u + v > 1.0 + RAY_EPS {
        return None;
    }
    let t = e2.dot(&q) * inv_det;
    (t > RAY_EPS).then_some(t)
}

/// Render the mesh into a z-depth map from one camera; 0 where no hit.
pub fn render_depth(mesh: &TriMesh, k: &Intrinsics, pose: &Pose) -> DepthMap {
    let bvh = Bvh::build(mesh);
    let mut map = DepthMap::new(k.width, k.height);
    let origin = pose.translation;
    let rows: Vec<Vec<f64>> = (0..k.height)
        .into_par_iter()
        .map(|v| {
            let mut row = vec![0.0; k.width];
            for (u, out) in row.iter_mut().enumerate() {
                // dir_cam.z = 1, so the ray parameter equals z-depth
                let dir_cam = Vec3::new(
                    (u as f64 - k.cx) / k.fx,
                    (v as f64 - k.cy) / k.fy,
                    1.0,
                );
                let dir = pose.rotation * dir_cam;
                if let Some(t) = bvh.cast(&origin, &dir) {
                    *out = t;
                }
            }
            row
        })
        .collect();
    for (v, row) in rows.into_iter().enumerate() {
        for (u, d) in row.into_iter().enumerate() {
            map.data[v * k.width + u] = d;
        }
    }
    map
}

/// Restrict a predicted mesh to regions observed by the ground truth:
/// render both, keep predicted depth only where the ground-truth render
/// is valid, and re-fuse the masked depth into a fine-level mesh.
pub fn trim_mesh(pred: &TriMesh, gt: &TriMesh, cameras: &[(Intrinsics, Pose)]) -> TriMesh {
    if cameras.is_empty() || pred.is_empty() || gt.is_empty() {
        return TriMesh::default();
    }
    let bounds = mesh_bounds(gt)
        .union(&mesh_bounds(pred))
        .padded(2.0 * DEFAULT_TRUNCATION);
    let mut volume = TsdfVolume::new(&bounds, Level::Fine, DEFAULT_TRUNCATION);
    for (k, pose) in cameras {
        let gt_depth = render_depth(gt, k, pose);
        let mut pred_depth = render_depth(pred, k, pose);
        for (pd, &gd) in pred_depth.data.iter_mut().zip(&gt_depth.data) {
            if gd <= 0.0 {
                *pd = 0.0;
            }
        }
        volume.integrate_depth(&pred_depth, k, pose, MAX_DEPTH);
    }
    marching_cubes(&volume.to_sparse())
}

fn mesh_bounds(mesh: &TriMesh) -> Aabb {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for v in &mesh.vertices {
        lo = lo.inf(v);
        hi = hi.sup(v);
    }
    Aabb { min: lo, max: hi }
}

/// Uniform surface samples at `density` points per square meter, plus
/// every vertex. Deterministic for a given seed.
pub fn sample_surface(mesh: &TriMesh, density: f64, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points: Vec<Vec3> = mesh.vertices.clone();
    for t in &mesh.triangles {
        let (a, b, c) = (
            mesh.vertices[t[0] as usize],
            mesh.vertices[t[1] as usize],
            mesh.vertices[t[2] as usize],
        );
        let area = 0.5 * (b - a).cross(&(c - a)).norm();
        let expect = area * density;
        let n = expect.floor() as usize
            + if rng.gen_bool((expect - expect.floor()).clamp(0.0, 1.0)) {
                1
            } else {
                0
            };
        for _ in 0..n {
            let (mut r1, mut r2) = (rng.gen::<f64>(), rng.gen::<f64>());
            if r1 + r2 > 1.0 {
                r1 = 1.0 - r1;
                r2 = 1.0 - r2;
            }
            points.push(a + (b - a) * r1 + (c - a) * r2);
        }
    }
    points
}

/// Uniform-cell spatial index for nearest-neighbor distance queries.
pub struct PointIndex {
    cell: f64,
    cells: std::collections::HashMap<(i64, i64, i64), Vec<Vec3>>,
}

impl PointIndex {
    pub fn build(points: &[Vec3], cell: f64) -> Self {
        assert!(cell > 0.0);
        let mut cells: std::collections::HashMap<(i64, i64, i64), Vec<Vec3>> =
            std::collections::HashMap::new();
        for p in points {
            cells.entry(Self::key(p, cell)).or_default().push(*p);
        }
        PointIndex { cell, cells }
    }

    fn key(p: &Vec3, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Exact distance to the nearest indexed point; infinity if empty.
    pub fn nearest_distance(&self, q: &Vec3) -> f64 {
        if self.cells.is_empty() {
            return f64::INFINITY;
        }
        let center = Self::key(q, self.cell);
        let mut best = f64::INFINITY;
        let mut ring = 0i64;
        loop {
            // points in ring r are at least (r-1)*cell away; once a hit
            // is closer than that bound, no farther ring can beat it
            if best.is_finite() && best <= (ring - 1).max(0) as f64 * self.cell {
                return best;
            }
            let mut any_cell = false;
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let key = (center.0 + dx, center.1 + dy, center.2 + dz);
                        if let Some(pts) = self.cells.get(&key) {
                            any_cell = true;
                            for p in pts {
                                best = best.min((p - q).norm());
                            }
                        }
                    }
                }
            }
            let _ = any_cell;
            ring += 1;
            // safety: beyond the index extent plus current best, stop
            if ring as f64 * self.cell > 1e6 {
                return best;
            }
        }
    }
}

/// Accuracy, completeness, precision, recall, and F-score at `tau`.
pub fn metrics(pred: &TriMesh, gt: &TriMesh, tau: f64, seed: u64) -> MetricReport {
    let pred_pts = sample_surface(pred, POINTS_PER_M2, seed);
    let gt_pts = sample_surface(gt, POINTS_PER_M2, seed);
    metrics_on_points(&pred_pts, &gt_pts, tau)
}

/// Metrics over explicit point sets; used by tests and `metrics`.
pub fn metrics_on_points(pred_pts: &[Vec3], gt_pts: &[Vec3], tau: f64) -> MetricReport {
    let cell = tau.max(0.01);
    let gt_index = PointIndex::build(gt_pts, cell);
    let pred_index = PointIndex::build(pred_pts, cell);
    let d_pred: Vec<f64> = pred_pts
        .par_iter()
        .map(|p| gt_index.nearest_distance(p))
        .collect();
    let d_gt: Vec<f64> = gt_pts
        .par_iter()
        .map(|p| pred_index.nearest_distance(p))
        .collect();
    let mean = |d: &[f64]| {
        if d.is_empty() {
            f64::INFINITY
        } else {
            d.iter().sum::<f64>() / d.len() as f64
        }
    };
    let frac = |d: &[f64]| {
        if d.is_empty() {
            0.0
        } else {
            d.iter().filter(|&&x| x < tau).count() as f64 / d.len() as f64
        }
    };
    let (prec, recall) = (frac(&d_pred), frac(&d_gt));
    let fscore = if prec + recall > 0.0 {
        2.0 * prec * recall / (prec + recall)
    } else {
        0.0
    };
    MetricReport {
        acc: mean(&d_pred),
        comp: mean(&d_gt),
        prec,
        recall,
        fscore,
        tau,
        n_pred_points: pred_pts.len(),
        n_gt_points: gt_pts.len(),
    }
}
