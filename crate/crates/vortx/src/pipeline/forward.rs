//! Shared multi-view forward pass: backprojection of active voxels into
//! sampled views, transformer fusion, and the coarse-to-fine inference
//! loop ending in marching cubes.

use std::collections::BTreeMap;

use crate::feature::{self, FeaturePyramid, Image};
use crate::fuse_tsdf::DepthMap;
use crate::fusion::{fuse_voxels, AggregateMode, VoxelViewBatch};
use crate::geom::{self, Aabb, Intrinsics, Pose, Vec3, DEFAULT_DEPTH_RANGE};
use crate::grid::{expand_active, tile_volume, Level, SparseVoxelGrid, VoxelKey};
use crate::nn::{LeafSet, Scalar, Tape, Tensor};
use crate::projective::{self, Supervision};
use crate::sparse_cnn::{level_network, SparseFeatureMap};
use crate::surface::{marching_cubes, TriMesh};
use crate::error::Result;
use crate::fuse_tsdf::TsdfVoxel;

use super::{tile_seed, ModelBundle, PipelineConfig, Scene};

/// One view as seen by the forward pass: camera, feature image, and the
/// depth map when supervision targets are wanted.
pub struct ViewData {
    pub k: Intrinsics,
    pub pose: Pose,
    pub image: Image,
    pub depth: Option<DepthMap>,
}

/// Fused per-voxel features for one level, plus the per-view occupancy
/// logits and their supervision targets (voxel-major view order; mask 0
/// rows carry no signal).
pub struct LevelFusion<T: Scalar> {
    pub keys: Vec<VoxelKey>,
    /// (V, C) fused features in `keys` order.
    pub fused: Tensor<T>,
    /// (total_views, 1) occupancy logits.
    pub view_logits: Tensor<T>,
    pub proj_target: Vec<f64>,
    pub proj_mask: Vec<f64>,
}

fn voxel_center(origin: &Vec3, level: Level, key: &VoxelKey) -> Vec3 {
    let s = level.voxel_size();
    origin
        + Vec3::new(
            (key.ix as f64 + 0.5) * s,
            (key.iy as f64 + 0.5) * s,
            (key.iz as f64 + 0.5) * s,
        )
}

/// Backproject `keys` into the given views and fuse per voxel. Every
/// voxel consults the same candidate `view_ids`; views where it falls
/// behind the camera or outside the image are skipped.
pub fn fuse_level<T: Scalar>(
    leaves: &LeafSet<'_, T>,
    cfg: &PipelineConfig,
    level: Level,
    origin: &Vec3,
    keys: &[VoxelKey],
    views: &[ViewData],
    pyramids: &[FeaturePyramid<T>],
    view_ids: &[usize],
    mode: AggregateMode,
) -> LevelFusion<T> {
    assert_eq!(views.len(), pyramids.len());
    struct Obs {
        view: usize,
        uv: (f64, f64),
        dir: Vec3,
        depth: f64,
        target: f64,
        mask: f64,
    }
    let mut obs: Vec<Obs> = Vec::new();
    let mut counts = Vec::with_capacity(keys.len());
    for key in keys {
        let center = voxel_center(origin, level, key);
        let mut n = 0usize;
        for &j in view_ids {
            let view = &views[j];
            let Ok((dir, depth)) = geom::camera_to_voxel(&view.pose, &center) else {
                continue;
            };
            if depth <= 0.0 {
                continue;
            }
            let (u, v, _) = geom::project(&view.k, &view.pose, &center);
            if u < 0.0 || v < 0.0 || u >= view.k.width as f64 || v >= view.k.height as f64 {
                continue;
            }
            let (target, mask) = match &view.depth {
                Some(dm) => {
                    let s = projective::projective_sdf(dm, &view.k, &view.pose, &center);
                    let occ = projective::projective_occupancy(&s, cfg.truncation);
                    let vis = projective::visibility(&s, cfg.truncation);
                    match (occ.target(), vis) {
                        (Some(t), Supervision::Occupied) => (t, 1.0),
                        _ => (0.0, 0.0),
                    }
                }
                None => (0.0, 0.0),
            };
            obs.push(Obs { view: j, uv: (u, v), dir, depth, target, mask });
            n += 1;
        }
        counts.push(n);
    }

    let tape = leaves.tape();
    let c = cfg.fusion.channels_at(level);
    let features = if obs.is_empty() {
        tape.zeros(&[0, c])
    } else {
        // sample each view's queries in one differentiable batch, then
        // permute the concatenated rows back to voxel-major order
        let mut per_view: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, o) in obs.iter().enumerate() {
            per_view.entry(o.view).or_default().push(i);
        }
        let mut parts: Vec<Tensor<T>> = Vec::new();
        let mut row_of = vec![0usize; obs.len()];
        let mut next_row = 0usize;
        for (&view, members) in &per_view {
            let queries: Vec<(f64, f64)> = members.iter().map(|&i| obs[i].uv).collect();
            let (sampled, valid) = feature::sample_features(&pyramids[view], level, &queries);
            debug_assert!(valid.iter().all(|&v| v), "in-image queries sample validly");
            parts.push(sampled);
            for &i in members {
                row_of[i] = next_row;
                next_row += 1;
            }
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Tensor::concat(&refs, 0).gather_rows(&row_of)
    };

    let batch = VoxelViewBatch {
        features,
        dirs: obs.iter().map(|o| o.dir).collect(),
        depths: obs.iter().map(|o| o.depth).collect(),
        counts,
    };
    let out = fuse_voxels(leaves, level, &cfg.fusion, &batch, mode);
    LevelFusion {
        keys: keys.to_vec(),
        fused: out.fused,
        view_logits: out.logits,
        proj_target: obs.iter().map(|o| o.target).collect(),
        proj_mask: obs.iter().map(|o| o.mask).collect(),
    }
}

/// All coarse voxels whose centers lie inside the scene bounds, with the
/// lattice anchored at `bounds.min`.
pub fn coarse_cover(bounds: &Aabb) -> Vec<VoxelKey> {
    let s = Level::Coarse.voxel_size();
    let e = bounds.extent();
    let n = [
        (e.x / s).ceil().max(1.0) as i32,
        (e.y / s).ceil().max(1.0) as i32,
        (e.z / s).ceil().max(1.0) as i32,
    ];
    let mut keys = Vec::with_capacity((n[0] * n[1] * n[2]) as usize);
    for i in 0..n[0] {
        for j in 0..n[1] {
            for k in 0..n[2] {
                keys.push(VoxelKey::new(i, j, k));
            }
        }
    }
    keys
}

/// Inference voxel budget per tape; bounds peak memory, not results.
const INFER_CHUNK: usize = 512;

/// One level's fused features over an arbitrary active set, computed tile
/// by tile with per-tile view sampling and chunked tapes. Returns the
/// per-voxel feature vectors; voxels observed by zero views get zeros.
pub fn level_features(
    bundle: &ModelBundle,
    views: &[ViewData],
    bounds: &Aabb,
    level: Level,
    keys: &[VoxelKey],
    tile_size: f64,
    seed: u64,
) -> Result<BTreeMap<VoxelKey, Vec<f64>>> {
    let cfg = &bundle.config;
    let plan = tile_volume(bounds, tile_size)?;
    let kf_cams: Vec<(Intrinsics, Pose)> =
        views.iter().map(|v| (v.k, v.pose.clone())).collect();
    let mut out = BTreeMap::new();
    let c = cfg.fusion.channels_at(level);
    for tile in &plan.tiles {
        let tile_keys: Vec<VoxelKey> = keys
            .iter()
            .copied()
            .filter(|k| {
                let p = voxel_center(&bounds.min, level, k);
                let mn = &tile.bounds.min;
                let mx = &tile.bounds.max;
                // half-open ownership; the topmost tile keeps its far face
                (0..3).all(|a| {
                    p[a] >= mn[a] && (p[a] < mx[a] || (p[a] <= mx[a] && mx[a] >= bounds.max[a]))
                })
            })
            .collect();
        if tile_keys.is_empty() {
            continue;
        }
        let sampled = geom::sample_views(
            &kf_cams,
            &tile.bounds,
            DEFAULT_DEPTH_RANGE,
            cfg.n_test.max(1),
            tile_seed(seed, tile.coords),
        );
        if sampled.is_empty() {
            for k in tile_keys {
                out.insert(k, vec![0.0; c]);
            }
            continue;
        }
        for chunk in tile_keys.chunks(INFER_CHUNK) {
            let tape = Tape::<f32>::new();
            let leaves = LeafSet::new(&bundle.store, &tape);
            let pyramids: Vec<FeaturePyramid<f32>> = views
                .iter()
                .map(|v| feature::extract(&leaves, &v.image))
                .collect();
            let fusion = fuse_level(
                &leaves,
                cfg,
                level,
                &bounds.min,
                chunk,
                views,
                &pyramids,
                &sampled,
                AggregateMode::OccupancyWeighted,
            );
            let vals = fusion.fused.value_f64();
            for (i, k) in chunk.iter().enumerate() {
                out.insert(*k, vals[i * c..(i + 1) * c].to_vec());
            }
        }
    }
    Ok(out)
}

/// Run the level's sparse CNN globally over fused features; returns the
/// per-voxel head output (occupancy logit, or normalized TSDF at fine).
fn global_head(
    bundle: &ModelBundle,
    level: Level,
    features: &BTreeMap<VoxelKey, Vec<f64>>,
) -> Vec<(VoxelKey, f64)> {
    if features.is_empty() {
        return Vec::new();
    }
    let cfg = &bundle.config;
    let c = cfg.fusion.channels_at(level);
    let keys: Vec<VoxelKey> = features.keys().copied().collect();
    let mut flat = Vec::with_capacity(keys.len() * c);
    for v in features.values() {
        flat.extend_from_slice(v);
    }
    let tape = Tape::<f32>::new();
    let leaves = LeafSet::new(&bundle.store, &tape);
    let input = SparseFeatureMap::new(
        keys.clone(),
        tape.constant_f64(&flat, &[keys.len(), c]),
    );
    let head = level_network(&leaves, level, &cfg.cnn, &input, None);
    keys.into_iter().zip(head.value_f64()).collect()
}

/// Coarse-to-fine reconstruction of one scene. Keyframe selection, tiled
/// fusion, global sparse CNN per level, hierarchy expansion, and a final
/// marching-cubes pass over the predicted fine TSDF.
pub fn reconstruct(scene: &Scene, bundle: &ModelBundle, seed: u64) -> Result<TriMesh> {
    let cfg = &bundle.config;
    let kf = geom::select_keyframes(&scene.poses(), cfg.r_max_deg, cfg.t_max_test);
    let views: Vec<ViewData> = kf
        .iter()
        .map(|&i| ViewData {
            k: scene.intrinsics,
            pose: scene.frames[i].pose.clone(),
            image: scene.frames[i].feature_image(),
            depth: None,
        })
        .collect();
    if views.is_empty() {
        return Ok(TriMesh::default());
    }
    let bounds = scene.bounds;
    let mut active = coarse_cover(&bounds);
    for level in [Level::Coarse, Level::Medium] {
        if active.is_empty() {
            return Ok(TriMesh::default());
        }
        let fmv = level_features(bundle, &views, &bounds, level, &active, cfg.tile_size, seed)?;
        let logits = global_head(bundle, level, &fmv);
        let mut probs = SparseVoxelGrid::new(bounds.min, level);
        for (key, x) in logits {
            probs.insert(key, 1.0 / (1.0 + (-x).exp()));
        }
        let next = expand_active(&probs, cfg.occupancy_threshold);
        let fine_level = level.finer().unwrap();
        active = next
            .keys_sorted()
            .into_iter()
            .filter(|k| bounds.contains(&voxel_center(&bounds.min, fine_level, k)))
            .collect();
    }
    if active.is_empty() {
        return Ok(TriMesh::default());
    }
    let fmv =
        level_features(bundle, &views, &bounds, Level::Fine, &active, cfg.tile_size, seed)?;
    let tsdf_pred = global_head(bundle, Level::Fine, &fmv);
    let mut grid = SparseVoxelGrid::new(bounds.min, Level::Fine);
    for (key, s) in tsdf_pred {
        grid.insert(key, TsdfVoxel { tsdf: s, weight: 1.0, observed: true });
    }
    Ok(marching_cubes(&grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{synth_scene, SceneObject, SceneSpec, TrajectorySpec};
    use crate::surface::write_mesh;

    fn tiny_scene(dir: &std::path::Path) -> Scene {
        let spec = SceneSpec {
            room: [2.4, 2.4, 1.6],
            objects: vec![SceneObject::Sphere { center: [1.2, 1.2, 0.5], radius: 0.35 }],
            trajectory: TrajectorySpec {
                n_frames: 10,
                radius: 0.55,
                height: 1.0,
                deg_per_frame: 36.0,
            },
            image_size: [48, 48],
            focal: 40.0,
        };
        synth_scene(&spec, dir).unwrap();
        super::super::load_scene(dir).unwrap()
    }

    fn small_config() -> PipelineConfig {
        PipelineConfig::from_json(r#"{"n_test": 6, "tile_size": 1.3}"#).unwrap()
    }

    #[test]
    fn untrained_model_reconstructs_without_error() {
        let dir = tempfile::tempdir().unwrap();
        let scene = tiny_scene(dir.path());
        let bundle = ModelBundle::init(small_config(), 11);
        let mesh = reconstruct(&scene, &bundle, 0).unwrap();
        // totality only; an untrained model may output any mesh
        let out = dir.path().join("mesh.ply");
        write_mesh(&mesh, &out).unwrap();
        assert!(out.exists());
    }

    #[test]
    fn tile_size_does_not_change_fused_features() {
        // with fewer keyframes than the sampling budget, every tile takes
        // all of its candidate views, so per-voxel view sets are equal
        // regardless of the tiling
        let dir = tempfile::tempdir().unwrap();
        let scene = tiny_scene(dir.path());
        let mut cfg = small_config();
        cfg.n_test = 64;
        let bundle = ModelBundle::init(cfg, 5);
        let views: Vec<ViewData> = scene
            .frames
            .iter()
            .map(|f| ViewData {
                k: scene.intrinsics,
                pose: f.pose.clone(),
                image: f.feature_image(),
                depth: None,
            })
            .collect();
        let keys = coarse_cover(&scene.bounds);
        let one = level_features(
            &bundle, &views, &scene.bounds, Level::Coarse, &keys, 10.0, 3,
        )
        .unwrap();
        let four = level_features(
            &bundle, &views, &scene.bounds, Level::Coarse, &keys, 1.2, 3,
        )
        .unwrap();
        assert_eq!(one.len(), four.len());
        let mut max_diff = 0.0f64;
        for (k, a) in &one {
            let b = &four[k];
            for (x, y) in a.iter().zip(b) {
                max_diff = max_diff.max((x - y).abs());
            }
        }
        assert!(max_diff < 1e-5, "tiling changed F_MV by {max_diff}");
    }

    #[test]
    fn zero_view_voxels_fuse_to_zero() {
        let dir = tempfile::tempdir().unwrap();
        let scene = tiny_scene(dir.path());
        let bundle = ModelBundle::init(small_config(), 7);
        // a single camera looking at the sphere: voxels behind it see
        // zero views and must come out exactly zero
        let views = vec![ViewData {
            k: scene.intrinsics,
            pose: scene.frames[0].pose.clone(),
            image: scene.frames[0].feature_image(),
            depth: None,
        }];
        let keys = coarse_cover(&scene.bounds);
        let fmv = level_features(
            &bundle, &views, &scene.bounds, Level::Coarse, &keys, 10.0, 0,
        )
        .unwrap();
        let cam = scene.frames[0].pose.center();
        let behind: Vec<&VoxelKey> = keys
            .iter()
            .filter(|k| {
                let c = voxel_center(&scene.bounds.min, Level::Coarse, k);
                scene.frames[0].pose.world_to_camera(&c).z < -0.2
            })
            .collect();
        assert!(!behind.is_empty(), "camera at {cam:?} should have voxels behind it");
        for k in behind {
            assert!(fmv[k].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn reconstruction_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let scene = tiny_scene(dir.path());
        let bundle = ModelBundle::init(small_config(), 2);
        let a = reconstruct(&scene, &bundle, 9).unwrap();
        let b = reconstruct(&scene, &bundle, 9).unwrap();
        let pa = dir.path().join("a.ply");
        let pb = dir.path().join("b.ply");
        write_mesh(&a, &pa).unwrap();
        write_mesh(&b, &pb).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    }
}
