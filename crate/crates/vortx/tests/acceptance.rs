//! Acceptance gate: one test per release criterion. Each prints a single
//! PASS line on success (visible with `--nocapture`); tolerances are
//! asserted, so a failing criterion fails the test.

use std::time::Instant;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vortx::fuse_tsdf::{DepthMap, TsdfVolume, TsdfVoxel, MAX_DEPTH};
use vortx::fusion::{
    aggregate, build_tokens, fuse_voxels, init_fusion_params, occupancy_logits,
    transformer_encode, AggregateMode, FusionConfig, VoxelViewBatch,
};
use vortx::geom::{look_at_from, select_keyframes, Aabb, Intrinsics, Pose, Vec3};
use vortx::grid::{Level, SparseVoxelGrid, VoxelKey};
use vortx::nn::{LeafSet, ParamStore, Tape};
use vortx::projective::{projective_occupancy, projective_sdf, visibility, Supervision};
use vortx::sparse_cnn::{sparse_conv3, SparseFeatureMap};
use vortx::surface::{marching_cubes, TriMesh};
use vortx::{eval3d, pipeline};

const TRUNCATION: f64 = 0.12;

fn fibonacci_dirs(n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|i| {
            let t = (i as f64 + 0.5) / n as f64;
            let phi = (1.0 - 2.0 * t).acos();
            let theta = std::f64::consts::PI * (1.0 + 5.0f64.sqrt()) * i as f64;
            Vector3::new(
                phi.sin() * theta.cos(),
                phi.sin() * theta.sin(),
                phi.cos(),
            )
        })
        .collect()
}

/// Analytic z-depth map of a sphere; pixels off the sphere are invalid.
fn sphere_depth(k: &Intrinsics, pose: &Pose, center: &Vec3, radius: f64) -> DepthMap {
    let eye = pose.center();
    let mut depth = DepthMap::new(k.width, k.height);
    for v in 0..k.height {
        for u in 0..k.width {
            let d_cam = Vector3::new(
                (u as f64 - k.cx) / k.fx,
                (v as f64 - k.cy) / k.fy,
                1.0,
            );
            let d_world = (pose.camera_to_world(&d_cam) - eye).normalize();
            let oc = eye - center;
            let b = oc.dot(&d_world);
            let disc = b * b - (oc.norm_squared() - radius * radius);
            if disc > 0.0 {
                let t_hit = -b - disc.sqrt();
                if t_hit > 0.0 {
                    let p = eye + d_world * t_hit;
                    depth.set(u, v, pose.world_to_camera(&p).z);
                }
            }
        }
    }
    depth
}

/// Sphere TSDF fused from 40 analytic close-in views.
fn fused_sphere() -> (TsdfVolume, Vec3, f64) {
    let center = Vector3::new(0.0, 0.0, 0.0);
    let radius = 0.5;
    let k = Intrinsics::new(110.0, 110.0, 63.5, 63.5, 128, 128).unwrap();
    let bounds = Aabb::new(
        center - Vector3::repeat(radius + 3.0 * TRUNCATION),
        center + Vector3::repeat(radius + 3.0 * TRUNCATION),
    )
    .unwrap();
    let mut volume = TsdfVolume::new(&bounds, Level::Fine, TRUNCATION);
    for dir in fibonacci_dirs(40) {
        let pose = look_at_from(center + dir * 0.8, center);
        let depth = sphere_depth(&k, &pose, &center, radius);
        volume.integrate_depth(&depth, &k, &pose, MAX_DEPTH);
    }
    (volume, center, radius)
}

#[test]
fn criterion_01_projective_oracle() {
    let start = Instant::now();
    let k = Intrinsics::new(70.0, 65.0, 31.0, 32.5, 64, 64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut depth = DepthMap::new(k.width, k.height);
    for v in 0..k.height {
        for u in 0..k.width {
            // mix of invalid, near, and beyond-cutoff depths
            let d = match rng.gen_range(0u32..10) {
                0 => 0.0,
                1 => rng.gen_range(3.01..6.0),
                _ => rng.gen_range(0.3..2.9),
            };
            depth.set(u, v, d);
        }
    }
    for case in 0..10_000 {
        let pose = look_at_from(
            Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            ),
            Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 2.0),
        );
        let p = Vector3::new(
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-1.0..4.0),
        );
        let sample = projective_sdf(&depth, &k, &pose, &p);

        // independent brute-force: project, round, bounds-check, classify
        let pc = pose.rotation.transpose() * (p - pose.translation);
        let expect_occ;
        let expect_vis;
        if pc.z <= 0.0 {
            expect_occ = Supervision::Unsupervised;
            expect_vis = Supervision::Unsupervised;
        } else {
            let u = (k.fx * pc.x / pc.z + k.cx).round();
            let v = (k.fy * pc.y / pc.z + k.cy).round();
            let in_img =
                u >= 0.0 && v >= 0.0 && (u as usize) < k.width && (v as usize) < k.height;
            let d = if in_img { depth.get(u as usize, v as usize) } else { 0.0 };
            if d <= 0.0 || d > 3.0 {
                expect_occ = Supervision::Unsupervised;
                expect_vis = Supervision::Unsupervised;
            } else {
                let s = d - pc.z;
                expect_occ = if s.abs() < TRUNCATION {
                    Supervision::Occupied
                } else {
                    Supervision::Empty
                };
                expect_vis = if s > -TRUNCATION {
                    Supervision::Occupied
                } else {
                    Supervision::Empty
                };
            }
        }
        assert_eq!(
            projective_occupancy(&sample, TRUNCATION),
            expect_occ,
            "occupancy mismatch at case {case}"
        );
        assert_eq!(
            visibility(&sample, TRUNCATION),
            expect_vis,
            "visibility mismatch at case {case}"
        );
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 10.0, "oracle check took {secs:.1} s");
    println!("criterion 1 (projective oracle, 10000 cases, {secs:.1} s): PASS");
}

#[test]
fn criterion_02_tsdf_sphere_accuracy() {
    let start = Instant::now();
    let (volume, center, radius) = fused_sphere();
    let mut sum = 0.0;
    let mut n = 0usize;
    for key in volume.defined_keys() {
        let p = volume.voxel_center(&key);
        let sdf = (p - center).norm() - radius;
        if sdf.abs() < 0.5 * TRUNCATION {
            sum += (volume.tsdf(&key).unwrap() * TRUNCATION - sdf).abs();
            n += 1;
        }
    }
    let mean = sum / n as f64;
    let secs = start.elapsed().as_secs_f64();
    assert!(n > 3000, "band only has {n} voxels");
    assert!(mean < 0.02, "mean fusion error {mean:.4} m over {n} voxels");
    assert!(secs < 60.0, "fusion took {secs:.1} s");
    println!("criterion 2 (TSDF sphere mean error {mean:.4} m, {secs:.1} s): PASS");
}

#[test]
fn criterion_03_marching_cubes_sphere() {
    let center = Vector3::new(0.0, 0.0, 0.0);
    let radius = 0.5;
    let origin = Vector3::repeat(-0.8);
    let mut grid = SparseVoxelGrid::new(origin, Level::Fine);
    let n = (1.6 / Level::Fine.voxel_size()).round() as i32;
    for ix in 0..n {
        for iy in 0..n {
            for iz in 0..n {
                let key = VoxelKey::new(ix, iy, iz);
                let sdf = (grid.voxel_center(&key) - center).norm() - radius;
                grid.insert(
                    key,
                    TsdfVoxel {
                        tsdf: (sdf / TRUNCATION).clamp(-1.0, 1.0),
                        weight: 1.0,
                        observed: true,
                    },
                );
            }
        }
    }
    let mesh = marching_cubes(&grid);
    assert!(!mesh.is_empty());
    let within = mesh
        .vertices
        .iter()
        .filter(|v| ((*v - center).norm() - radius).abs() < 0.02)
        .count();
    let frac = within as f64 / mesh.vertices.len() as f64;
    assert!(frac >= 0.99, "only {:.4} of vertices within 2 cm", frac);
    assert!(mesh.is_watertight(), "mesh is not watertight");
    println!(
        "criterion 3 (marching cubes: {:.1}% vertices in band, watertight): PASS",
        frac * 100.0
    );
}

#[test]
fn criterion_04_fusion_invariants() {
    let cfg = FusionConfig::default();
    let level = Level::Medium;
    let c = cfg.channels_at(level);
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut store = ParamStore::new();
    init_fusion_params(&mut store, &cfg, &mut rng);

    for trial in 0..100 {
        let n = rng.gen_range(1..=16usize);
        let feats: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dirs: Vec<Vector3<f64>> = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
                .normalize()
            })
            .collect();
        let depths: Vec<f64> = (0..n).map(|_| rng.gen_range(0.3..4.5)).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);

        let tape = Tape::<f64>::new();
        let leaves = LeafSet::new(&store, &tape);
        let base = fuse_voxels(
            &leaves,
            level,
            &cfg,
            &VoxelViewBatch {
                features: tape.constant_f64(&feats, &[n, c]),
                dirs: dirs.clone(),
                depths: depths.clone(),
                counts: vec![n],
            },
            AggregateMode::OccupancyWeighted,
        );
        let perm_feats: Vec<f64> = order
            .iter()
            .flat_map(|&i| feats[i * c..(i + 1) * c].to_vec())
            .collect();
        let perm = fuse_voxels(
            &leaves,
            level,
            &cfg,
            &VoxelViewBatch {
                features: tape.constant_f64(&perm_feats, &[n, c]),
                dirs: order.iter().map(|&i| dirs[i]).collect(),
                depths: order.iter().map(|&i| depths[i]).collect(),
                counts: vec![n],
            },
            AggregateMode::OccupancyWeighted,
        );
        let max_diff = base
            .fused
            .value_f64()
            .iter()
            .zip(perm.fused.value_f64())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-5, "trial {trial}: permutation delta {max_diff:.2e}");

        // weights sum to 1 per voxel, and an all -30 logit drives the
        // fused feature to the zero slot
        let tokens = build_tokens(&leaves, level, &cfg, &tape.constant_f64(&feats, &[n, c]), &dirs, &depths);
        let f_tilde = transformer_encode(&leaves, level, &cfg, &tokens.reshape(&[1, n, c]));
        let encoded = f_tilde.reshape(&[n, c]);
        let logits = occupancy_logits(&leaves, level, &encoded);
        let (_, weights) = aggregate(&f_tilde, &logits.reshape(&[1, n]));
        let sum: f64 = weights.value_f64().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6, "weights sum {sum}");

        let low = tape.constant_f64(&vec![-30.0; n], &[1, n]);
        let (fused, _) = aggregate(&f_tilde, &low);
        let max_token = encoded
            .value_f64()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let max_fused = fused.value_f64().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(
            max_fused < 1e-6 * max_token.max(1.0),
            "all -30 logits: fused {max_fused:.2e} vs token {max_token:.2e}"
        );
    }
    println!("criterion 4 (fusion invariants, 100 trials): PASS");
}

#[test]
fn criterion_05_gradient_checks() {
    let start = Instant::now();
    let results = vortx::diagnostics::gradcheck_suites(None);
    for r in &results {
        assert!(
            r.report.passed(),
            "suite {} failed: max rel err {:.2e}",
            r.name,
            r.report.max_rel_err
        );
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 300.0, "gradcheck took {secs:.1} s");
    println!(
        "criterion 5 (gradient checks, {} suites, {secs:.1} s): PASS",
        results.len()
    );
}

#[test]
fn criterion_06_sparse_conv_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let c_in = 3;
    let c_out = 2;
    for grid_i in 0..50 {
        let mut keys = Vec::new();
        for ix in 0..8 {
            for iy in 0..8 {
                for iz in 0..8 {
                    if rng.gen_bool(0.35) {
                        keys.push(VoxelKey::new(ix, iy, iz));
                    }
                }
            }
        }
        if keys.is_empty() {
            keys.push(VoxelKey::new(0, 0, 0));
        }
        let feats: Vec<f64> = (0..keys.len() * c_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let weight: Vec<f64> = (0..27 * c_in * c_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..c_out).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let tape = Tape::<f64>::new();
        let out = sparse_conv3(
            &SparseFeatureMap {
                keys: keys.clone(),
                features: tape.constant_f64(&feats, &[keys.len(), c_in]),
            },
            &tape.constant_f64(&weight, &[27 * c_in, c_out]),
            &tape.constant_f64(&bias, &[c_out]),
        );
        let got = out.features.value_f64();

        // dense masked convolution over the 8^3 block
        let mut dense = vec![0.0; 8 * 8 * 8 * c_in];
        let mut active = vec![false; 8 * 8 * 8];
        for (i, k) in keys.iter().enumerate() {
            let cell = ((k.ix as usize * 8) + k.iy as usize) * 8 + k.iz as usize;
            active[cell] = true;
            dense[cell * c_in..(cell + 1) * c_in]
                .copy_from_slice(&feats[i * c_in..(i + 1) * c_in]);
        }
        for (i, k) in keys.iter().enumerate() {
            for co in 0..c_out {
                let mut acc = bias[co];
                let mut tap = 0usize;
                for dx in -1i32..=1 {
                    for dy in -1i32..=1 {
                        for dz in -1i32..=1 {
                            let (nx, ny, nz) = (k.ix + dx, k.iy + dy, k.iz + dz);
                            let inside = (0..8).contains(&nx)
                                && (0..8).contains(&ny)
                                && (0..8).contains(&nz);
                            if inside {
                                let cell =
                                    ((nx as usize * 8) + ny as usize) * 8 + nz as usize;
                                if active[cell] {
                                    for ci in 0..c_in {
                                        acc += dense[cell * c_in + ci]
                                            * weight[(tap * c_in + ci) * c_out + co];
                                    }
                                }
                            }
                            tap += 1;
                        }
                    }
                }
                let diff = (got[i * c_out + co] - acc).abs();
                assert!(diff < 1e-5, "grid {grid_i} voxel {i} ch {co}: diff {diff:.2e}");
            }
        }
    }
    println!("criterion 6 (sparse conv vs dense oracle, 50 grids): PASS");
}

#[test]
fn criterion_07_eval_protocol_self_tests() {
    let center = Vector3::new(0.0, 0.0, 0.0);
    let radius = 0.3;
    let mut grid = SparseVoxelGrid::new(Vector3::repeat(-0.6), Level::Fine);
    let n = (1.2 / Level::Fine.voxel_size()).round() as i32;
    for ix in 0..n {
        for iy in 0..n {
            for iz in 0..n {
                let key = VoxelKey::new(ix, iy, iz);
                let sdf = (grid.voxel_center(&key) - center).norm() - radius;
                grid.insert(
                    key,
                    TsdfVoxel {
                        tsdf: (sdf / TRUNCATION).clamp(-1.0, 1.0),
                        weight: 1.0,
                        observed: true,
                    },
                );
            }
        }
    }
    let gt = marching_cubes(&grid);
    assert!(!gt.is_empty());

    let identity = eval3d::metrics(&gt, &gt, eval3d::DEFAULT_TAU, 7);
    assert_eq!(identity.acc, 0.0);
    assert_eq!(identity.comp, 0.0);
    assert_eq!(identity.fscore, 1.0);

    // trimming against the cameras that observed the surface keeps F high
    // two elevation rings so the poles stay observed
    let cams: Vec<(Intrinsics, Pose)> = (0..16)
        .map(|i| {
            let a = (i % 8) as f64 / 8.0 * std::f64::consts::TAU;
            let z = if i < 8 { 0.7 } else { -0.7 };
            let eye = center + Vector3::new(a.cos(), a.sin(), z) * 1.1;
            (
                Intrinsics::new(110.0, 110.0, 63.5, 63.5, 128, 128).unwrap(),
                look_at_from(eye, center),
            )
        })
        .collect();
    let trimmed = eval3d::trim_mesh(&gt, &gt, &cams);
    let trim_report = eval3d::metrics(&trimmed, &gt, eval3d::DEFAULT_TAU, 7);
    assert!(trim_report.fscore > 0.95, "trimmed F {:.4}", trim_report.fscore);

    // two parallel 1 m quads 10 cm apart at tau = 5 cm
    let quad = |z: f64| TriMesh {
        vertices: vec![
            Vector3::new(-0.5, -0.5, z),
            Vector3::new(0.5, -0.5, z),
            Vector3::new(0.5, 0.5, z),
            Vector3::new(-0.5, 0.5, z),
        ],
        triangles: vec![[0, 1, 2], [0, 2, 3]],
    };
    let plane_report = eval3d::metrics(&quad(1.0), &quad(1.1), 0.05, 7);
    assert_eq!(plane_report.prec, 0.0);
    assert_eq!(plane_report.recall, 0.0);
    println!(
        "criterion 7 (eval self-tests, trimmed F {:.4}): PASS",
        trim_report.fscore
    );
}

#[test]
fn criterion_08_keyframe_selection() {
    let axis = Vector3::new(0.0, 0.0, 1.0);
    let poses: Vec<Pose> = (0..40)
        .map(|i| {
            let ang = (i as f64 * 5.0).to_radians();
            let rot = nalgebra::Rotation3::from_axis_angle(
                &nalgebra::Unit::new_normalize(axis),
                ang,
            );
            Pose::new(*rot.matrix(), Vector3::zeros()).unwrap()
        })
        .collect();
    let kept = select_keyframes(&poses, 15.0, 10.0);
    let expected: Vec<usize> = (0..40).step_by(4).collect();
    assert_eq!(kept, expected);
    println!("criterion 8 (keyframes {:?}...): PASS", &kept[..4]);
}

fn det_dataset(root: &std::path::Path, n: usize) -> Vec<pipeline::Scene> {
    (0..n)
        .map(|i| {
            let spec = pipeline::SceneSpec {
                room: [2.4, 2.4, 1.6],
                objects: vec![pipeline::SceneObject::Sphere {
                    center: [1.0 + 0.1 * i as f64, 1.2, 0.5],
                    radius: 0.3,
                }],
                trajectory: pipeline::TrajectorySpec {
                    n_frames: 8,
                    radius: 0.5,
                    height: 1.0,
                    deg_per_frame: 45.0,
                },
                image_size: [48, 48],
                focal: 40.0,
            };
            let dir = root.join(format!("scene_{i:06}"));
            pipeline::synth_scene(&spec, &dir).unwrap();
            pipeline::load_scene(&dir).unwrap()
        })
        .collect()
}

#[test]
fn criterion_10_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = det_dataset(dir.path(), 2);
    let cfg = pipeline::PipelineConfig::from_json(
        r#"{
            "n_train": 4,
            "crop_size": [24, 24, 16],
            "warmup_steps": 4,
            "epochs_multiplier": 0.00667,
            "phase1": {"batch": 2},
            "phase2": {"batch": 2}
        }"#,
    )
    .unwrap();

    let ckpt_a = dir.path().join("a.ckpt");
    let ckpt_b = dir.path().join("b.ckpt");
    let (bundle_a, _) = pipeline::train(&scenes, &cfg, Some(&ckpt_a)).unwrap();
    let (_, _) = pipeline::train(&scenes, &cfg, Some(&ckpt_b)).unwrap();
    let bytes_a = std::fs::read(&ckpt_a).unwrap();
    let bytes_b = std::fs::read(&ckpt_b).unwrap();
    assert_eq!(bytes_a, bytes_b, "checkpoints differ between identical runs");

    let mesh_a = pipeline::reconstruct(&scenes[0], &bundle_a, 9).unwrap();
    let mesh_b = pipeline::reconstruct(&scenes[0], &bundle_a, 9).unwrap();
    let ply_a = dir.path().join("a.ply");
    let ply_b = dir.path().join("b.ply");
    vortx::surface::write_mesh(&mesh_a, &ply_a).unwrap();
    vortx::surface::write_mesh(&mesh_b, &ply_b).unwrap();
    assert_eq!(
        std::fs::read(&ply_a).unwrap(),
        std::fs::read(&ply_b).unwrap(),
        "meshes differ between identical reconstructions"
    );
    println!("criterion 10 (determinism: checkpoints and meshes byte-identical): PASS");
}
