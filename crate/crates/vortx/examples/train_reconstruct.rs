//! End-to-end miniature run: synthesize a few scenes, train for a handful
//! of steps with a tiny config, reconstruct a held-out scene, and score
//! the mesh against fused ground truth.
//!
//! This is deliberately small so it finishes in a couple of minutes; see
//! the README for a configuration that produces usable meshes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vortx::eval3d;
use vortx::fuse_tsdf::{make_gt, DEFAULT_TRUNCATION};
use vortx::pipeline::{
    load_scene, reconstruct, synth_scene, train, PipelineConfig, SceneObject, SceneSpec,
    TrajectorySpec,
};
use vortx::surface::marching_cubes;

fn tiny_spec(rng: &mut ChaCha8Rng) -> SceneSpec {
    let mut spec = SceneSpec::random(rng);
    spec.image_size = [48, 48];
    spec.focal = 40.0;
    spec.trajectory = TrajectorySpec {
        n_frames: 16,
        radius: 0.8,
        height: 1.3,
        deg_per_frame: 22.5,
    };
    spec
}

fn main() -> vortx::Result<()> {
    let root = std::env::temp_dir().join("vortx_example_train");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut scenes = Vec::new();
    for i in 0..3 {
        let dir = root.join(format!("scene_{i:06}"));
        synth_scene(&tiny_spec(&mut rng), &dir)?;
        scenes.push(load_scene(&dir)?);
    }
    println!("synthesized {} scenes under {}", scenes.len(), root.display());

    let mut cfg = PipelineConfig::default();
    cfg.n_train = 4;
    cfg.crop_size = [24, 24, 16];
    cfg.warmup_steps = 4;
    cfg.epochs_multiplier = 1.0 / 150.0;
    cfg.phase1.batch = 2;
    cfg.phase2.batch = 2;

    let (bundle, stats) = train(&scenes, &cfg, None)?;
    println!(
        "trained {} + {} steps, val loss {:.4} -> {:.4}",
        stats.phase1_steps, stats.phase2_steps, stats.phase1_val_loss, stats.final_val_loss
    );

    let held_out = &scenes[scenes.len() - 1];
    let mesh = reconstruct(held_out, &bundle, 0)?;
    println!("reconstructed {} triangles", mesh.triangles.len());

    let views: Vec<_> = held_out
        .frames
        .iter()
        .map(|f| (held_out.intrinsics, f.pose.clone(), f.depth.clone()))
        .collect();
    let gt = make_gt(&views, &held_out.bounds, DEFAULT_TRUNCATION);
    let gt_mesh = marching_cubes(&gt.fine.to_sparse());
    let cams: Vec<_> = held_out
        .frames
        .iter()
        .map(|f| (held_out.intrinsics, f.pose.clone()))
        .collect();
    let trimmed = eval3d::trim_mesh(&mesh, &gt_mesh, &cams);
    let report = eval3d::metrics(&trimmed, &gt_mesh, eval3d::DEFAULT_TAU, 0);
    println!("{}", report.to_json());
    Ok(())
}
