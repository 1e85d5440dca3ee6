//! Demonstrates that per-voxel transformer fusion is invariant to the
//! order in which views arrive, and that the occupancy-weighted average
//! vanishes when every view is predicted empty.

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vortx::fusion::{fuse_voxels, init_fusion_params, AggregateMode, FusionConfig, VoxelViewBatch};
use vortx::grid::Level;
use vortx::nn::{LeafSet, ParamStore, Tape, Tensor};

fn random_batch(
    tape: &Tape<f64>,
    rng: &mut ChaCha8Rng,
    n_views: usize,
    channels: usize,
) -> (Tensor<f64>, Vec<Vector3<f64>>, Vec<f64>) {
    let feats: Vec<f64> = (0..n_views * channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let dirs: Vec<Vector3<f64>> = (0..n_views)
        .map(|_| {
            Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                .normalize()
        })
        .collect();
    let depths: Vec<f64> = (0..n_views).map(|_| rng.gen_range(0.5..4.0)).collect();
    (tape.constant_f64(&feats, &[n_views, channels]), dirs, depths)
}

fn main() {
    let cfg = FusionConfig::default();
    let level = Level::Medium;
    let c = cfg.channels_at(level);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    init_fusion_params(&mut store, &cfg, &mut rng);

    let n_views = 9;
    let tape = Tape::<f64>::new();
    let leaves = LeafSet::new(&store, &tape);
    let (features, dirs, depths) = random_batch(&tape, &mut rng, n_views, c);

    let batch = VoxelViewBatch { features: features.clone(), dirs: dirs.clone(), depths: depths.clone(), counts: vec![n_views] };
    let base = fuse_voxels(&leaves, level, &cfg, &batch, AggregateMode::OccupancyWeighted);
    let base_vals = base.fused.value_f64();

    // shuffle view order; the fused feature must not move
    let mut order: Vec<usize> = (0..n_views).collect();
    order.shuffle(&mut rng);
    let rows = features.gather_rows(&order);
    let perm = VoxelViewBatch {
        features: rows,
        dirs: order.iter().map(|&i| dirs[i]).collect(),
        depths: order.iter().map(|&i| depths[i]).collect(),
        counts: vec![n_views],
    };
    let permuted = fuse_voxels(&leaves, level, &cfg, &perm, AggregateMode::OccupancyWeighted);
    let max_diff = base_vals
        .iter()
        .zip(permuted.fused.value_f64())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("permutation: max |delta| = {max_diff:.2e} over {c} channels");

    // zero-view voxels fuse to an exact zero row
    let empty = VoxelViewBatch {
        features: tape.zeros(&[0, c]),
        dirs: vec![],
        depths: vec![],
        counts: vec![0],
    };
    let fused = fuse_voxels(&leaves, level, &cfg, &empty, AggregateMode::OccupancyWeighted);
    let norm: f64 = fused.fused.value_f64().iter().map(|v| v * v).sum::<f64>().sqrt();
    println!("zero views: ||fused|| = {norm:.2e}");
}
