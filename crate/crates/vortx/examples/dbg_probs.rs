use std::collections::BTreeMap;
use vortx::geom;
use vortx::grid::{expand_active, Level, SparseVoxelGrid, VoxelKey};
use vortx::nn::{LeafSet, Tape};
use vortx::pipeline::{coarse_cover, level_features, load_scene, ModelBundle, ViewData};
use vortx::sparse_cnn::{level_network, SparseFeatureMap};

fn head(bundle: &ModelBundle, level: Level, fmv: &BTreeMap<VoxelKey, Vec<f64>>) -> Vec<(VoxelKey, f64)> {
    let cfg = &bundle.config;
    let c = cfg.fusion.channels_at(level);
    let keys: Vec<VoxelKey> = fmv.keys().copied().collect();
    let mut flat = Vec::new();
    for v in fmv.values() { flat.extend_from_slice(v); }
    let tape = Tape::<f32>::new();
    let leaves = LeafSet::new(&bundle.store, &tape);
    let input = SparseFeatureMap::new(keys.clone(), tape.constant_f64(&flat, &[keys.len(), c]));
    let out = level_network(&leaves, level, &cfg.cnn, &input, None).value_f64();
    keys.into_iter().zip(out).collect()
}

fn stats(name: &str, vals: &[f64]) {
    let mut s: Vec<f64> = vals.to_vec();
    s.sort_by(f64::total_cmp);
    let q = |f: f64| s[((s.len() - 1) as f64 * f) as usize];
    println!("{name}: n {} min {:.4} med {:.4} q75 {:.4} q95 {:.4} max {:.4}",
        s.len(), q(0.0), q(0.5), q(0.75), q(0.95), q(1.0));
}

fn main() -> vortx::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut bundle = ModelBundle::load(args[1].as_ref(), None)?;
    let scene = load_scene(args[2].as_ref())?;
    if let Some(t) = args.get(3) { bundle.config.occupancy_threshold = t.parse().unwrap(); }
    if let Some(n) = args.get(4) { bundle.config.n_test = n.parse().unwrap(); }
    let cfg = bundle.config.clone();
    let kf = geom::select_keyframes(&scene.poses(), cfg.r_max_deg, cfg.t_max_test);
    let views: Vec<ViewData> = kf.iter().map(|&i| ViewData {
        k: scene.intrinsics,
        pose: scene.frames[i].pose.clone(),
        image: scene.frames[i].feature_image(),
        depth: None,
    }).collect();
    let bounds = scene.bounds;
    let gviews: Vec<_> = scene.frames.iter()
        .map(|f| (scene.intrinsics, f.pose.clone(), f.depth.clone())).collect();
    let gt = vortx::fuse_tsdf::make_gt(&gviews, &scene.bounds, cfg.truncation);

    let mut active = coarse_cover(&bounds);
    for (level, occ) in [(Level::Coarse, &gt.coarse_occ), (Level::Medium, &gt.medium_occ)] {
        let fmv = level_features(&bundle, &views, &bounds, level, &active, cfg.tile_size, 0)?;
        let logits = head(&bundle, level, &fmv);
        let probs: Vec<f64> = logits.iter().map(|(_, x)| 1.0 / (1.0 + (-x).exp())).collect();
        stats(&format!("{} probs", level.name()), &probs);
        let (mut pos, mut neg) = (vec![], vec![]);
        for ((k, _), p) in logits.iter().zip(&probs) {
            if occ.get(k).copied().unwrap_or(false) { pos.push(*p) } else { neg.push(*p) }
        }
        stats(&format!("{}  occupied", level.name()), &pos);
        stats(&format!("{}  empty", level.name()), &neg);
        let mut grid = SparseVoxelGrid::new(bounds.min, level);
        for ((k, _), p) in logits.iter().zip(&probs) { grid.insert(*k, *p); }
        let next = expand_active(&grid, cfg.occupancy_threshold);
        active = next.keys_sorted();
        println!("-> {} active at next level", active.len());
        if active.is_empty() { return Ok(()); }
    }
    let fmv = level_features(&bundle, &views, &bounds, Level::Fine, &active, cfg.tile_size, 0)?;
    let preds = head(&bundle, Level::Fine, &fmv);
    let tsdf: Vec<f64> = preds.iter().map(|(_, s)| *s).collect();
    stats("fine tsdf", &tsdf);
    let neg = tsdf.iter().filter(|&&s| s < 0.0).count();
    println!("fine voxels with negative tsdf: {neg}");
    Ok(())
}
