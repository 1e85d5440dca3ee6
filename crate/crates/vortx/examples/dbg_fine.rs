use vortx::geom;
use vortx::grid::Level;
use vortx::feature::FeaturePyramid;
use vortx::fusion::AggregateMode;
use vortx::nn::{LeafSet, Tape};
use vortx::pipeline::{fuse_level, level_features, load_scene, ModelBundle, ViewData};
use vortx::sparse_cnn::{level_network, SparseFeatureMap};

fn stats(name: &str, vals: &[f64]) {
    let n = vals.len().max(1) as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!("{name}: n {} mean {mean:.4} min {min:.4} max {max:.4}", vals.len());
}

fn main() -> vortx::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let bundle = ModelBundle::load(args[1].as_ref(), None)?;
    let scene = load_scene(args[2].as_ref())?;
    let cfg = &bundle.config;
    let gviews: Vec<_> = scene.frames.iter()
        .map(|f| (scene.intrinsics, f.pose.clone(), f.depth.clone())).collect();
    let gt = vortx::fuse_tsdf::make_gt(&gviews, &scene.bounds, cfg.truncation);

    let mut fine_keys = Vec::new();
    for (k, &occ) in gt.medium_occ.iter() {
        if occ { fine_keys.extend(k.children().into_iter().filter(|c| gt.fine.contains_key(c))); }
    }
    fine_keys.sort_by_key(|k| (k.ix, k.iy, k.iz));
    fine_keys.truncate(3000);
    let origin = gt.fine.origin;

    let kf = geom::select_keyframes(&scene.poses(), cfg.r_max_deg, cfg.t_max_train);
    let views: Vec<ViewData> = kf.iter().take(cfg.n_train).map(|&i| ViewData {
        k: scene.intrinsics,
        pose: scene.frames[i].pose.clone(),
        image: scene.frames[i].feature_image(),
        depth: Some(scene.frames[i].depth.clone()),
    }).collect();
    let view_ids: Vec<usize> = (0..views.len()).collect();
    let tape = Tape::<f32>::new();
    let leaves = LeafSet::new(&bundle.store, &tape);
    let pyramids: Vec<FeaturePyramid<f32>> = views.iter()
        .map(|v| vortx::feature::extract(&leaves, &v.image)).collect();
    let fusion = fuse_level(&leaves, cfg, Level::Fine, &origin, &fine_keys,
        &views, &pyramids, &view_ids, AggregateMode::OccupancyWeighted);
    stats("train-style fine fused |x|", &fusion.fused.value_f64().iter().map(|v| v.abs()).collect::<Vec<_>>());
    let head = level_network(&leaves, Level::Fine, &cfg.cnn,
        &SparseFeatureMap::new(fine_keys.clone(), fusion.fused), None);
    let tsdf = head.value_f64();
    stats("train-style fine tsdf", &tsdf);
    println!("  negative: {}", tsdf.iter().filter(|v| **v < 0.0).count());

    let kf2 = geom::select_keyframes(&scene.poses(), cfg.r_max_deg, cfg.t_max_test);
    let views2: Vec<ViewData> = kf2.iter().map(|&i| ViewData {
        k: scene.intrinsics,
        pose: scene.frames[i].pose.clone(),
        image: scene.frames[i].feature_image(),
        depth: None,
    }).collect();
    let fmv = level_features(&bundle, &views2, &scene.bounds, Level::Fine, &fine_keys, cfg.tile_size, 0)?;
    let keys2: Vec<_> = fmv.keys().copied().collect();
    let mut flat = Vec::new();
    for v in fmv.values() { flat.extend_from_slice(v); }
    stats("infer-style fine fused |x|", &flat.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let tape2 = Tape::<f32>::new();
    let leaves2 = LeafSet::new(&bundle.store, &tape2);
    let input = SparseFeatureMap::new(keys2.clone(),
        tape2.constant_f64(&flat, &[keys2.len(), cfg.fusion.channels_at(Level::Fine)]));
    let head2 = level_network(&leaves2, Level::Fine, &cfg.cnn, &input, None);
    let tsdf2 = head2.value_f64();
    stats("infer-style fine tsdf", &tsdf2);
    println!("  negative: {}", tsdf2.iter().filter(|v| **v < 0.0).count());
    Ok(())
}
