use vortx::geom;
use vortx::grid::Level;
use vortx::feature::FeaturePyramid;
use vortx::fusion::AggregateMode;
use vortx::nn::{LeafSet, Tape};
use vortx::pipeline::{fuse_level, level_features, load_scene, ModelBundle, ViewData};
use vortx::sparse_cnn::{level_network, SparseFeatureMap};

fn stats(name: &str, vals: &[f64]) {
    let n = vals.len().max(1) as f64;
    let mean = vals.iter().map(|v| v.abs()).sum::<f64>() / n;
    let max = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    println!("{name}: mean|x| {mean:.4} max|x| {max:.4}");
}

fn main() -> vortx::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let bundle = ModelBundle::load(args[1].as_ref(), None)?;
    let scene = load_scene(args[2].as_ref())?;
    let cfg = &bundle.config;
    let bounds = scene.bounds;
    let gviews: Vec<_> = scene.frames.iter()
        .map(|f| (scene.intrinsics, f.pose.clone(), f.depth.clone())).collect();
    let gt = vortx::fuse_tsdf::make_gt(&gviews, &scene.bounds, cfg.truncation);

    // training-style: keyframes with train threshold, first n_train views,
    // teacher-forced medium actives, one tape end to end
    let kf = geom::select_keyframes(&scene.poses(), cfg.r_max_deg, cfg.t_max_train);
    let views: Vec<ViewData> = kf.iter().take(cfg.n_train).map(|&i| ViewData {
        k: scene.intrinsics,
        pose: scene.frames[i].pose.clone(),
        image: scene.frames[i].feature_image(),
        depth: Some(scene.frames[i].depth.clone()),
    }).collect();
    let view_ids: Vec<usize> = (0..views.len()).collect();
    let mut med_keys = Vec::new();
    for (k, &occ) in gt.coarse_occ.iter() {
        if occ { med_keys.extend(k.children()); }
    }
    med_keys.sort_by_key(|k| (k.ix, k.iy, k.iz));
    med_keys.truncate(2000);
    let origin = gt.fine.origin;
    let tape = Tape::<f32>::new();
    let leaves = LeafSet::new(&bundle.store, &tape);
    let pyramids: Vec<FeaturePyramid<f32>> = views.iter()
        .map(|v| vortx::feature::extract(&leaves, &v.image)).collect();
    let fusion = fuse_level(&leaves, cfg, Level::Medium, &origin, &med_keys,
        &views, &pyramids, &view_ids, AggregateMode::OccupancyWeighted);
    stats("train-style medium fused", &fusion.fused.value_f64());
    let head = level_network(&leaves, Level::Medium, &cfg.cnn,
        &SparseFeatureMap::new(med_keys.clone(), fusion.fused), None);
    let probs: Vec<f64> = head.value_f64().iter().map(|x| 1.0/(1.0+(-x).exp())).collect();
    stats("train-style medium probs", &probs);
    let pos: Vec<f64> = med_keys.iter().zip(&probs)
        .filter(|(k, _)| gt.medium_occ.get(k).copied().unwrap_or(false)).map(|(_, p)| *p).collect();
    let neg: Vec<f64> = med_keys.iter().zip(&probs)
        .filter(|(k, _)| !gt.medium_occ.get(k).copied().unwrap_or(false)).map(|(_, p)| *p).collect();
    stats("  occupied probs", &pos);
    stats("  empty probs", &neg);

    // inference-style on the same keys
    let kf2 = geom::select_keyframes(&scene.poses(), cfg.r_max_deg, cfg.t_max_test);
    let views2: Vec<ViewData> = kf2.iter().map(|&i| ViewData {
        k: scene.intrinsics,
        pose: scene.frames[i].pose.clone(),
        image: scene.frames[i].feature_image(),
        depth: None,
    }).collect();
    let fmv = level_features(&bundle, &views2, &bounds, Level::Medium, &med_keys, cfg.tile_size, 0)?;
    let mut flat = Vec::new();
    let keys2: Vec<_> = fmv.keys().copied().collect();
    for v in fmv.values() { flat.extend_from_slice(v); }
    stats("infer-style medium fused", &flat);
    let tape2 = Tape::<f32>::new();
    let leaves2 = LeafSet::new(&bundle.store, &tape2);
    let input = SparseFeatureMap::new(keys2.clone(),
        tape2.constant_f64(&flat, &[keys2.len(), cfg.fusion.channels_at(Level::Medium)]));
    let head2 = level_network(&leaves2, Level::Medium, &cfg.cnn, &input, None);
    let probs2: Vec<f64> = head2.value_f64().iter().map(|x| 1.0/(1.0+(-x).exp())).collect();
    stats("infer-style medium probs", &probs2);
    Ok(())
}
