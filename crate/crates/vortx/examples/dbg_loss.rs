use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vortx::feature::{self, FeaturePyramid};
use vortx::fuse_tsdf::{make_gt, random_subcrop};
use vortx::fusion::AggregateMode;
use vortx::geom::{self, Aabb, Intrinsics, Pose, Vec3, DEFAULT_DEPTH_RANGE};
use vortx::grid::Level;
use vortx::nn::{LeafSet, Tape};
use vortx::pipeline::{fuse_level, load_scene, ModelBundle, ViewData};
use vortx::sparse_cnn::{level_network, level_network_pre_clamp, SparseFeatureMap};

fn main() -> vortx::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let bundle = ModelBundle::load(args[1].as_ref(), None)?;
    let scene = load_scene(args[2].as_ref())?;
    let cfg = &bundle.config;
    let keyframes = geom::select_keyframes(&scene.poses(), cfg.r_max_deg, cfg.t_max_train);
    let views_raw: Vec<_> = scene.frames.iter()
        .map(|f| (scene.intrinsics, f.pose.clone(), f.depth.clone())).collect();
    let gt = make_gt(&views_raw, &scene.bounds, cfg.truncation);

    let mut rng = ChaCha8Rng::seed_from_u64(args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0));
    let sub = random_subcrop(&gt.fine, cfg.crop_size, &mut rng);
    let origin = sub.gt.fine.origin;
    let s = Level::Fine.voxel_size();
    let km = sub.gt.fine.key_min();
    let dims = sub.gt.fine.dims();
    let lo = origin + Vec3::new(km[0] as f64, km[1] as f64, km[2] as f64) * s;
    let hi = lo + Vec3::new(dims[0] as f64, dims[1] as f64, dims[2] as f64) * s;
    let crop_bounds = Aabb::new(lo, hi).expect("crop bounds");
    let flip = sub.transform.needs_image_flip();
    let cams: Vec<(Intrinsics, Pose)> = keyframes.iter()
        .map(|&i| (scene.intrinsics, sub.transform.apply_pose(&scene.frames[i].pose)))
        .collect();
    let sampled = geom::sample_views(&cams, &crop_bounds, DEFAULT_DEPTH_RANGE, cfg.n_train, rng.gen());
    let views: Vec<ViewData> = sampled.iter().map(|&s| {
        let frame = &scene.frames[keyframes[s]];
        let (image, depth) = if flip {
            (frame.feature_image().flip_horizontal(), frame.depth.flip_horizontal())
        } else {
            (frame.feature_image(), frame.depth.clone())
        };
        ViewData { k: cams[s].0, pose: cams[s].1.clone(), image, depth: Some(depth) }
    }).collect();
    let view_ids: Vec<usize> = (0..views.len()).collect();

    let tape = Tape::<f32>::new();
    let leaves = LeafSet::new(&bundle.store, &tape);
    let pyramids: Vec<FeaturePyramid<f32>> =
        views.iter().map(|v| feature::extract(&leaves, &v.image)).collect();

    // teacher-forced fine actives: children of occupied medium voxels with data
    let mut fine_keys = Vec::new();
    for (k, &occ) in sub.gt.medium_occ.iter() {
        if occ {
            fine_keys.extend(k.children().into_iter().filter(|c| sub.gt.fine.contains_key(c)));
        }
    }
    fine_keys.sort_by_key(|k| (k.ix, k.iy, k.iz));
    println!("fine actives: {}", fine_keys.len());
    let fusion = fuse_level(&leaves, cfg, Level::Fine, &origin, &fine_keys,
        &views, &pyramids, &view_ids, AggregateMode::OccupancyWeighted);
    let head = level_network(&leaves, Level::Fine, &cfg.cnn,
        &SparseFeatureMap::new(fine_keys.clone(), fusion.fused), None);
    let tsdf = head.value_f64();
    let (mut targets, mut mask) = (Vec::new(), Vec::new());
    for k in &fine_keys {
        match sub.gt.fine.tsdf(k) {
            Some(v) => { targets.push(v); mask.push(1.0); }
            None => { targets.push(0.0); mask.push(0.0); }
        }
    }
    let term = head.log_tsdf_l1(&targets, &mask);
    println!("s_f = {:.4}", term.value_f64()[0]);
    let raw = level_network_pre_clamp(&leaves, Level::Fine, &cfg.cnn,
        &SparseFeatureMap::new(fine_keys.clone(), fuse_level(&leaves, cfg, Level::Fine, &origin,
            &fine_keys, &views, &pyramids, &view_ids, AggregateMode::OccupancyWeighted).fused), None);
    let rv = raw.value_f64();
    let rn = rv.len().max(1) as f64;
    println!("pre-clamp: mean {:.6} min {:.6} max {:.6}",
        rv.iter().sum::<f64>()/rn,
        rv.iter().cloned().fold(f64::INFINITY, f64::min),
        rv.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let n = tsdf.len().max(1) as f64;
    println!("pred tsdf: mean {:.4} min {:.4} max {:.4}",
        tsdf.iter().sum::<f64>()/n,
        tsdf.iter().cloned().fold(f64::INFINITY, f64::min),
        tsdf.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    println!("neg preds: {}", tsdf.iter().filter(|v| **v < 0.0).count());
    let term2 = raw.log_tsdf_l1(&targets, &mask);
    let grads = term2.backward();
    let gb = leaves.get("cnn.fine.head.b").grad_of(&grads);
    let gw = leaves.get("cnn.fine.head.w").grad_of(&grads);
    println!("grad head.b: {:?}", gb);
    let gwn: f64 = gw.iter().map(|&v| (v as f64)*(v as f64)).sum::<f64>().sqrt();
    println!("grad head.w l2: {gwn:.6}");
    Ok(())
}
