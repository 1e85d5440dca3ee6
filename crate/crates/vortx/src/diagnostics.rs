//! Named finite-difference gradient suites, runnable from the CLI and
//! the release gate. Primitive suites use a 1e-4 relative tolerance,
//! composite networks 1e-3.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::feature::{self, Image};
use crate::fusion::{fuse_voxels, init_fusion_params, AggregateMode, FusionConfig, VoxelViewBatch};
use crate::grid::{Level, VoxelKey};
use crate::nn::gradcheck::{check_gradients, GradCheckReport};
use crate::nn::{LeafSet, ParamStore, Tape, Tensor};
use crate::sparse_cnn::{init_cnn_params, level_network, CnnConfig, SparseFeatureMap};

pub struct SuiteResult {
    pub name: &'static str,
    pub report: GradCheckReport,
}

pub fn all_passed(results: &[SuiteResult]) -> bool {
    !results.is_empty() && results.iter().all(|r| r.report.passed())
}

type LossFn = Box<dyn Fn(&ParamStore, &Tape<f64>) -> (Tensor<f64>, BTreeMap<String, Tensor<f64>>)>;

fn all_leaves<'a>(leaves: &LeafSet<'a, f64>) -> BTreeMap<String, Tensor<f64>> {
    leaves
        .names()
        .into_iter()
        .map(|n| (n.clone(), leaves.get(&n)))
        .collect()
}

fn random_store(shapes: &[(&str, &[usize])], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in shapes {
        let n: usize = shape.iter().product();
        // values away from relu/clamp kinks
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(0.15..0.9);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        store.insert(name, data, shape);
    }
    store
}

fn primitive_suites() -> Vec<(&'static str, ParamStore, LossFn)> {
    let mut out: Vec<(&'static str, ParamStore, LossFn)> = Vec::new();

    out.push((
        "linear",
        random_store(&[("w", &[3, 4]), ("b", &[4]), ("x", &[5, 3])], 1),
        Box::new(|s, t| {
            let leaves = LeafSet::new(s, t);
            let y = leaves.get("x").matmul(&leaves.get("w")).add_row(&leaves.get("b"));
            (y.tanh().mean_all(), all_leaves(&leaves))
        }),
    ));

    out.push((
        "bmm",
        random_store(&[("a", &[24]), ("b", &[24])], 2),
        Box::new(|s, t| {
            let leaves = LeafSet::new(s, t);
            let a = leaves.get("a").reshape(&[2, 3, 4]);
            let b = leaves.get("b").reshape(&[2, 3, 4]);
            let plain = a.bmm(&b.reshape(&[2, 4, 3]), false);
            let trans = a.bmm(&b, true);
            (plain.sum_all().add(&trans.mean_all()), all_leaves(&leaves))
        }),
    ));

    out.push((
        "activations",
        random_store(&[("x", &[4, 5])], 3),
        Box::new(|s, t| {
            let leaves = LeafSet::new(s, t);
            let x = leaves.get("x");
            let y = x
                .relu()
                .add(&x.sigmoid())
                .add(&x.tanh())
                .add(&x.exp().scale(0.1))
                .add(&x.clamp(-0.8, 0.8))
                .add(&x.mul(&x).add_scalar(0.5).log());
            (y.mean_all(), all_leaves(&leaves))
        }),
    ));

    out.push((
        "softmax_layernorm",
        random_store(&[("x", &[3, 6])], 4),
        Box::new(|s, t| {
            let leaves = LeafSet::new(s, t);
            let x = leaves.get("x");
            let sm = x.softmax_last().mul(&x).sum_all();
            let ln = x.layer_norm(1e-5).tanh().mean_all();
            (sm.add(&ln), all_leaves(&leaves))
        }),
    ));

    out.push((
        "losses",
        random_store(&[("x", &[6, 1]), ("p", &[6, 1])], 5),
        Box::new(|s, t| {
            let leaves = LeafSet::new(s, t);
            let targets = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
            let mask = [1.0, 1.0, 0.0, 1.0, 1.0, 1.0];
            let gt = [0.4, -0.7, 0.1, -0.2, 0.9, -1.0];
            let bce = leaves.get("x").bce_with_logits(&targets, &mask);
            let l1 = leaves.get("p").log_tsdf_l1(&gt, &mask);
            (bce.add(&l1), all_leaves(&leaves))
        }),
    ));

    out.push((
        "gather_concat_slice",
        random_store(&[("a", &[4, 3]), ("b", &[4, 2])], 6),
        Box::new(|s, t| {
            let leaves = LeafSet::new(s, t);
            let a = leaves.get("a");
            let b = leaves.get("b");
            let cat = Tensor::concat(&[&a, &b], 1);
            let picked = cat.gather_rows(&[2, 0, 0, 3, 1]);
            let sliced = picked.slice_last(1, 3);
            (sliced.tanh().sum_all(), all_leaves(&leaves))
        }),
    ));

    out
}

fn fusion_suite() -> SuiteResult {
    let cfg = FusionConfig { channels: [8, 8, 8], layers: 1, heads: 2, ..FusionConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    init_fusion_params(&mut store, &cfg, &mut rng);
    let counts = vec![1usize, 2, 1];
    let feats: Vec<f64> = (0..4 * 8).map(|_| rng.gen_range(-0.8..0.8)).collect();
    let dirs: Vec<Vector3<f64>> = (0..4)
        .map(|_| {
            Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0f64),
            )
            .normalize()
        })
        .collect();
    let depths: Vec<f64> = (0..4).map(|_| rng.gen_range(0.5..3.0)).collect();
    let report = check_gradients(
        &store,
        |s, t| {
            let leaves = LeafSet::new(s, t);
            let batch = VoxelViewBatch {
                features: t.constant_f64(&feats, &[4, 8]),
                dirs: dirs.clone(),
                depths: depths.clone(),
                counts: counts.clone(),
            };
            let out =
                fuse_voxels(&leaves, Level::Fine, &cfg, &batch, AggregateMode::OccupancyWeighted);
            let bce = out.logits.bce_with_logits(&[1.0, 0.0, 1.0, 0.0], &[1.0; 4]);
            (out.fused.mean_all().add(&bce), all_leaves(&leaves))
        },
        1e-5,
        1e-3,
    );
    SuiteResult { name: "fusion", report }
}

fn sparse_conv_suite() -> SuiteResult {
    let cfg = CnnConfig { depth: 2, use_parent_features: false };
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    init_cnn_params(&mut store, &[2, 2, 2], &cfg, &mut rng);
    let mut keys = Vec::new();
    let mut feats = Vec::new();
    for x in 0..4 {
        for y in 0..4 {
            for z in 0..4 {
                if rng.gen_bool(0.4) {
                    keys.push(VoxelKey::new(x, y, z));
                    feats.push(rng.gen_range(-1.0..1.0));
                    feats.push(rng.gen_range(-1.0..1.0));
                }
            }
        }
    }
    let n = keys.len();
    let targets: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    let report = check_gradients(
        &store,
        |s, t| {
            let leaves = LeafSet::new(s, t);
            let input = SparseFeatureMap::new(keys.clone(), t.constant_f64(&feats, &[n, 2]));
            let logits = level_network(&leaves, Level::Medium, &cfg, &input, None);
            let loss = logits.bce_with_logits(&targets, &vec![1.0; n]);
            (loss, all_leaves(&leaves))
        },
        1e-5,
        1e-3,
    );
    SuiteResult { name: "sparse_conv", report }
}

fn feature_suite() -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut store = ParamStore::new();
    feature::init_feature_params(&mut store, &mut rng);
    let pixels: Vec<f64> = (0..20 * 20).map(|_| rng.gen::<f64>()).collect();
    let image = Image::new(20, 20, pixels);
    let queries = vec![(3.2, 4.7), (10.0, 10.0), (17.5, 2.1)];
    let report = check_gradients(
        &store,
        |s, t| {
            let leaves = LeafSet::new(s, t);
            let pyr = feature::extract(&leaves, &image);
            let mut loss: Option<Tensor<f64>> = None;
            for level in Level::ALL {
                let (sampled, _) = feature::sample_features(&pyr, level, &queries);
                let term = sampled.tanh().mean_all();
                loss = Some(match loss {
                    Some(l) => l.add(&term),
                    None => term,
                });
            }
            (loss.unwrap(), all_leaves(&leaves))
        },
        1e-5,
        1e-3,
    );
    SuiteResult { name: "feature", report }
}

/// Run every suite whose name contains `filter` (all when None).
pub fn gradcheck_suites(filter: Option<&str>) -> Vec<SuiteResult> {
    let keep = |name: &str| filter.is_none_or(|f| name.contains(f));
    let mut results = Vec::new();
    for (name, store, f) in primitive_suites() {
        if keep(name) {
            let report = check_gradients(&store, f, 1e-5, 1e-4);
            results.push(SuiteResult { name, report });
        }
    }
    for suite in [fusion_suite as fn() -> SuiteResult, sparse_conv_suite, feature_suite] {
        let r = suite();
        if keep(r.name) {
            results.push(r);
        }
    }
    results
}
