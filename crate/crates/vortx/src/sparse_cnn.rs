//! Submanifold sparse 3D convolution network per hierarchy level.
//!
//! Output support equals input support; a neighbor that is not active
//! contributes nothing. The gather is expressed as tensor ops (one zero
//! row appended to the features, missing neighbors indexed into it), so
//! the whole network is differentiable on the shared tape.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::grid::{Level, VoxelKey};
use crate::nn::{LeafSet, ParamStore, Scalar, Tensor};

/// Network depth and the optional coarse-to-fine feature hand-off.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CnnConfig {
    /// Conv layers per level before the head.
    pub depth: usize,
    /// Concatenate the parent level's voxel features to the input.
    pub use_parent_features: bool,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            depth: 3,
            use_parent_features: false,
        }
    }
}

/// The 27 kernel offsets in fixed lexicographic order.
pub fn kernel_offsets() -> [(i32, i32, i32); 27] {
    let mut out = [(0, 0, 0); 27];
    let mut i = 0;
    for dx in -1..=1 {
        for dy in -1..=1 {
            for dz in -1..=1 {
                out[i] = (dx, dy, dz);
                i += 1;
            }
        }
    }
    out
}

/// Sparse voxel features on a tape: row `i` of `features` belongs to
/// `keys[i]`. Keys must be unique; sorted order keeps runs bit-stable.
pub struct SparseFeatureMap<T: Scalar> {
    pub keys: Vec<VoxelKey>,
    pub features: Tensor<T>,
}

impl<T: Scalar> SparseFeatureMap<T> {
    pub fn new(keys: Vec<VoxelKey>, features: Tensor<T>) -> Self {
        assert_eq!(features.shape()[0], keys.len(), "feature rows vs keys");
        SparseFeatureMap { keys, features }
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[1]
    }
}

fn input_channels(cfg_channels: usize, parent_channels: usize, cfg: &CnnConfig, level: Level) -> usize {
    if cfg.use_parent_features && level != Level::Coarse {
        cfg_channels + parent_channels
    } else {
        cfg_channels
    }
}

/// Register all CNN parameters for every level under `cnn.<level>.`.
/// `channels` are the per-level input widths, indexed coarse/medium/fine.
pub fn init_cnn_params(
    store: &mut ParamStore,
    channels: &[usize; 3],
    cfg: &CnnConfig,
    rng: &mut ChaCha8Rng,
) {
    for level in Level::ALL {
        let c = channels[level.index()];
        let parent_c = level
            .coarser()
            .map(|p| channels[p.index()])
            .unwrap_or(0);
        let c_in0 = input_channels(c, parent_c, cfg, level);
        let p = format!("cnn.{}", level.name());
        for k in 0..cfg.depth {
            let c_in = if k == 0 { c_in0 } else { c };
            store.init_linear(&format!("{p}.conv{k}.w"), 27 * c_in, c, rng);
            store.init_zeros(&format!("{p}.conv{k}.b"), &[c]);
        }
        store.init_linear(&format!("{p}.head.w"), c, 1, rng);
        store.init_zeros(&format!("{p}.head.b"), &[1]);
    }
}

/// One submanifold 3x3x3 convolution. `weight` is (27*C_in, C_out) with
/// neighbor blocks in [`kernel_offsets`] order; `bias` is (C_out).
pub fn sparse_conv3<T: Scalar>(
    input: &SparseFeatureMap<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> SparseFeatureMap<T> {
    let v = input.keys.len();
    let c_in = input.channels();
    assert_eq!(weight.shape()[0], 27 * c_in, "kernel rows vs 27*C_in");
    let tape = input.features.tape();
    if v == 0 {
        let c_out = weight.shape()[1];
        return SparseFeatureMap {
            keys: Vec::new(),
            features: tape.zeros(&[0, c_out]),
        };
    }
    let index: HashMap<VoxelKey, usize> =
        input.keys.iter().enumerate().map(|(i, &k)| (k, i)).collect();
    // row v is the appended zero row: absent neighbors land there
    let zero_row = tape.zeros(&[1, c_in]);
    let padded = Tensor::concat(&[&input.features, &zero_row], 0);
    let offsets = kernel_offsets();
    let mut rows = Vec::with_capacity(v * 27);
    for key in &input.keys {
        for &(dx, dy, dz) in &offsets {
            rows.push(*index.get(&key.offset(dx, dy, dz)).unwrap_or(&v));
        }
    }
    let features = padded
        .gather_rows(&rows)
        .reshape(&[v, 27 * c_in])
        .matmul(weight)
        .add_row(bias);
    SparseFeatureMap {
        keys: input.keys.clone(),
        features,
    }
}

/// Full per-level network: depth conv layers with relu between, then an
/// affine head. Coarse/medium emit occupancy logits; fine emits a
/// normalized TSDF through 1.05*tanh clamped to [-1, 1]. Returns one
/// prediction per input voxel, shape (V, 1), in `input.keys` order.
pub fn level_network<T: Scalar>(
    leaves: &LeafSet<'_, T>,
    level: Level,
    cfg: &CnnConfig,
    input: &SparseFeatureMap<T>,
    parent: Option<&SparseFeatureMap<T>>,
) -> Tensor<T> {
    let out = level_network_pre_clamp(leaves, level, cfg, input, parent);
    if level == Level::Fine {
        out.clamp(-1.0, 1.0)
    } else {
        out
    }
}

/// Same as [`level_network`] but the fine head stops at 1.05*tanh,
/// without the final clamp. Training losses use this variant: the hard
/// clamp has zero gradient once the head saturates past |1|, which would
/// otherwise freeze the TSDF head permanently; the 1.05*tanh alone keeps
/// a usable gradient (~0.1) at the clamp boundary.
pub fn level_network_pre_clamp<T: Scalar>(
    leaves: &LeafSet<'_, T>,
    level: Level,
    cfg: &CnnConfig,
    input: &SparseFeatureMap<T>,
    parent: Option<&SparseFeatureMap<T>>,
) -> Tensor<T> {
    let p = format!("cnn.{}", level.name());
    let tape = leaves.tape();
    let mut x = if cfg.use_parent_features && level != Level::Coarse {
        let parent = parent.expect("parent features enabled but not provided");
        let pc = parent.channels();
        let index: HashMap<VoxelKey, usize> = parent
            .keys
            .iter()
            .enumerate()
            .map(|(i, &k)| (k, i))
            .collect();
        let zero_row = tape.zeros(&[1, pc]);
        let padded = Tensor::concat(&[&parent.features, &zero_row], 0);
        let rows: Vec<usize> = input
            .keys
            .iter()
            .map(|k| *index.get(&k.parent()).unwrap_or(&parent.keys.len()))
            .collect();
        let gathered = padded.gather_rows(&rows);
        SparseFeatureMap {
            keys: input.keys.clone(),
            features: Tensor::concat(&[&input.features, &gathered], 1),
        }
    } else {
        SparseFeatureMap {
            keys: input.keys.clone(),
            features: input.features.clone(),
        }
    };
    if x.keys.is_empty() {
        return tape.zeros(&[0, 1]);
    }
    for k in 0..cfg.depth {
        let w = leaves.get(&format!("{p}.conv{k}.w"));
        let b = leaves.get(&format!("{p}.conv{k}.b"));
        x = sparse_conv3(&x, &w, &b);
        if k + 1 < cfg.depth {
            x.features = x.features.relu();
        }
    }
    let out = x
        .features
        .matmul(&leaves.get(&format!("{p}.head.w")))
        .add_row(&leaves.get(&format!("{p}.head.b")));
    if level == Level::Fine {
        out.tanh().scale(1.05)
    } else {
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tape;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use std::collections::BTreeMap;

    fn identity_center_kernel(c: usize) -> Vec<f64> {
        // offset (0,0,0) is index 13 in lexicographic order
        let mut w = vec![0.0; 27 * c * c];
        for j in 0..c {
            w[(13 * c + j) * c + j] = 1.0;
        }
        w
    }

    #[test]
    fn center_offset_is_index_13() {
        assert_eq!(kernel_offsets()[13], (0, 0, 0));
        assert_eq!(kernel_offsets()[0], (-1, -1, -1));
        assert_eq!(kernel_offsets()[26], (1, 1, 1));
    }

    #[test]
    fn single_voxel_identity_kernel() {
        let tape: Tape<f64> = Tape::new();
        let keys = vec![VoxelKey::new(2, -1, 5)];
        let feats = tape.constant_f64(&[0.3, -0.7, 1.1], &[1, 3]);
        let w = tape.constant_f64(&identity_center_kernel(3), &[81, 3]);
        let b = tape.zeros(&[3]);
        let out = sparse_conv3(&SparseFeatureMap::new(keys, feats), &w, &b);
        assert_eq!(out.features.value(), vec![0.3, -0.7, 1.1]);
    }

    #[test]
    fn disconnected_voxels_independent() {
        let tape: Tape<f64> = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w_data: Vec<f64> = (0..27 * 2 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = tape.constant_f64(&w_data, &[54, 2]);
        let b = tape.constant_f64(&[0.1, -0.2], &[2]);
        let keys = vec![VoxelKey::new(0, 0, 0), VoxelKey::new(10, 10, 10)];
        let feats = tape.constant_f64(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let both = sparse_conv3(&SparseFeatureMap::new(keys, feats), &w, &b);
        // each alone must produce the same rows
        let a = sparse_conv3(
            &SparseFeatureMap::new(
                vec![VoxelKey::new(0, 0, 0)],
                tape.constant_f64(&[1.0, 2.0], &[1, 2]),
            ),
            &w,
            &b,
        );
        assert_eq!(both.features.value()[..2], a.features.value()[..]);
    }

    /// Brute-force dense 3D convolution with zero padding, masked to the
    /// active set.
    fn dense_oracle(
        active: &BTreeMap<(i32, i32, i32), Vec<f64>>,
        w: &[f64],
        b: &[f64],
        c_in: usize,
        c_out: usize,
    ) -> BTreeMap<(i32, i32, i32), Vec<f64>> {
        let offsets = kernel_offsets();
        let mut out = BTreeMap::new();
        for (&(x, y, z), _) in active {
            let mut acc = b.to_vec();
            for (oi, &(dx, dy, dz)) in offsets.iter().enumerate() {
                if let Some(f) = active.get(&(x + dx, y + dy, z + dz)) {
                    for (ci, &fv) in f.iter().enumerate().take(c_in) {
                        let row = oi * c_in + ci;
                        for (co, a) in acc.iter_mut().enumerate().take(c_out) {
                            *a += fv * w[row * c_out + co];
                        }
                    }
                }
            }
            out.insert((x, y, z), acc);
        }
        out
    }

    #[test]
    fn matches_dense_oracle_random_sparsity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..6 {
            let density = 0.1 + 0.16 * trial as f64;
            let (c_in, c_out) = (3usize, 2usize);
            let mut active = BTreeMap::new();
            for x in 0..8 {
                for y in 0..8 {
                    for z in 0..8 {
                        if rng.gen_bool(density) {
                            let f: Vec<f64> =
                                (0..c_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
                            active.insert((x, y, z), f);
                        }
                    }
                }
            }
            if active.is_empty() {
                continue;
            }
            let w: Vec<f64> = (0..27 * c_in * c_out)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let b: Vec<f64> = (0..c_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let expected = dense_oracle(&active, &w, &b, c_in, c_out);

            let tape: Tape<f64> = Tape::new();
            let keys: Vec<VoxelKey> = active
                .keys()
                .map(|&(x, y, z)| VoxelKey::new(x, y, z))
                .collect();
            let feats: Vec<f64> = active.values().flatten().copied().collect();
            let input = SparseFeatureMap::new(
                keys.clone(),
                tape.constant_f64(&feats, &[active.len(), c_in]),
            );
            let wt = tape.constant_f64(&w, &[27 * c_in, c_out]);
            let bt = tape.constant_f64(&b, &[c_out]);
            let out = sparse_conv3(&input, &wt, &bt);
            let got = out.features.value();
            for (i, key) in keys.iter().enumerate() {
                let exp = &expected[&(key.ix, key.iy, key.iz)];
                for j in 0..c_out {
                    assert!(
                        (got[i * c_out + j] - exp[j]).abs() < 1e-5,
                        "mismatch at {key:?} ch {j}: {} vs {}",
                        got[i * c_out + j],
                        exp[j]
                    );
                }
            }
        }
    }

    #[test]
    fn translation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tape: Tape<f64> = Tape::new();
        let w = tape.constant_f64(
            &(0..27 * 2 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(),
            &[54, 2],
        );
        let b = tape.constant_f64(&[0.3, -0.1], &[2]);
        let keys: Vec<VoxelKey> = (0..5)
            .map(|_| VoxelKey::new(rng.gen_range(-3..3), rng.gen_range(-3..3), rng.gen_range(-3..3)))
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let feats: Vec<f64> = (0..keys.len() * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let base = sparse_conv3(
            &SparseFeatureMap::new(keys.clone(), tape.constant_f64(&feats, &[keys.len(), 2])),
            &w,
            &b,
        );
        let shifted_keys: Vec<VoxelKey> = keys.iter().map(|k| k.offset(7, -4, 2)).collect();
        let shifted = sparse_conv3(
            &SparseFeatureMap::new(shifted_keys, tape.constant_f64(&feats, &[keys.len(), 2])),
            &w,
            &b,
        );
        for (a, s) in base.features.value().iter().zip(shifted.features.value()) {
            assert_relative_eq!(a, &s, epsilon = 1e-12);
        }
    }

    fn toy_store(c: usize, cfg: &CnnConfig, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_cnn_params(&mut store, &[c, c, c], cfg, &mut rng);
        store
    }

    #[test]
    fn zero_weights_give_half_probability() {
        let cfg = CnnConfig::default();
        let mut store = toy_store(2, &cfg, 1);
        for name in store.names().map(String::from).collect::<Vec<_>>() {
            for v in store.values_mut(&name) {
                *v = 0.0;
            }
        }
        let tape: Tape<f64> = Tape::new();
        let leaves = LeafSet::new(&store, &tape);
        let input = SparseFeatureMap::new(
            vec![VoxelKey::new(0, 0, 0), VoxelKey::new(1, 0, 0)],
            tape.constant_f64(&[1.0, 2.0, 3.0, 4.0], &[2, 2]),
        );
        let logits = level_network(&leaves, Level::Coarse, &cfg, &input, None);
        for v in logits.value() {
            assert_eq!(v, 0.0);
        }
        for p in logits.sigmoid().value() {
            assert_relative_eq!(p, 0.5);
        }
    }

    #[test]
    fn fine_head_bounded_and_support_preserved() {
        let cfg = CnnConfig::default();
        let mut store = toy_store(2, &cfg, 2);
        // inflate the head to force saturation through 1.05*tanh
        for v in store.values_mut("cnn.fine.head.w") {
            *v *= 100.0;
        }
        let tape: Tape<f64> = Tape::new();
        let leaves = LeafSet::new(&store, &tape);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let keys: Vec<VoxelKey> = (0..10).map(|i| VoxelKey::new(i, 0, 0)).collect();
        let feats: Vec<f64> = (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let input = SparseFeatureMap::new(keys.clone(), tape.constant_f64(&feats, &[10, 2]));
        let pred = level_network(&leaves, Level::Fine, &cfg, &input, None);
        assert_eq!(pred.shape(), vec![10, 1]);
        assert!(pred.value().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        assert!(pred.value().iter().any(|&v| v.abs() == 1.0));
    }

    #[test]
    fn empty_grid_empty_prediction() {
        let cfg = CnnConfig::default();
        let store = toy_store(2, &cfg, 3);
        let tape: Tape<f64> = Tape::new();
        let leaves = LeafSet::new(&store, &tape);
        let input = SparseFeatureMap::new(Vec::new(), tape.zeros(&[0, 2]));
        let pred = level_network(&leaves, Level::Medium, &cfg, &input, None);
        assert_eq!(pred.shape(), vec![0, 1]);
    }

    #[test]
    fn parent_feature_concat_changes_input_width() {
        let cfg = CnnConfig {
            use_parent_features: true,
            ..CnnConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        init_cnn_params(&mut store, &[4, 3, 2], &cfg, &mut rng);
        assert_eq!(store.shape("cnn.coarse.conv0.w"), &[27 * 4, 4]);
        assert_eq!(store.shape("cnn.medium.conv0.w"), &[27 * 7, 3]);
        assert_eq!(store.shape("cnn.fine.conv0.w"), &[27 * 5, 2]);

        let tape: Tape<f64> = Tape::new();
        let leaves = LeafSet::new(&store, &tape);
        let parent = SparseFeatureMap::new(
            vec![VoxelKey::new(0, 0, 0)],
            tape.constant_f64(&[0.5, -0.5, 0.25], &[1, 3]),
        );
        let input = SparseFeatureMap::new(
            vec![VoxelKey::new(0, 0, 0), VoxelKey::new(3, 3, 3)],
            tape.constant_f64(&[1.0, 1.0, 1.0, 1.0], &[2, 2]),
        );
        // second voxel's parent is missing; must still evaluate
        let pred = level_network(&leaves, Level::Fine, &cfg, &input, Some(&parent));
        assert_eq!(pred.shape(), vec![2, 1]);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        use crate::nn::gradcheck::check_gradients;
        let cfg = CnnConfig {
            depth: 2,
            use_parent_features: false,
        };
        let store = toy_store(2, &cfg, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // 4^3 block at 40% density
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
                let input =
                    SparseFeatureMap::new(keys.clone(), t.constant_f64(&feats, &[n, 2]));
                let logits = level_network(&leaves, Level::Medium, &cfg, &input, None);
                let loss = logits.bce_with_logits(&targets, &vec![1.0; n]);
                let names = leaves.names();
                let map = names
                    .into_iter()
                    .map(|nm| (nm.clone(), leaves.get(&nm)))
                    .collect();
                (loss, map)
            },
            1e-5,
            1e-3,
        );
        assert!(
            report.passed(),
            "cnn gradcheck: max rel err {} ({:?})",
            report.max_rel_err,
            report.mismatches.first()
        );
    }
}
