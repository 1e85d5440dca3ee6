//! Runs a submanifold sparse 3x3x3 convolution on a random voxel set and
//! shows the two properties that make it "submanifold": the active set is
//! preserved, and a voxel with no active neighbors only sees itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vortx::grid::VoxelKey;
use vortx::nn::{ParamStore, Tape};
use vortx::sparse_cnn::{sparse_conv3, SparseFeatureMap};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let c_in = 4;
    let c_out = 6;

    // a random 6^3 blob plus one isolated voxel far away
    let mut keys: Vec<VoxelKey> = Vec::new();
    for ix in 0..6 {
        for iy in 0..6 {
            for iz in 0..6 {
                if rng.gen_bool(0.3) {
                    keys.push(VoxelKey::new(ix, iy, iz));
                }
            }
        }
    }
    let isolated = VoxelKey::new(50, 50, 50);
    keys.push(isolated);

    let tape = Tape::<f64>::new();
    let feats: Vec<f64> = (0..keys.len() * c_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let input = SparseFeatureMap {
        keys: keys.clone(),
        features: tape.constant_f64(&feats, &[keys.len(), c_in]),
    };

    let mut store = ParamStore::new();
    store.init_linear("w", 27 * c_in, c_out, &mut rng);
    store.init_zeros("b", &[c_out]);
    let w = store.leaf(&tape, "w");
    let b = store.leaf(&tape, "b");

    let output = sparse_conv3(&input, &w, &b);
    assert_eq!(output.keys, input.keys);
    println!(
        "{} active voxels in -> {} active voxels out ({} channels)",
        input.keys.len(),
        output.keys.len(),
        c_out
    );

    // the isolated voxel must match a 1-voxel convolution of itself
    let idx = keys.len() - 1;
    let solo = SparseFeatureMap {
        keys: vec![isolated],
        features: tape.constant_f64(&feats[idx * c_in..(idx + 1) * c_in], &[1, c_in]),
    };
    let solo_out = sparse_conv3(&solo, &w, &b);
    let full = output.features.value_f64();
    let max_diff = solo_out
        .features
        .value_f64()
        .iter()
        .zip(&full[idx * c_out..(idx + 1) * c_out])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("isolated voxel vs solo conv: max |delta| = {max_diff:.2e}");
}
