//! Extracts a three-level feature pyramid from a synthetic image and
//! samples it bilinearly at a few query points, including one off-image
//! query that comes back invalid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vortx::feature::{extract, init_feature_params, sample_features, Image, CHANNELS, STRIDES};
use vortx::grid::Level;
use vortx::nn::{LeafSet, ParamStore, Tape};

fn main() {
    let w = 64;
    let h = 48;
    let mut pixels = vec![0.0; w * h];
    for v in 0..h {
        for u in 0..w {
            let x = u as f64 / (w - 1) as f64;
            let y = v as f64 / (h - 1) as f64;
            pixels[v * w + u] = 0.5 + 0.5 * (8.0 * x).sin() * (6.0 * y).cos();
        }
    }
    let image = Image::new(w, h, pixels);

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    init_feature_params(&mut store, &mut rng);

    let tape = Tape::<f64>::new();
    let leaves = LeafSet::new(&store, &tape);
    let pyramid = extract(&leaves, &image);
    for level in Level::ALL {
        let map = pyramid.map(level);
        println!(
            "{:<6} stride {:>2}: {}x{} cells, {} channels",
            level.name(),
            STRIDES[level.index()],
            map.width,
            map.height,
            CHANNELS[level.index()]
        );
    }

    let queries = [(32.0, 24.0), (0.5, 0.5), (63.5, 47.5), (-3.0, 10.0)];
    let (feats, valid) = sample_features(&pyramid, Level::Fine, &queries);
    let vals = feats.value_f64();
    let c = CHANNELS[Level::Fine.index()];
    for (i, (u, v)) in queries.iter().enumerate() {
        let row = &vals[i * c..(i + 1) * c];
        let norm: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        println!(
            "query ({u:6.1}, {v:6.1}): valid={}, ||feature|| = {norm:.4}",
            valid[i]
        );
    }
}
