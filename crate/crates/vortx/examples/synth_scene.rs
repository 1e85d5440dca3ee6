//! Renders a small synthetic room scene to a temp directory and reports
//! depth statistics and the selected keyframes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vortx::geom::select_keyframes;
use vortx::pipeline::{load_scene, synth_scene, SceneSpec};

fn main() -> vortx::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = SceneSpec::random(&mut rng);
    let dir = std::env::temp_dir().join("vortx_example_scene");
    synth_scene(&spec, &dir)?;

    let scene = load_scene(&dir)?;
    println!("scene: {}", dir.display());
    println!(
        "room {:.1} x {:.1} x {:.1} m, {} objects, {} frames of {}x{}",
        spec.room[0],
        spec.room[1],
        spec.room[2],
        spec.objects.len(),
        scene.frames.len(),
        scene.intrinsics.width,
        scene.intrinsics.height
    );

    let mut max_depth = 0.0f64;
    let mut sum = 0.0;
    let mut n = 0usize;
    for frame in &scene.frames {
        let d = &frame.depth;
        for v in 0..d.height {
            for u in 0..d.width {
                let z = d.get(u, v);
                if z > 0.0 {
                    max_depth = max_depth.max(z);
                    sum += z;
                    n += 1;
                }
            }
        }
    }
    println!(
        "depth: {} valid pixels, mean {:.3} m, max {:.3} m",
        n,
        sum / n as f64,
        max_depth
    );

    let kept = select_keyframes(&scene.poses(), 15.0, 0.2);
    println!("keyframes: {:?}", kept);
    Ok(())
}
