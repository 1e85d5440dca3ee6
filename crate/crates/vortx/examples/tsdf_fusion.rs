//! Fuses rendered depth maps of a sphere into a TSDF volume and compares
//! the fused values against the analytic signed distance.

use nalgebra::Vector3;
use vortx::fuse_tsdf::TsdfVolume;
use vortx::geom::{look_at_from, Aabb, Intrinsics};
use vortx::grid::Level;
use vortx::pipeline::{render_view, SceneObject, SceneSpec, TrajectorySpec};

fn main() -> vortx::Result<()> {
    let center = Vector3::new(2.0, 2.0, 1.25);
    let radius = 0.5;
    let spec = SceneSpec {
        room: [4.0, 4.0, 2.5],
        objects: vec![SceneObject::Sphere { center: center.into(), radius }],
        trajectory: TrajectorySpec::default(),
        image_size: [128, 128],
        focal: 110.0,
    };
    let k = Intrinsics::new(110.0, 110.0, 63.5, 63.5, 128, 128)?;

    let truncation = 0.12;
    let bounds = Aabb::new(
        center - Vector3::repeat(radius + 3.0 * truncation),
        center + Vector3::repeat(radius + 3.0 * truncation),
    )?;
    let mut volume = TsdfVolume::new(&bounds, Level::Fine, truncation);

    let n_views = 40;
    for i in 0..n_views {
        // Fibonacci-sphere directions cover the whole surface evenly
        let t = (i as f64 + 0.5) / n_views as f64;
        let phi = (1.0 - 2.0 * t).acos();
        let theta = std::f64::consts::PI * (1.0 + 5.0f64.sqrt()) * i as f64;
        let dir = Vector3::new(phi.sin() * theta.cos(), phi.sin() * theta.sin(), phi.cos());
        // close-in views keep the silhouette outside the field of view,
        // so no grazing rays with biased projective distances are sampled
        let eye = center + dir * 0.8;
        let pose = look_at_from(eye, center);
        let (depth, _) = render_view(&spec, &k, &pose);
        // depth cutoff excludes the room walls so background pixels do
        // not space-carve band voxels
        volume.integrate_depth(&depth, &k, &pose, 1.0);
    }

    let mut max_err = 0.0f64;
    let mut sum_err = 0.0;
    let mut n = 0usize;
    for key in volume.defined_keys() {
        let p = volume.voxel_center(&key);
        let sdf = (p - center).norm() - radius;
        // compare only inside the truncation band where values are exact
        if sdf.abs() < 0.5 * truncation {
            let err = (volume.tsdf(&key).unwrap() * truncation - sdf).abs();
            max_err = max_err.max(err);
            sum_err += err;
            n += 1;
        }
    }
    println!(
        "{} views fused, {} band voxels: mean |err| {:.4} m, max {:.4} m",
        n_views,
        n,
        sum_err / n as f64,
        max_err
    );
    Ok(())
}
