//! Fills a sparse voxel grid with an analytic sphere TSDF, extracts the
//! zero isosurface with marching cubes, and writes the result as PLY.

use nalgebra::Vector3;
use vortx::fuse_tsdf::TsdfVoxel;
use vortx::grid::{Level, SparseVoxelGrid, VoxelKey};
use vortx::surface::{marching_cubes, write_mesh};

fn main() -> vortx::Result<()> {
    let center = Vector3::new(0.0, 0.0, 0.0);
    let radius = 0.4;
    let truncation = 0.12;
    let origin = Vector3::repeat(-0.6);

    let mut grid = SparseVoxelGrid::new(origin, Level::Fine);
    let n = (1.2 / Level::Fine.voxel_size()).round() as i32;
    for ix in 0..n {
        for iy in 0..n {
            for iz in 0..n {
                let key = VoxelKey::new(ix, iy, iz);
                let p = grid.voxel_center(&key);
                let sdf = (p - center).norm() - radius;
                grid.insert(
                    key,
                    TsdfVoxel {
                        tsdf: (sdf / truncation).clamp(-1.0, 1.0),
                        weight: 1.0,
                        observed: true,
                    },
                );
            }
        }
    }

    let mesh = marching_cubes(&grid);
    let mut max_dev = 0.0f64;
    for v in &mesh.vertices {
        max_dev = max_dev.max(((v - center).norm() - radius).abs());
    }
    println!(
        "{} vertices, {} triangles, watertight: {}, max radial deviation {:.4} m",
        mesh.vertices.len(),
        mesh.triangles.len(),
        mesh.is_watertight(),
        max_dev
    );

    let out = std::env::temp_dir().join("vortx_sphere.ply");
    write_mesh(&mesh, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}
