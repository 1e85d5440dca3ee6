//! Synthetic scenes: analytic SDF rooms with sphere and box furniture,
//! depth rendered by sphere tracing, shading by headlight Lambert, plus
//! the on-disk scene format shared by every subcommand.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::Image;
use crate::fuse_tsdf::DepthMap;
use crate::geom::{
    look_at_from, read_intrinsics_file, read_pose_file, write_intrinsics_file,
    write_pose_file, Aabb, Intrinsics, Pose, Vec3,
};
use crate::pipeline::{read_bounds_file, write_bounds_file};

const TRACE_EPS: f64 = 1e-4;
const TRACE_MAX_STEPS: usize = 256;

/// Solid scene content; the room walls are implicit.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneObject {
    Sphere { center: [f64; 3], radius: f64 },
    Box { center: [f64; 3], half: [f64; 3] },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectorySpec {
    pub n_frames: usize,
    /// Orbit radius in the horizontal plane, meters.
    pub radius: f64,
    /// Camera height above the floor, meters.
    pub height: f64,
    pub deg_per_frame: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        TrajectorySpec { n_frames: 40, radius: 1.0, height: 1.5, deg_per_frame: 9.0 }
    }
}

/// One scene: a room interior spanning [0, room] with objects inside,
/// viewed from an interior orbit.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    /// Interior room dimensions, meters; gravity is -z.
    pub room: [f64; 3],
    pub objects: Vec<SceneObject>,
    pub trajectory: TrajectorySpec,
    pub image_size: [usize; 2],
    pub focal: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            room: [4.0, 4.0, 2.5],
            objects: Vec::new(),
            trajectory: TrajectorySpec::default(),
            image_size: [96, 96],
            focal: 80.0,
        }
    }
}

impl SceneSpec {
    pub fn bounds(&self) -> Aabb {
        Aabb::new(Vec3::zeros(), Vec3::new(self.room[0], self.room[1], self.room[2]))
            .expect("room dims positive")
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let [w, h] = self.image_size;
        // centered principal point keeps reflection augmentation exact
        Intrinsics::new(
            self.focal,
            self.focal,
            (w as f64 - 1.0) / 2.0,
            (h as f64 - 1.0) / 2.0,
            w,
            h,
        )
        .expect("spec intrinsics valid")
    }

    pub fn poses(&self) -> Vec<Pose> {
        let c = Vec3::new(self.room[0] / 2.0, self.room[1] / 2.0, self.trajectory.height);
        let target = Vec3::new(self.room[0] / 2.0, self.room[1] / 2.0, self.room[2] / 2.0);
        (0..self.trajectory.n_frames)
            .map(|i| {
                let a = (i as f64 * self.trajectory.deg_per_frame).to_radians();
                let eye = c + Vec3::new(a.cos(), a.sin(), 0.0) * self.trajectory.radius;
                look_at_from(eye, target)
            })
            .collect()
    }

    /// A furnished room with randomized dimensions, objects, and orbit.
    pub fn random(rng: &mut impl Rng) -> SceneSpec {
        let room = [rng.gen_range(3.4..4.4), rng.gen_range(3.4..4.4), 2.5];
        let mut objects = Vec::new();
        for _ in 0..rng.gen_range(2..=4) {
            let margin = 0.9;
            let cx = rng.gen_range(margin..room[0] - margin);
            let cy = rng.gen_range(margin..room[1] - margin);
            if rng.gen_bool(0.5) {
                let r = rng.gen_range(0.25..0.45);
                objects.push(SceneObject::Sphere { center: [cx, cy, rng.gen_range(r..1.2)], radius: r });
            } else {
                let half =
                    [rng.gen_range(0.2..0.4), rng.gen_range(0.2..0.4), rng.gen_range(0.2..0.5)];
                objects.push(SceneObject::Box { center: [cx, cy, half[2]], half });
            }
        }
        SceneSpec {
            room,
            objects,
            trajectory: TrajectorySpec {
                n_frames: 40,
                radius: rng.gen_range(0.8..1.1),
                height: rng.gen_range(1.3..1.7),
                deg_per_frame: 9.0,
            },
            ..SceneSpec::default()
        }
    }
}

fn box_sdf(p: &Vec3, center: &Vec3, half: &Vec3) -> f64 {
    let q = Vec3::new(
        (p.x - center.x).abs() - half.x,
        (p.y - center.y).abs() - half.y,
        (p.z - center.z).abs() - half.z,
    );
    let outside = Vec3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
    outside + q.x.max(q.y).max(q.z).min(0.0)
}

/// Signed distance to the scene solid (walls plus objects): positive in
/// room air, negative inside any solid.
pub fn scene_sdf(spec: &SceneSpec, p: &Vec3) -> f64 {
    let half = Vec3::new(spec.room[0] / 2.0, spec.room[1] / 2.0, spec.room[2] / 2.0);
    // walls are the complement of the open room interior
    let mut d = -box_sdf(p, &half, &half);
    for obj in &spec.objects {
        let od = match obj {
            SceneObject::Sphere { center, radius } => {
                (p - Vec3::new(center[0], center[1], center[2])).norm() - radius
            }
            SceneObject::Box { center, half } => box_sdf(
                p,
                &Vec3::new(center[0], center[1], center[2]),
                &Vec3::new(half[0], half[1], half[2]),
            ),
        };
        d = d.min(od);
    }
    d
}

/// March a ray until |sdf| < 1e-4; returns the ray length and the step
/// count, or None past `t_max` or after 256 steps.
pub fn sphere_trace(
    sdf: impl Fn(&Vec3) -> f64,
    origin: &Vec3,
    dir: &Vec3,
    t_max: f64,
) -> Option<(f64, usize)> {
    let mut t = 0.0;
    for step in 0..TRACE_MAX_STEPS {
        let p = origin + dir * t;
        let d = sdf(&p);
        if d.abs() < TRACE_EPS {
            return Some((t, step));
        }
        t += d;
        if t > t_max || t < 0.0 {
            return None;
        }
    }
    None
}

fn sdf_normal(spec: &SceneSpec, p: &Vec3) -> Vec3 {
    let h = 1e-5;
    let g = Vec3::new(
        scene_sdf(spec, &(p + Vec3::new(h, 0.0, 0.0))) - scene_sdf(spec, &(p - Vec3::new(h, 0.0, 0.0))),
        scene_sdf(spec, &(p + Vec3::new(0.0, h, 0.0))) - scene_sdf(spec, &(p - Vec3::new(0.0, h, 0.0))),
        scene_sdf(spec, &(p + Vec3::new(0.0, 0.0, h))) - scene_sdf(spec, &(p - Vec3::new(0.0, 0.0, h))),
    );
    let n = g.norm();
    if n < 1e-12 {
        Vec3::new(0.0, 0.0, 1.0)
    } else {
        g / n
    }
}

/// Render one view: z-depth map (0 where tracing fails) and a headlight
/// Lambertian shading image with mild distance falloff.
pub fn render_view(spec: &SceneSpec, k: &Intrinsics, pose: &Pose) -> (DepthMap, Image) {
    let (w, h) = (k.width, k.height);
    let mut depth = DepthMap::new(w, h);
    let mut shade = vec![0.0f64; w * h];
    let eye = pose.center();
    let diag = Vec3::new(spec.room[0], spec.room[1], spec.room[2]).norm();
    for v in 0..h {
        for u in 0..w {
            let cam = Vec3::new(
                (u as f64 - k.cx) / k.fx,
                (v as f64 - k.cy) / k.fy,
                1.0,
            );
            let inv_norm = 1.0 / cam.norm();
            let dir = pose.rotation * (cam * inv_norm);
            let Some((t, _)) = sphere_trace(|p| scene_sdf(spec, p), &eye, &dir, 2.0 * diag)
            else {
                continue;
            };
            // ray length to camera-frame z
            depth.set(u, v, t * inv_norm);
            let p = eye + dir * t;
            let n = sdf_normal(spec, &p);
            let lambert = n.dot(&(-dir)).max(0.0);
            let falloff = 1.0 / (1.0 + 0.15 * t * t);
            shade[v * w + u] = (lambert * falloff).clamp(0.0, 1.0);
        }
    }
    (depth, Image::new(w, h, shade))
}

fn validate(spec: &SceneSpec) -> Result<()> {
    if spec.room.iter().any(|&d| d <= 0.5) {
        return Err(Error::Config(format!("room dims too small: {:?}", spec.room)));
    }
    for obj in &spec.objects {
        let (lo, hi) = match obj {
            SceneObject::Sphere { center, radius } => (
                Vec3::new(center[0] - radius, center[1] - radius, center[2] - radius),
                Vec3::new(center[0] + radius, center[1] + radius, center[2] + radius),
            ),
            SceneObject::Box { center, half } => (
                Vec3::new(center[0] - half[0], center[1] - half[1], center[2] - half[2]),
                Vec3::new(center[0] + half[0], center[1] + half[1], center[2] + half[2]),
            ),
        };
        let ok = (0..3).all(|a| lo[a] >= 0.0 && hi[a] <= spec.room[a]);
        if !ok {
            return Err(Error::Config(format!("object outside the room: {obj:?}")));
        }
    }
    for pose in spec.poses() {
        let eye = pose.center();
        if scene_sdf(spec, &eye) <= 0.05 {
            return Err(Error::Config(format!(
                "trajectory leaves the room interior at camera position {:?}",
                (eye.x, eye.y, eye.z)
            )));
        }
    }
    Ok(())
}

fn write_gray_png(path: &Path, image: &Image) -> Result<()> {
    let buf: Vec<u8> = image
        .pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(image.width as u32, image.height as u32, buf)
        .expect("buffer sized to image");
    img.save(path).map_err(|e| Error::Image { path: path.into(), source: e })
}

fn read_gray_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.into(), source: e })?
        .into_luma8();
    let (w, h) = img.dimensions();
    let pixels = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Ok(Image::new(w as usize, h as usize, pixels))
}

/// Generate one scene on disk: intrinsics.txt, bounds.txt, poses/%06d.txt,
/// depth/%06d.png, shading/%06d.png, plus the spec echoed as scene.json.
pub fn synth_scene(spec: &SceneSpec, out_dir: &Path) -> Result<()> {
    validate(spec)?;
    std::fs::create_dir_all(out_dir.join("poses")).map_err(|e| Error::io(out_dir, e))?;
    std::fs::create_dir_all(out_dir.join("depth")).map_err(|e| Error::io(out_dir, e))?;
    std::fs::create_dir_all(out_dir.join("shading")).map_err(|e| Error::io(out_dir, e))?;
    let k = spec.intrinsics();
    write_intrinsics_file(&out_dir.join("intrinsics.txt"), &k)?;
    write_bounds_file(&out_dir.join("bounds.txt"), &spec.bounds())?;
    let echo = serde_json::to_string_pretty(spec).expect("spec serializes");
    std::fs::write(out_dir.join("scene.json"), echo)
        .map_err(|e| Error::io(out_dir, e))?;
    for (i, pose) in spec.poses().iter().enumerate() {
        let (depth, shade) = render_view(spec, &k, pose);
        write_pose_file(&out_dir.join(format!("poses/{i:06}.txt")), pose)?;
        depth.write_png(&out_dir.join(format!("depth/{i:06}.png")))?;
        write_gray_png(&out_dir.join(format!("shading/{i:06}.png")), &shade)?;
    }
    Ok(())
}

/// One loaded frame.
pub struct Frame {
    pub pose: Pose,
    pub depth: DepthMap,
    pub shading: Option<Image>,
}

impl Frame {
    /// Image fed to the feature extractor: shading when present, else
    /// depth normalized by the fusion cutoff.
    pub fn feature_image(&self) -> Image {
        match &self.shading {
            Some(img) => img.clone(),
            None => Image::new(
                self.depth.width,
                self.depth.height,
                (0..self.depth.width * self.depth.height)
                    .map(|i| {
                        let d = self.depth.get(i % self.depth.width, i / self.depth.width);
                        (d / crate::fuse_tsdf::MAX_DEPTH).clamp(0.0, 1.0)
                    })
                    .collect(),
            ),
        }
    }
}

/// A scene loaded from disk.
pub struct Scene {
    pub dir: PathBuf,
    pub intrinsics: Intrinsics,
    pub frames: Vec<Frame>,
    pub bounds: Aabb,
}

impl Scene {
    pub fn poses(&self) -> Vec<Pose> {
        self.frames.iter().map(|f| f.pose.clone()).collect()
    }
}

/// Load a scene directory; frame indices must be contiguous from 0 and
/// every pose must have a matching depth map.
pub fn load_scene(dir: &Path) -> Result<Scene> {
    let bounds = read_bounds_file(&dir.join("bounds.txt"))?;
    let mut frames = Vec::new();
    let mut size: Option<(usize, usize)> = None;
    loop {
        let i = frames.len();
        let pose_path = dir.join(format!("poses/{i:06}.txt"));
        if !pose_path.exists() {
            break;
        }
        let depth_path = dir.join(format!("depth/{i:06}.png"));
        if !depth_path.exists() {
            return Err(Error::Config(format!(
                "frame {i} of {} has a pose but no depth map",
                dir.display()
            )));
        }
        let pose = read_pose_file(&pose_path)?;
        let depth = DepthMap::read_png(&depth_path)?;
        size.get_or_insert((depth.width, depth.height));
        let shading_path = dir.join(format!("shading/{i:06}.png"));
        let shading =
            if shading_path.exists() { Some(read_gray_png(&shading_path)?) } else { None };
        frames.push(Frame { pose, depth, shading });
    }
    if frames.is_empty() {
        return Err(Error::Config(format!("scene {} has no frames", dir.display())));
    }
    let (w, h) = size.unwrap();
    let intrinsics = read_intrinsics_file(&dir.join("intrinsics.txt"), w, h)?;
    Ok(Scene { dir: dir.into(), intrinsics, frames, bounds })
}

/// Load every scene subdirectory (sorted by name) of a dataset root.
pub fn load_dataset(root: &Path) -> Result<Vec<Scene>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("intrinsics.txt").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Config(format!("no scenes under {}", root.display())));
    }
    dirs.iter().map(|d| load_scene(d)).collect()
}
