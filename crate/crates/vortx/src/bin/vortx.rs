use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use vortx::eval3d;
use vortx::fuse_tsdf::{make_gt, DEFAULT_TRUNCATION};
use vortx::geom::select_keyframes;
use vortx::grid::{dump_grid, Level};
use vortx::pipeline::{
    load_dataset, load_scene, reconstruct, synth_scene, train, ModelBundle, PipelineConfig,
    SceneSpec,
};
use vortx::surface::{marching_cubes, read_mesh, write_mesh};
use vortx::Result;

#[derive(Parser)]
#[command(name = "vortx", about = "Volumetric multi-view reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of room scenes
    Synth {
        /// Job JSON: {"count": N, "spec": {optional exact scene spec}}
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fuse a scene's depth maps into ground-truth volumes and a mesh
    MakeGt {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print selected keyframe indices for a scene
    Keyframes {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 15.0)]
        rmax: f64,
        #[arg(long, default_value_t = 0.2)]
        tmax: f64,
    },
    /// Two-phase training over a dataset directory
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Reconstruct a scene with a trained checkpoint
    Reconstruct {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Trim a predicted mesh against ground truth and print metrics JSON
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = eval3d::DEFAULT_TAU)]
        tau: f64,
        #[arg(long)]
        no_trim: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference gradient suites; nonzero exit on failure
    Gradcheck {
        /// Only run suites whose name contains this substring
        #[arg(long)]
        op: Option<String>,
    },
}

#[derive(Deserialize)]
#[serde(default)]
struct SynthJob {
    count: usize,
    spec: Option<SceneSpec>,
}

impl Default for SynthJob {
    fn default() -> Self {
        SynthJob { count: 1, spec: None }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out, seed } => {
            let text = std::fs::read_to_string(&spec)
                .map_err(|e| vortx::Error::io(&spec, e))?;
            let job: SynthJob = serde_json::from_str(&text)
                .map_err(|e| vortx::Error::Config(format!("bad synth job: {e}")))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in 0..job.count {
                let dir = out.join(format!("scene_{i:06}"));
                match &job.spec {
                    Some(s) => synth_scene(s, &dir)?,
                    None => {
                        // rejection-sample specs whose trajectory clips an object
                        let mut attempts = 0;
                        loop {
                            attempts += 1;
                            match synth_scene(&SceneSpec::random(&mut rng), &dir) {
                                Ok(()) => break,
                                Err(_) if attempts < 100 => continue,
                                Err(e) => return Err(e),
                            }
                        }
                    }
                }
                println!("{}", dir.display());
            }
        }
        Command::MakeGt { scene, out } => {
            let s = load_scene(&scene)?;
            let views: Vec<_> = s
                .frames
                .iter()
                .map(|f| (s.intrinsics, f.pose.clone(), f.depth.clone()))
                .collect();
            let gt = make_gt(&views, &s.bounds, DEFAULT_TRUNCATION);
            std::fs::create_dir_all(&out).map_err(|e| vortx::Error::io(&out, e))?;
            let sparse = gt.fine.to_sparse();
            write_mesh(&marching_cubes(&sparse), &out.join("gt_mesh.ply"))?;
            let tsdf_txt = dump_grid(&sparse, |v| vec![v.tsdf, v.weight]);
            std::fs::write(out.join("tsdf_fine.txt"), tsdf_txt)
                .map_err(|e| vortx::Error::io(&out, e))?;
            for (level, occ) in [
                (Level::Coarse, &gt.coarse_occ),
                (Level::Medium, &gt.medium_occ),
                (Level::Fine, &gt.fine_occ),
            ] {
                let txt = dump_grid(occ, |&o| vec![if o { 1.0 } else { 0.0 }]);
                let path = out.join(format!("occ_{}.txt", level.name()));
                std::fs::write(&path, txt).map_err(|e| vortx::Error::io(&path, e))?;
            }
            println!("{}", out.display());
        }
        Command::Keyframes { scene, rmax, tmax } => {
            let s = load_scene(&scene)?;
            let kept = select_keyframes(&s.poses(), rmax, tmax);
            let strs: Vec<String> = kept.iter().map(|i| i.to_string()).collect();
            println!("{}", strs.join(" "));
        }
        Command::Train { data, config, out, seed } => {
            let mut cfg = match config {
                Some(path) => PipelineConfig::from_json_file(&path)?,
                None => PipelineConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let scenes = load_dataset(&data)?;
            let (_, stats) = train(&scenes, &cfg, Some(&out))?;
            println!(
                "trained {} + {} steps, val loss {:.4} -> {:.4}, checkpoint {}",
                stats.phase1_steps,
                stats.phase2_steps,
                stats.phase1_val_loss,
                stats.final_val_loss,
                out.display()
            );
        }
        Command::Reconstruct { scene, ckpt, out, seed } => {
            let bundle = ModelBundle::load(&ckpt, None)?;
            let s = load_scene(&scene)?;
            let mesh = reconstruct(&s, &bundle, seed)?;
            write_mesh(&mesh, &out)?;
            println!(
                "{} vertices, {} triangles -> {}",
                mesh.vertices.len(),
                mesh.triangles.len(),
                out.display()
            );
        }
        Command::Eval { pred, gt, scene, tau, no_trim, seed } => {
            let pred_mesh = read_mesh(&pred)?;
            let gt_mesh = read_mesh(&gt)?;
            let evaluated = if no_trim {
                pred_mesh
            } else {
                let s = load_scene(&scene)?;
                let cams: Vec<_> =
                    s.frames.iter().map(|f| (s.intrinsics, f.pose.clone())).collect();
                eval3d::trim_mesh(&pred_mesh, &gt_mesh, &cams)
            };
            let report = eval3d::metrics(&evaluated, &gt_mesh, tau, seed);
            println!("{}", report.to_json());
        }
        Command::Gradcheck { op } => {
            let results = vortx::diagnostics::gradcheck_suites(op.as_deref());
            if results.is_empty() {
                return Err(vortx::Error::Config(format!(
                    "no gradcheck suite matches {:?}",
                    op.unwrap_or_default()
                )));
            }
            let mut failed = false;
            for r in &results {
                let status = if r.report.passed() { "ok" } else { "FAIL" };
                println!(
                    "{:<20} {} (max rel err {:.2e}, {} entries)",
                    r.name, status, r.report.max_rel_err, r.report.n_checked
                );
                failed |= !r.report.passed();
            }
            if failed {
                return Err(vortx::Error::Config("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    vortx::threads::init_pool();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
