//! Orchestration: synthetic scenes, dataset I/O, the coarse-to-fine
//! reconstruction loop, and two-phase training.

mod forward;
mod synth;
mod train;

pub use forward::{coarse_cover, fuse_level, level_features, reconstruct, LevelFusion, ViewData};
pub use synth::{
    load_dataset, load_scene, render_view, scene_sdf, sphere_trace, synth_scene, Frame, Scene,
    SceneObject, SceneSpec, TrajectorySpec,
};
pub use train::{train, TrainStats};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature;
use crate::fuse_tsdf::CROP_SIZE;
use crate::fusion::{init_fusion_params, FusionConfig};
use crate::geom::{Aabb, Vec3};
use crate::grid::VoxelKey;
use crate::nn::ParamStore;
use crate::sparse_cnn::{init_cnn_params, CnnConfig};

/// One training phase's schedule.
#[derive(Debug, Clone, Serialize)]
pub struct PhaseConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        PhaseConfig { lr: 1e-3, epochs: 300, batch: 4 }
    }
}

fn default_phase2() -> PhaseConfig {
    PhaseConfig { lr: 1e-4, epochs: 100, batch: 2 }
}

/// Partially-specified phase as it appears in config files; unnamed
/// fields fall back to that phase's own defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default)]
struct PartialPhase {
    lr: Option<f64>,
    epochs: Option<usize>,
    batch: Option<usize>,
}

impl PartialPhase {
    fn resolve(&self, base: PhaseConfig) -> PhaseConfig {
        PhaseConfig {
            lr: self.lr.unwrap_or(base.lr),
            epochs: self.epochs.unwrap_or(base.epochs),
            batch: self.batch.unwrap_or(base.batch),
        }
    }
}

/// Every knob of the system, JSON-serializable with full defaults so an
/// empty config file is valid. The effective config travels inside every
/// checkpoint as its fingerprint.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "RawPipelineConfig")]
pub struct PipelineConfig {
    /// TSDF truncation distance, meters.
    pub truncation: f64,
    pub fusion: FusionConfig,
    pub cnn: CnnConfig,
    /// Views sampled per tile during training / testing.
    pub n_train: usize,
    pub n_test: usize,
    /// Keyframe thresholds.
    pub r_max_deg: f64,
    pub t_max_train: f64,
    pub t_max_test: f64,
    /// Tile edge, meters.
    pub tile_size: f64,
    /// Occupancy probability needed to expand a voxel to the next level.
    pub occupancy_threshold: f64,
    pub phase1: PhaseConfig,
    pub phase2: PhaseConfig,
    /// Scales both phases' epoch counts down to desk scale.
    pub epochs_multiplier: f64,
    pub warmup_steps: u64,
    /// Fraction of active voxels kept for loss computation each step.
    pub keep_fraction: f64,
    /// Training subcrop size in fine voxels, horizontal square.
    pub crop_size: [usize; 3],
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            truncation: crate::fuse_tsdf::DEFAULT_TRUNCATION,
            fusion: FusionConfig::default(),
            cnn: CnnConfig::default(),
            n_train: 20,
            n_test: 60,
            r_max_deg: 15.0,
            t_max_train: 0.1,
            t_max_test: 0.2,
            tile_size: 3.84,
            occupancy_threshold: 0.5,
            phase1: PhaseConfig::default(),
            phase2: default_phase2(),
            epochs_multiplier: 1.0 / 30.0,
            warmup_steps: 2000,
            keep_fraction: 0.5,
            crop_size: CROP_SIZE,
            seed: 0,
        }
    }
}

/// Config file shape: every field optional, nested phases partial.
#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct RawPipelineConfig {
    truncation: Option<f64>,
    fusion: Option<FusionConfig>,
    cnn: Option<CnnConfig>,
    n_train: Option<usize>,
    n_test: Option<usize>,
    r_max_deg: Option<f64>,
    t_max_train: Option<f64>,
    t_max_test: Option<f64>,
    tile_size: Option<f64>,
    occupancy_threshold: Option<f64>,
    phase1: PartialPhase,
    phase2: PartialPhase,
    epochs_multiplier: Option<f64>,
    warmup_steps: Option<u64>,
    keep_fraction: Option<f64>,
    crop_size: Option<[usize; 3]>,
    seed: Option<u64>,
}

impl From<RawPipelineConfig> for PipelineConfig {
    fn from(raw: RawPipelineConfig) -> Self {
        let d = PipelineConfig::default();
        PipelineConfig {
            truncation: raw.truncation.unwrap_or(d.truncation),
            fusion: raw.fusion.unwrap_or(d.fusion),
            cnn: raw.cnn.unwrap_or(d.cnn),
            n_train: raw.n_train.unwrap_or(d.n_train),
            n_test: raw.n_test.unwrap_or(d.n_test),
            r_max_deg: raw.r_max_deg.unwrap_or(d.r_max_deg),
            t_max_train: raw.t_max_train.unwrap_or(d.t_max_train),
            t_max_test: raw.t_max_test.unwrap_or(d.t_max_test),
            tile_size: raw.tile_size.unwrap_or(d.tile_size),
            occupancy_threshold: raw.occupancy_threshold.unwrap_or(d.occupancy_threshold),
            phase1: raw.phase1.resolve(d.phase1),
            phase2: raw.phase2.resolve(default_phase2()),
            epochs_multiplier: raw.epochs_multiplier.unwrap_or(d.epochs_multiplier),
            warmup_steps: raw.warmup_steps.unwrap_or(d.warmup_steps),
            keep_fraction: raw.keep_fraction.unwrap_or(d.keep_fraction),
            crop_size: raw.crop_size.unwrap_or(d.crop_size),
            seed: raw.seed.unwrap_or(d.seed),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("bad pipeline config: {e}")))
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Canonical JSON of the effective config; identifies checkpoints.
    pub fn fingerprint(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// All trainable parameters plus the config they were built for.
pub struct ModelBundle {
    pub config: PipelineConfig,
    pub store: ParamStore,
}

impl ModelBundle {
    /// Fresh random initialization, deterministic in the seed.
    pub fn init(config: PipelineConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        feature::init_feature_params(&mut store, &mut rng);
        init_fusion_params(&mut store, &config.fusion, &mut rng);
        init_cnn_params(&mut store, &config.fusion.channels, &config.cnn, &mut rng);
        ModelBundle { config, store }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path, &self.config.fingerprint())
    }

    /// Load a checkpoint; when `expected` is given, its fingerprint must
    /// match the stored one exactly.
    pub fn load(path: &Path, expected: Option<&PipelineConfig>) -> Result<Self> {
        let (store, fingerprint) = ParamStore::load(path)?;
        if let Some(cfg) = expected {
            if cfg.fingerprint() != fingerprint {
                return Err(Error::Checkpoint(format!(
                    "config fingerprint mismatch loading {}",
                    path.display()
                )));
            }
        }
        let config = PipelineConfig::from_json(&fingerprint)
            .map_err(|_| Error::Checkpoint("checkpoint carries an unreadable config".into()))?;
        Ok(ModelBundle { config, store })
    }
}

/// Uniform subsample of active voxels used for loss computation; targets
/// themselves are untouched. keep = 1 is the identity.
pub fn voxel_dropout(
    active: &[VoxelKey],
    keep_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<VoxelKey> {
    assert!(
        keep_fraction > 0.0 && keep_fraction <= 1.0,
        "keep fraction must be in (0, 1], got {keep_fraction}"
    );
    if keep_fraction >= 1.0 {
        return active.to_vec();
    }
    let mut kept: Vec<VoxelKey> = active
        .iter()
        .copied()
        .filter(|_| rng.gen_bool(keep_fraction))
        .collect();
    if kept.is_empty() && !active.is_empty() {
        kept.push(*active.choose(rng).unwrap());
    }
    kept
}

/// Per-tile sampling seed: a splitmix64 finalizer over the global seed
/// and the tile coordinates, so results do not depend on tile iteration
/// order.
pub fn tile_seed(seed: u64, coords: (i32, i32, i32)) -> u64 {
    let mut x = seed
        ^ (coords.0 as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (coords.1 as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
        ^ (coords.2 as u64).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn read_bounds_file(path: &Path) -> Result<Aabb> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::parse(path, 0, format!("bad bounds value: {e}")))?;
    if vals.len() != 6 {
        return Err(Error::parse(path, 0, format!("expected 6 bounds floats, got {}", vals.len())));
    }
    Aabb::new(
        Vec3::new(vals[0], vals[1], vals[2]),
        Vec3::new(vals[3], vals[4], vals[5]),
    )
}

pub fn write_bounds_file(path: &Path, bounds: &Aabb) -> Result<()> {
    let text = format!(
        "{} {} {} {} {} {}\n",
        bounds.min.x, bounds.min.y, bounds.min.z, bounds.max.x, bounds.max.y, bounds.max.z
    );
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
