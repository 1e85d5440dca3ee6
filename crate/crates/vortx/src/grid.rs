//! Sparse voxel hierarchy at 16/8/4 cm, scene tiling, and the
//! prune/expand transitions between hierarchy levels.
//!
//! Lattices nest exactly: fine voxel `(2i+a, 2j+b, 2k+c)` with
//! `a,b,c in {0,1}` is a child of medium voxel `(i, j, k)`, and the same
//! holds between medium and coarse. All levels share one grid origin.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geom::{Aabb, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    Coarse,
    Medium,
    Fine,
}

impl Level {
    pub fn voxel_size(self) -> f64 {
        match self {
            Level::Coarse => 0.16,
            Level::Medium => 0.08,
            Level::Fine => 0.04,
        }
    }

    /// Next finer level, if any.
    pub fn finer(self) -> Option<Level> {
        match self {
            Level::Coarse => Some(Level::Medium),
            Level::Medium => Some(Level::Fine),
            Level::Fine => None,
        }
    }

    pub fn coarser(self) -> Option<Level> {
        match self {
            Level::Coarse => None,
            Level::Medium => Some(Level::Coarse),
            Level::Fine => Some(Level::Medium),
        }
    }

    pub fn index(self) -> usize {
        match self {
            Level::Coarse => 0,
            Level::Medium => 1,
            Level::Fine => 2,
        }
    }

    pub const ALL: [Level; 3] = [Level::Coarse, Level::Medium, Level::Fine];

    pub fn name(self) -> &'static str {
        match self {
            Level::Coarse => "coarse",
            Level::Medium => "medium",
            Level::Fine => "fine",
        }
    }
}

/// Integer voxel coordinates at one hierarchy level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelKey {
    pub ix: i32,
    pub iy: i32,
    pub iz: i32,
}

impl VoxelKey {
    pub fn new(ix: i32, iy: i32, iz: i32) -> Self {
        VoxelKey { ix, iy, iz }
    }

    /// Parent key one level coarser.
    pub fn parent(self) -> VoxelKey {
        VoxelKey {
            ix: self.ix.div_euclid(2),
            iy: self.iy.div_euclid(2),
            iz: self.iz.div_euclid(2),
        }
    }

    /// The 8 children one level finer.
    pub fn children(self) -> [VoxelKey; 8] {
        let mut out = [self; 8];
        let mut i = 0;
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    out[i] = VoxelKey::new(2 * self.ix + a, 2 * self.iy + b, 2 * self.iz + c);
                    i += 1;
                }
            }
        }
        out
    }

    pub fn offset(self, dx: i32, dy: i32, dz: i32) -> VoxelKey {
        VoxelKey::new(self.ix + dx, self.iy + dy, self.iz + dz)
    }
}

/// Hash-indexed sparse voxel grid at one hierarchy level.
#[derive(Debug, Clone)]
pub struct SparseVoxelGrid<P> {
    pub origin: Vec3,
    pub level: Level,
    map: HashMap<VoxelKey, P>,
}

impl<P> SparseVoxelGrid<P> {
    pub fn new(origin: Vec3, level: Level) -> Self {
        SparseVoxelGrid { origin, level, map: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, key: VoxelKey, payload: P) -> Option<P> {
        self.map.insert(key, payload)
    }

    pub fn get(&self, key: &VoxelKey) -> Option<&P> {
        self.map.get(key)
    }

    pub fn get_mut(&mut self, key: &VoxelKey) -> Option<&mut P> {
        self.map.get_mut(key)
    }

    pub fn entry_or_insert_with(&mut self, key: VoxelKey, default: impl FnOnce() -> P) -> &mut P {
        self.map.entry(key).or_insert_with(default)
    }

    pub fn contains(&self, key: &VoxelKey) -> bool {
        self.map.contains_key(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VoxelKey, &P)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&VoxelKey, &mut P)> {
        self.map.iter_mut()
    }

    /// Keys in ascending `(ix, iy, iz)` order. Anything order-sensitive
    /// (loss sums, dumps, merges) iterates through this.
    pub fn keys_sorted(&self) -> Vec<VoxelKey> {
        let mut keys: Vec<VoxelKey> = self.map.keys().copied().collect();
        keys.sort_unstable();
        keys
    }

    pub fn voxel_center(&self, key: &VoxelKey) -> Vec3 {
        let s = self.level.voxel_size();
        self.origin
            + Vec3::new(
                (key.ix as f64 + 0.5) * s,
                (key.iy as f64 + 0.5) * s,
                (key.iz as f64 + 0.5) * s,
            )
    }

    /// Key of the voxel containing a world point.
    pub fn key_of_point(&self, p: &Vec3) -> VoxelKey {
        let s = self.level.voxel_size();
        VoxelKey::new(
            ((p.x - self.origin.x) / s).floor() as i32,
            ((p.y - self.origin.y) / s).floor() as i32,
            ((p.z - self.origin.z) / s).floor() as i32,
        )
    }

    pub fn map_payloads<Q>(&self, mut f: impl FnMut(&VoxelKey, &P) -> Q) -> SparseVoxelGrid<Q> {
        let mut out = SparseVoxelGrid::new(self.origin, self.level);
        for (k, p) in self.map.iter() {
            out.insert(*k, f(k, p));
        }
        out
    }

    pub fn retain(&mut self, mut f: impl FnMut(&VoxelKey, &P) -> bool) {
        self.map.retain(|k, p| f(k, p));
    }
}

/// Non-overlapping axis-aligned tiles covering a scene volume.
#[derive(Debug, Clone)]
pub struct TilePlan {
    pub tiles: Vec<Tile>,
}

#[derive(Debug, Clone)]
pub struct Tile {
    pub bounds: Aabb,
    /// Integer tile coordinates; the per-tile sampling seed is derived
    /// from these so results do not depend on tile iteration order.
    pub coords: (i32, i32, i32),
}

/// Tile a scene volume with axis-aligned cubes of edge `tile_size`;
/// boundary tiles are clipped to the scene bounds. Empty bounds produce
/// an empty plan.
pub fn tile_volume(scene_bounds: &Aabb, tile_size: f64) -> Result<TilePlan> {
    if tile_size <= 0.0 {
        return Err(Error::Config(format!("tile size must be positive, got {tile_size}")));
    }
    if scene_bounds.is_empty() {
        return Ok(TilePlan { tiles: Vec::new() });
    }
    let e = scene_bounds.extent();
    let n = [
        (e.x / tile_size).ceil() as i32,
        (e.y / tile_size).ceil() as i32,
        (e.z / tile_size).ceil() as i32,
    ];
    let mut tiles = Vec::new();
    for i in 0..n[0] {
        for j in 0..n[1] {
            for k in 0..n[2] {
                let min = scene_bounds.min
                    + Vec3::new(i as f64, j as f64, k as f64) * tile_size;
                let max = Vec3::new(
                    (min.x + tile_size).min(scene_bounds.max.x),
                    (min.y + tile_size).min(scene_bounds.max.y),
                    (min.z + tile_size).min(scene_bounds.max.z),
                );
                tiles.push(Tile {
                    bounds: Aabb::new(min, max)?,
                    coords: (i, j, k),
                });
            }
        }
    }
    Ok(TilePlan { tiles })
}

/// Morphological-dilation downsample: a parent voxel is occupied iff any
/// of its 8 children is occupied.
pub fn downsample_occupancy(fine: &SparseVoxelGrid<bool>) -> SparseVoxelGrid<bool> {
    let parent_level = fine
        .level
        .coarser()
        .expect("downsample_occupancy requires a fine or medium input grid");
    let mut out = SparseVoxelGrid::new(fine.origin, parent_level);
    for (key, &occ) in fine.iter() {
        if occ {
            out.insert(key.parent(), true);
        }
    }
    out
}

/// Coarse-to-fine expansion: the next level's active set is all 8
/// children of every voxel whose predicted probability reaches the
/// threshold.
pub fn expand_active(
    coarser_probs: &SparseVoxelGrid<f64>,
    threshold: f64,
) -> SparseVoxelGrid<()> {
    assert!(threshold > 0.0 && threshold < 1.0, "threshold must be in (0,1)");
    let finer = coarser_probs
        .level
        .finer()
        .expect("expand_active requires a coarse or medium input grid");
    let mut out = SparseVoxelGrid::new(coarser_probs.origin, finer);
    for (key, &p) in coarser_probs.iter() {
        if p >= threshold {
            for child in key.children() {
                out.insert(child, ());
            }
        }
    }
    out
}

/// Debug dump: one `ix iy iz level value...` line per voxel, sorted keys.
pub fn dump_grid<P>(
    grid: &SparseVoxelGrid<P>,
    mut values: impl FnMut(&P) -> Vec<f64>,
) -> String {
    let mut out = String::new();
    for key in grid.keys_sorted() {
        let payload = grid.get(&key).unwrap();
        write!(out, "{} {} {} {}", key.ix, key.iy, key.iz, grid.level.name()).unwrap();
        for v in values(payload) {
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tile_single() {
        let b = Aabb::new(Vec3::zeros(), Vec3::new(4.0, 4.0, 2.0)).unwrap();
        assert_eq!(tile_volume(&b, 4.0).unwrap().tiles.len(), 1);
    }

    #[test]
    fn tile_two() {
        let b = Aabb::new(Vec3::zeros(), Vec3::new(8.0, 4.0, 2.0)).unwrap();
        assert_eq!(tile_volume(&b, 4.0).unwrap().tiles.len(), 2);
    }

    #[test]
    fn tile_clipped() {
        let b = Aabb::new(Vec3::zeros(), Vec3::new(5.0, 4.0, 2.0)).unwrap();
        let plan = tile_volume(&b, 4.0).unwrap();
        assert_eq!(plan.tiles.len(), 2);
        let second = &plan.tiles[1];
        assert!((second.bounds.extent().x - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tile_empty_bounds() {
        let b = Aabb::new(Vec3::zeros(), Vec3::zeros()).unwrap();
        assert!(tile_volume(&b, 4.0).unwrap().tiles.is_empty());
    }

    #[test]
    fn tiles_disjoint_and_covering() {
        let b = Aabb::new(Vec3::new(-1.0, 0.0, 0.5), Vec3::new(6.3, 4.1, 2.9)).unwrap();
        let plan = tile_volume(&b, 3.84).unwrap();
        // Interiors disjoint: tile coords unique and bounds don't overlap.
        for (a, t1) in plan.tiles.iter().enumerate() {
            for t2 in plan.tiles.iter().skip(a + 1) {
                let overlap = (0..3).all(|i| {
                    t1.bounds.min[i] < t2.bounds.max[i] - 1e-12
                        && t2.bounds.min[i] < t1.bounds.max[i] - 1e-12
                });
                assert!(!overlap);
            }
        }
        // Covering: random interior points land in some tile.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let p = Vec3::new(
                rng.gen_range(b.min.x..b.max.x),
                rng.gen_range(b.min.y..b.max.y),
                rng.gen_range(b.min.z..b.max.z),
            );
            assert!(plan.tiles.iter().any(|t| t.bounds.contains(&p)));
        }
    }

    #[test]
    fn downsample_single_voxel() {
        let mut fine = SparseVoxelGrid::new(Vec3::zeros(), Level::Fine);
        fine.insert(VoxelKey::new(5, 3, -2), true);
        let med = downsample_occupancy(&fine);
        assert_eq!(med.level, Level::Medium);
        assert_eq!(med.len(), 1);
        assert!(med.contains(&VoxelKey::new(2, 1, -1)));
    }

    #[test]
    fn downsample_full_parent() {
        let mut fine = SparseVoxelGrid::new(Vec3::zeros(), Level::Fine);
        for child in VoxelKey::new(1, 1, 1).children() {
            fine.insert(child, true);
        }
        let med = downsample_occupancy(&fine);
        assert_eq!(med.len(), 1);
        assert!(med.contains(&VoxelKey::new(1, 1, 1)));
    }

    #[test]
    fn downsample_checkerboard_matches_brute_force() {
        // 4^3 fine block with checkerboard occupancy; brute-force OR over
        // each parent's dense child array.
        let mut fine = SparseVoxelGrid::new(Vec3::zeros(), Level::Fine);
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..4 {
                    if (x + y + z) % 2 == 0 {
                        fine.insert(VoxelKey::new(x, y, z), true);
                    }
                }
            }
        }
        let med = downsample_occupancy(&fine);
        for px in 0..2 {
            for py in 0..2 {
                for pz in 0..2 {
                    let brute = VoxelKey::new(px, py, pz)
                        .children()
                        .iter()
                        .any(|c| fine.get(c).copied().unwrap_or(false));
                    assert_eq!(med.contains(&VoxelKey::new(px, py, pz)), brute);
                }
            }
        }
        assert_eq!(med.len(), 8);
    }

    #[test]
    fn expand_above_threshold() {
        let mut coarse = SparseVoxelGrid::new(Vec3::zeros(), Level::Coarse);
        coarse.insert(VoxelKey::new(0, 0, 0), 0.9);
        let med = expand_active(&coarse, 0.5);
        assert_eq!(med.level, Level::Medium);
        assert_eq!(med.len(), 8);
    }

    #[test]
    fn expand_below_threshold_empty() {
        let mut coarse = SparseVoxelGrid::new(Vec3::zeros(), Level::Coarse);
        coarse.insert(VoxelKey::new(0, 0, 0), 0.1);
        coarse.insert(VoxelKey::new(1, 0, 0), 0.1);
        assert!(expand_active(&coarse, 0.5).is_empty());
    }

    #[test]
    fn expand_mixed() {
        let mut coarse = SparseVoxelGrid::new(Vec3::zeros(), Level::Coarse);
        coarse.insert(VoxelKey::new(0, 0, 0), 0.6);
        coarse.insert(VoxelKey::new(3, 0, 0), 0.4);
        let med = expand_active(&coarse, 0.5);
        assert_eq!(med.len(), 8);
        for child in VoxelKey::new(0, 0, 0).children() {
            assert!(med.contains(&child));
        }
    }

    #[test]
    fn expand_downsample_round_trip_superset() {
        let mut fine = SparseVoxelGrid::new(Vec3::zeros(), Level::Fine);
        for x in -3..5 {
            for y in 0..3 {
                fine.insert(VoxelKey::new(x, y, 7), true);
            }
        }
        let med = downsample_occupancy(&fine);
        let probs = med.map_payloads(|_, _| 1.0);
        let expanded = expand_active(&probs, 0.5);
        for key in fine.keys_sorted() {
            assert!(expanded.contains(&key));
        }
    }

    proptest! {
        #[test]
        fn center_key_round_trip(
            ix in -(1 << 20)..(1 << 20) as i32,
            iy in -(1 << 20)..(1 << 20) as i32,
            iz in -(1 << 20)..(1 << 20) as i32,
        ) {
            let grid: SparseVoxelGrid<()> =
                SparseVoxelGrid::new(Vec3::new(0.35, -1.2, 0.0), Level::Fine);
            let key = VoxelKey::new(ix, iy, iz);
            let center = grid.voxel_center(&key);
            prop_assert_eq!(grid.key_of_point(&center), key);
        }

        #[test]
        fn parent_child_nesting(ix in -1000i32..1000, iy in -1000i32..1000, iz in -1000i32..1000) {
            let key = VoxelKey::new(ix, iy, iz);
            for child in key.children() {
                prop_assert_eq!(child.parent(), key);
            }
        }
    }

    #[test]
    fn dump_format() {
        let mut g = SparseVoxelGrid::new(Vec3::zeros(), Level::Fine);
        g.insert(VoxelKey::new(1, 2, 3), 0.5f64);
        g.insert(VoxelKey::new(-1, 0, 0), -0.25f64);
        let dump = dump_grid(&g, |v| vec![*v]);
        assert_eq!(dump, "-1 0 0 fine -0.25\n1 2 3 fine 0.5\n");
    }
}
