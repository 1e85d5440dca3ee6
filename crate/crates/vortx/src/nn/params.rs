//! Named parameter storage with checkpoint serialization.
//!
//! Master values are kept in `f64` and cast to the working scalar type
//! when leaves are created, so a store can drive both `f32` training and
//! `f64` gradient checks without duplication.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VXCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
struct Param {
    data: Vec<f64>,
    shape: Vec<usize>,
    frozen: bool,
}

/// Named tensors, ordered by name for deterministic iteration.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter with explicit values. Panics on duplicates.
    pub fn insert(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "param {name}: {} values for shape {:?}",
            data.len(),
            shape
        );
        let prev = self.params.insert(
            name.to_string(),
            Param {
                data,
                shape: shape.to_vec(),
                frozen: false,
            },
        );
        assert!(prev.is_none(), "duplicate param {name}");
    }

    /// Xavier-uniform matrix `(fan_in, fan_out)`, bound sqrt(6/(in+out)).
    pub fn init_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.insert(name, data, &[fan_in, fan_out]);
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, vec![0.0; shape.iter().product()], shape);
    }

    pub fn init_ones(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, vec![1.0; shape.iter().product()], shape);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    pub fn shape(&self, name: &str) -> &[usize] {
        &self.param(name).shape
    }

    pub fn values(&self, name: &str) -> &[f64] {
        &self.param(name).data
    }

    pub fn values_mut(&mut self, name: &str) -> &mut [f64] {
        &mut self.params.get_mut(name).unwrap_or_else(|| panic!("unknown param {name}")).data
    }

    fn param(&self, name: &str) -> &Param {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown param {name}"))
    }

    /// Mark a parameter as exempt from optimizer updates.
    pub fn set_frozen(&mut self, name: &str, frozen: bool) {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown param {name}"))
            .frozen = frozen;
    }

    /// Freeze every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str, frozen: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.param(name).frozen
    }

    /// Differentiable leaf on `tape` holding this parameter's values.
    pub fn leaf<T: Scalar>(&self, tape: &Tape<T>, name: &str) -> Tensor<T> {
        let p = self.param(name);
        tape.leaf(p.data.iter().map(|&v| T::from_f64(v)).collect(), &p.shape)
    }

    /// Nudge one scalar entry; used by finite-difference checks.
    pub fn perturb(&mut self, name: &str, index: usize, delta: f64) {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown param {name}"))
            .data[index] += delta;
    }

    /// Write a checkpoint: magic, version, fingerprint, then name-sorted
    /// f32 little-endian arrays.
    pub fn save(&self, path: &Path, fingerprint: &str) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)
            .map_err(|e| Error::io(path, e))?;
        write_string(&mut w, fingerprint).map_err(|e| Error::io(path, e))?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)
            .map_err(|e| Error::io(path, e))?;
        for (name, p) in &self.params {
            write_string(&mut w, name).map_err(|e| Error::io(path, e))?;
            w.write_u32::<LittleEndian>(p.shape.len() as u32)
                .map_err(|e| Error::io(path, e))?;
            for &d in &p.shape {
                w.write_u64::<LittleEndian>(d as u64)
                    .map_err(|e| Error::io(path, e))?;
            }
            w.write_u8(p.frozen as u8).map_err(|e| Error::io(path, e))?;
            for &v in &p.data {
                w.write_f32::<LittleEndian>(v as f32)
                    .map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Load a checkpoint, returning the store and its fingerprint.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: bad magic {:?}",
                path.display(),
                magic
            )));
        }
        let version = r
            .read_u32::<LittleEndian>()
            .map_err(|e| Error::io(path, e))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported version {version} (expected {CHECKPOINT_VERSION})",
                path.display()
            )));
        }
        let fingerprint = read_string(&mut r).map_err(|e| Error::io(path, e))?;
        let count = r
            .read_u32::<LittleEndian>()
            .map_err(|e| Error::io(path, e))?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name = read_string(&mut r).map_err(|e| Error::io(path, e))?;
            let rank = r
                .read_u32::<LittleEndian>()
                .map_err(|e| Error::io(path, e))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(
                    r.read_u64::<LittleEndian>()
                        .map_err(|e| Error::io(path, e))? as usize,
                );
            }
            let frozen = r.read_u8().map_err(|e| Error::io(path, e))? != 0;
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(
                    r.read_f32::<LittleEndian>()
                        .map_err(|e| Error::io(path, e))? as f64,
                );
            }
            if store.params.contains_key(&name) {
                return Err(Error::Checkpoint(format!(
                    "{}: duplicate param {name}",
                    path.display()
                )));
            }
            store.params.insert(name, Param { data, shape, frozen });
        }
        Ok((store, fingerprint))
    }
}

/// Lazily materialized parameter leaves on one tape. After `backward`,
/// [`LeafSet::gradients`] collects per-name gradient vectors for the
/// optimizer.
pub struct LeafSet<'a, T: Scalar> {
    store: &'a ParamStore,
    tape: Tape<T>,
    leaves: std::cell::RefCell<BTreeMap<String, Tensor<T>>>,
}

impl<'a, T: Scalar> LeafSet<'a, T> {
    pub fn new(store: &'a ParamStore, tape: &Tape<T>) -> Self {
        LeafSet {
            store,
            tape: tape.clone(),
            leaves: std::cell::RefCell::new(BTreeMap::new()),
        }
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Leaf tensor for `name`, created on first use.
    pub fn get(&self, name: &str) -> Tensor<T> {
        let mut leaves = self.leaves.borrow_mut();
        if let Some(t) = leaves.get(name) {
            return t.clone();
        }
        let t = self.store.leaf(&self.tape, name);
        leaves.insert(name.to_string(), t.clone());
        t
    }

    /// Accumulated gradients of every materialized leaf, as `f64`.
    pub fn gradients(&self, grads: &super::tensor::Gradients<T>) -> BTreeMap<String, Vec<f64>> {
        self.leaves
            .borrow()
            .iter()
            .map(|(name, leaf)| {
                let g = leaf
                    .grad_of(grads)
                    .iter()
                    .map(|&v| Scalar::to_f64(v))
                    .collect();
                (name.clone(), g)
            })
            .collect()
    }

    /// Leaf tensors materialized so far, by name.
    pub fn names(&self) -> Vec<String> {
        self.leaves.borrow().keys().cloned().collect()
    }
}

fn write_string<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_string<R: Read>(r: &mut R) -> std::io::Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn xavier_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.init_linear("w", 64, 16, &mut rng);
        let bound = (6.0 / 80.0f64).sqrt();
        assert!(store.values("w").iter().all(|&v| v.abs() < bound));
        assert_eq!(store.shape("w"), &[64, 16]);
    }

    #[test]
    fn save_load_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        store.init_linear("a.w", 3, 5, &mut rng);
        store.init_zeros("a.b", &[5]);
        store.set_frozen("a.b", true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        store.save(&path, "cfg-123").unwrap();
        let (loaded, fp) = ParamStore::load(&path).unwrap();
        assert_eq!(fp, "cfg-123");
        assert_eq!(loaded.len(), 2);
        assert!(loaded.is_frozen("a.b"));
        assert_eq!(loaded.shape("a.w"), &[3, 5]);
        // values pass through f32 on disk
        for (&a, &b) in store.values("a.w").iter().zip(loaded.values("a.w")) {
            assert_eq!(a as f32, b as f32);
        }
    }

    #[test]
    fn save_twice_identical_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        store.init_linear("w", 8, 8, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        store.save(&p1, "fp").unwrap();
        store.save(&p2, "fp").unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            ParamStore::load(&path),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn freeze_prefix_scopes() {
        let mut store = ParamStore::new();
        store.init_zeros("feat.w", &[2]);
        store.init_zeros("head.w", &[2]);
        store.freeze_prefix("feat.", true);
        assert!(store.is_frozen("feat.w"));
        assert!(!store.is_frozen("head.w"));
    }
}
