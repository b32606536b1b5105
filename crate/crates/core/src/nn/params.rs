//! Named parameter storage and the checkpoint file format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "PSGCKPT\0"
//! version    u32       1
//! meta_len   u64       length of the JSON manifest in bytes
//! meta       meta_len  UTF-8 JSON: {"config": <any>, "params": [{"name", "shape": [r, c], "trainable"}]}
//! payload    Σ r·c·8   f64 values of every parameter in manifest order, row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Mat,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, ParamId>,
}

/// Truncated normal (±2σ) initialisation.
pub fn trunc_normal(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Mat {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Mat::from_shape_fn((rows, cols), |_| loop {
        let z: f64 = normal.sample(rng);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}

pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Panics on a duplicate name, which is a
    /// programming error in model construction.
    pub fn add(&mut self, name: impl Into<String>, value: Mat, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool) {
        for e in &mut self.entries {
            e.trainable = pred(&e.name);
        }
    }

    pub fn freeze_all(&mut self) {
        self.set_trainable_where(|_| false);
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.name.clone())
            .collect()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Copy every parameter whose name starts with `from_prefix` into `self`,
    /// renamed with `to_prefix`. Returns the number copied.
    pub fn copy_prefixed(
        &mut self,
        source: &ParamStore,
        from_prefix: &str,
        to_prefix: &str,
    ) -> Result<usize> {
        let mut copied = 0;
        for e in &source.entries {
            if let Some(rest) = e.name.strip_prefix(from_prefix) {
                let target = format!("{to_prefix}{rest}");
                let id = self
                    .id(&target)
                    .ok_or_else(|| Error::invalid(format!("no parameter named {target}")))?;
                let dst = &mut self.entries[id.0].value;
                if dst.dim() != e.value.dim() {
                    return Err(Error::invalid(format!(
                        "shape mismatch copying {} into {target}: {:?} vs {:?}",
                        e.name,
                        e.value.dim(),
                        dst.dim()
                    )));
                }
                dst.assign(&e.value);
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Names whose values differ (bitwise) between two stores with the same layout.
    pub fn diff(&self, other: &ParamStore) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| match other.id(&e.name) {
                Some(id) => {
                    let o = other.value(id);
                    o.dim() != e.value.dim()
                        || o.iter().zip(e.value.iter()).any(|(a, b)| a.to_bits() != b.to_bits())
                }
                None => true,
            })
            .map(|e| e.name.clone())
            .collect()
    }

    /// Overwrite values with a store of identical layout (e.g. a loaded checkpoint).
    pub fn load_values(&mut self, source: &ParamStore) -> Result<()> {
        for e in &mut self.entries {
            let id = source
                .id(&e.name)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks parameter {}", e.name)))?;
            let v = source.value(id);
            if v.dim() != e.value.dim() {
                return Err(Error::invalid(format!(
                    "checkpoint shape mismatch for {}: {:?} vs {:?}",
                    e.name,
                    v.dim(),
                    e.value.dim()
                )));
            }
            e.value.assign(v);
        }
        Ok(())
    }
}

const CKPT_MAGIC: &[u8; 8] = b"PSGCKPT\0";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: [usize; 2],
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: serde_json::Value,
    params: Vec<ParamMeta>,
}

/// Serialise a store plus an arbitrary config manifest.
pub fn write_checkpoint(path: &Path, store: &ParamStore, config: &serde_json::Value) -> Result<()> {
    let meta = CheckpointMeta {
        config: config.clone(),
        params: store
            .entries
            .iter()
            .map(|e| ParamMeta {
                name: e.name.clone(),
                shape: [e.value.nrows(), e.value.ncols()],
                trainable: e.trainable,
            })
            .collect(),
    };
    let meta_bytes = serde_json::to_vec(&meta).expect("checkpoint manifest serialises");
    let mut buf = Vec::with_capacity(24 + meta_bytes.len() + store.num_values() * 8);
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta_bytes);
    for e in &store.entries {
        for &v in e.value.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Read a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Dependency(format!("checkpoint {} does not exist", path.display()))
        } else {
            Error::io(path, e)
        }
    })?;
    if bytes.len() < 20 || &bytes[..8] != CKPT_MAGIC {
        return Err(Error::corrupt(path, "bad checkpoint magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::corrupt(path, format!("unsupported checkpoint version {version}")));
    }
    let meta_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let meta_end = 20usize
        .checked_add(meta_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::corrupt(path, "truncated manifest"))?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[20..meta_end])
        .map_err(|e| Error::corrupt(path, format!("manifest: {e}")))?;
    let expected: usize = meta.params.iter().map(|p| p.shape[0] * p.shape[1] * 8).sum();
    if bytes.len() - meta_end != expected {
        return Err(Error::corrupt(
            path,
            format!("payload is {} bytes, manifest implies {expected}", bytes.len() - meta_end),
        ));
    }
    let mut store = ParamStore::new();
    let mut off = meta_end;
    for p in meta.params {
        let n = p.shape[0] * p.shape[1];
        let vals: Vec<f64> = bytes[off..off + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off += n * 8;
        let m = Mat::from_shape_vec((p.shape[0], p.shape[1]), vals)
            .map_err(|e| Error::corrupt(path, e.to_string()))?;
        store.add(p.name, m, p.trainable);
    }
    Ok((store, meta.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = rng_for(1, "ckpt", &[]);
        let mut store = ParamStore::new();
        store.add("a.weight", uniform(3, 4, 1.0, &mut rng), true);
        store.add("b.bias", uniform(1, 4, 1.0, &mut rng), false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = serde_json::json!({"dim": 4});
        write_checkpoint(&path, &store, &cfg).unwrap();
        let (back, cfg_back) = read_checkpoint(&path).unwrap();
        assert_eq!(cfg_back, cfg);
        assert!(store.diff(&back).is_empty());
        assert!(!back.is_trainable(back.id("b.bias").unwrap()));
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Mat::zeros((2, 2)), true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        write_checkpoint(&path, &store, &serde_json::Value::Null).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Corrupt { .. })));
        fs::write(&path, b"garbage!garbage!garbage!").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn missing_checkpoint_is_a_dependency_error() {
        let err = read_checkpoint(Path::new("/nonexistent/x.ckpt")).unwrap_err();
        assert!(matches!(err, Error::Dependency(_)));
    }

    #[test]
    fn trunc_normal_respects_bounds() {
        let mut rng = rng_for(3, "init", &[]);
        let m = trunc_normal(50, 50, 0.02, &mut rng);
        assert!(m.iter().all(|v| v.abs() <= 0.04));
    }
}
