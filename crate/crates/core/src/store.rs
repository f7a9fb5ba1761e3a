//! Checkpoint I/O and the bounded snapshot history used by the moving average.
//!
//! Layout of one snapshot directory `<dir>/<id>/`:
//!
//! ```text
//! manifest               TOML: format version, arch id, meta, per-tensor records
//! tensors/<name>.bin     raw little-endian floats, row-major
//! ```

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{DType, ParameterSet, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest";
pub const TENSOR_DIR: &str = "tensors";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SnapshotId(pub String);

impl fmt::Display for SnapshotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SnapshotId {
    fn from(s: &str) -> Self {
        SnapshotId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub epoch: u64,
    pub task_order: Vec<String>,
    pub seed: u64,
    /// Wall-clock creation time; the only field excluded from determinism checks.
    pub created_at: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, String>,
}

impl SnapshotMeta {
    pub fn new(epoch: u64, task_order: Vec<String>, seed: u64) -> Self {
        SnapshotMeta {
            epoch,
            task_order,
            seed,
            created_at: chrono::Utc::now().to_rfc3339(),
            notes: BTreeMap::new(),
        }
    }

    pub fn with_note(mut self, key: &str, value: impl Into<String>) -> Self {
        self.notes.insert(key.to_string(), value.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    file: String,
    byte_length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    arch_id: String,
    meta: SnapshotMeta,
    tensors: Vec<TensorRecord>,
}

fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * t.dtype().byte_width());
    match t.dtype() {
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

fn decode(bytes: &[u8], dtype: DType) -> Vec<f64> {
    match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    }
}

fn validate_entry_name(name: &str) -> Result<()> {
    if name.is_empty()
        || name.contains(['/', '\\'])
        || name == "."
        || name == ".."
        || name.chars().any(char::is_control)
    {
        return Err(Error::InvalidArgument(format!(
            "entry name `{name}` cannot be used as a file name"
        )));
    }
    Ok(())
}

/// Content hash over arch id, names, shapes and raw bytes.
pub fn content_digest(params: &ParameterSet) -> String {
    let mut h = Sha256::new();
    h.update(params.arch_id().as_bytes());
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(t.dtype().to_string().as_bytes());
        h.update(encode(t));
    }
    hex::encode(h.finalize())
}

pub fn save_snapshot(params: &ParameterSet, meta: &SnapshotMeta, dir: &Path) -> Result<SnapshotId> {
    if params.is_empty() {
        return Err(Error::Empty("parameter set has no entries".into()));
    }
    if let Some(layer) = params.find_non_finite() {
        return Err(Error::NonFinite {
            layer: layer.to_string(),
        });
    }
    if meta.task_order.is_empty() {
        return Err(Error::InvalidArgument("snapshot task order is empty".into()));
    }
    for name in params.names() {
        validate_entry_name(name)?;
    }

    let digest = content_digest(params);
    let id = SnapshotId(format!("e{:06}-{}", meta.epoch, &digest[..12]));
    let root = dir.join(&id.0);
    let tensor_dir = root.join(TENSOR_DIR);
    fs::create_dir_all(&tensor_dir).map_err(|e| Error::io(&tensor_dir, e))?;

    let mut records = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        let file = format!("{TENSOR_DIR}/{name}.bin");
        let bytes = encode(t);
        let path = root.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        records.push(TensorRecord {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: t.dtype(),
            file,
            byte_length: bytes.len() as u64,
        });
    }

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        arch_id: params.arch_id().to_string(),
        meta: meta.clone(),
        tensors: records,
    };
    let text = toml::to_string(&manifest)
        .map_err(|e| Error::InvalidArgument(format!("manifest serialization: {e}")))?;
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(id)
}

pub fn snapshot_path(id: &SnapshotId, dir: &Path) -> PathBuf {
    dir.join(&id.0)
}

pub fn load_snapshot(id: &SnapshotId, dir: &Path) -> Result<(ParameterSet, SnapshotMeta)> {
    let root = snapshot_path(id, dir);
    let manifest_path = root.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::NotFound(format!(
            "snapshot `{id}` under {}",
            dir.display()
        )));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Corrupt {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Corrupt {
            path: manifest_path,
            reason: format!("unsupported format version {}", manifest.format_version),
        });
    }

    let mut params = ParameterSet::new(manifest.arch_id.clone());
    for rec in &manifest.tensors {
        let path = root.join(&rec.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let count: usize = rec.shape.iter().product();
        let expected = count * rec.dtype.byte_width();
        if bytes.len() as u64 != rec.byte_length || bytes.len() != expected {
            return Err(Error::Corrupt {
                path,
                reason: format!(
                    "`{}` holds {} bytes, manifest says {} for shape {:?}",
                    rec.name,
                    bytes.len(),
                    rec.byte_length,
                    rec.shape
                ),
            });
        }
        let tensor = Tensor::new(rec.shape.clone(), decode(&bytes, rec.dtype), rec.dtype)
            .map_err(|e| Error::Corrupt {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        params.insert(rec.name.clone(), tensor);
    }
    Ok((params, manifest.meta))
}

/// Manifest text with the timestamp removed, for byte-level comparisons.
pub fn manifest_without_timestamp(id: &SnapshotId, dir: &Path) -> Result<String> {
    let path = snapshot_path(id, dir).join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim_start().starts_with("created_at"))
        .collect::<Vec<_>>()
        .join("\n"))
}

/// Last `capacity` snapshots, oldest first.
#[derive(Debug, Clone)]
pub struct SnapshotRing {
    capacity: usize,
    items: VecDeque<(u64, ParameterSet)>,
}

impl SnapshotRing {
    pub const DEFAULT_CAPACITY: usize = 5;

    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("ring capacity must be positive".into()));
        }
        Ok(SnapshotRing {
            capacity,
            items: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn epochs(&self) -> Vec<u64> {
        self.items.iter().map(|(e, _)| *e).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(u64, ParameterSet)> {
        self.items.iter()
    }

    pub fn newest(&self) -> Option<&(u64, ParameterSet)> {
        self.items.back()
    }

    pub fn push(&mut self, epoch: u64, snap: ParameterSet) -> Result<()> {
        if let Some((newest, reference)) = self.items.back() {
            if epoch <= *newest {
                return Err(Error::InvalidArgument(format!(
                    "epoch {epoch} does not follow newest epoch {newest}"
                )));
            }
            reference.check_aligned(&snap)?;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back((epoch, snap));
        Ok(())
    }
}
