//! Parameter containers and the RMMC checkpoint file format.
//!
//! Format (little-endian):
//! - bytes 0..4: magic `RMMC`
//! - bytes 4..8: format version, `u32` = 1
//! - bytes 8..12: manifest length in bytes, `u32`
//! - UTF-8 JSON manifest `{"arch_id": .., "groups": [{"name": .., "shape": [..]}, ..]}`
//! - raw `f32` blobs, concatenated in manifest order
//!
//! A "layer" is one named group. Dense layers store their weight and bias
//! together with shape `[out, in + 1]`, the bias in the last column.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RMMC";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    name: String,
    shape: Vec<usize>,
    values: Vec<f32>,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!(
                "group {name:?} has degenerate shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "group {name:?} shape {shape:?} holds {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Self { name, shape, values })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same shape and values under a different name.
    pub fn renamed(&self, name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            shape: self.shape.clone(),
            values: self.values.clone(),
        }
    }

    /// Same name and shape with new values; the length must match.
    pub fn with_values(&self, values: Vec<f32>) -> Result<Self> {
        Self::new(self.name.clone(), self.shape.clone(), values)
    }

    pub(crate) fn check_same_shape(&self, other: &ParamGroup) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} {:?} vs {:?} {:?}",
                self.name, self.shape, other.name, other.shape
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    arch_id: String,
    groups: Vec<ParamGroup>,
}

impl Checkpoint {
    pub fn new(arch_id: impl Into<String>, groups: Vec<ParamGroup>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::EmptyCheckpoint);
        }
        let mut seen = HashSet::new();
        for g in &groups {
            if !seen.insert(g.name.as_str()) {
                return Err(Error::Manifest(format!("duplicate group name {:?}", g.name)));
            }
        }
        Ok(Self {
            arch_id: arch_id.into(),
            groups,
        })
    }

    pub fn arch_id(&self) -> &str {
        &self.arch_id
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    /// Number of layers (groups).
    pub fn layer_count(&self) -> usize {
        self.groups.len()
    }

    pub fn param_count(&self) -> usize {
        self.groups.iter().map(ParamGroup::len).sum()
    }

    pub fn check_same_arch(&self, other: &Checkpoint) -> Result<()> {
        if self.arch_id != other.arch_id {
            return Err(Error::ArchMismatch(self.arch_id.clone(), other.arch_id.clone()));
        }
        Ok(())
    }

    /// `self + vector`, elementwise in f32.
    pub fn add_vector(&self, vector: &TaskVector) -> Result<Checkpoint> {
        if vector.groups.len() != self.groups.len() {
            return Err(Error::ShapeMismatch("group count differs".into()));
        }
        let groups = self
            .groups
            .iter()
            .zip(&vector.groups)
            .map(|(g, v)| {
                g.check_same_shape(v)?;
                g.with_values(g.values.iter().zip(&v.values).map(|(a, b)| a + b).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Checkpoint::new(self.arch_id.clone(), groups)
    }

    pub fn encode(&self) -> Vec<u8> {
        let manifest = Manifest {
            arch_id: self.arch_id.clone(),
            groups: self
                .groups
                .iter()
                .map(|g| ManifestEntry {
                    name: g.name.clone(),
                    shape: g.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + 4 * self.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for g in &self.groups {
            for v in &g.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 4 {
            return Err(Error::TruncatedFile("missing magic".into()));
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::TruncatedFile("header shorter than 12 bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let manifest_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let blob_start = HEADER_LEN
            .checked_add(manifest_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::TruncatedFile("manifest extends past end of file".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..blob_start])
            .map_err(|e| Error::Manifest(e.to_string()))?;

        let declared: usize = manifest
            .groups
            .iter()
            .map(|g| g.shape.iter().product::<usize>())
            .sum();
        let available = bytes.len() - blob_start;
        if available < declared * 4 {
            return Err(Error::TruncatedFile(format!(
                "manifest declares {declared} floats, blob holds {}",
                available / 4
            )));
        }
        if available != declared * 4 {
            return Err(Error::ShapeMismatch(format!(
                "manifest declares {} blob bytes, file holds {available}",
                declared * 4
            )));
        }

        let mut offset = blob_start;
        let mut groups = Vec::with_capacity(manifest.groups.len());
        for entry in manifest.groups {
            let numel: usize = entry.shape.iter().product();
            let values = bytes[offset..offset + numel * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            offset += numel * 4;
            groups.push(ParamGroup::new(entry.name, entry.shape, values)?);
        }
        Checkpoint::new(manifest.arch_id, groups)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    arch_id: String,
    groups: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ckpt.encode())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::decode(&fs::read(path)?)
}

/// Groupwise difference between a fine-tuned model and its base.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    groups: Vec<ParamGroup>,
}

impl TaskVector {
    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn from_groups(groups: Vec<ParamGroup>) -> Self {
        Self { groups }
    }
}

pub fn task_vector(ft: &Checkpoint, pt: &Checkpoint) -> Result<TaskVector> {
    ft.check_same_arch(pt)?;
    let groups = ft
        .groups
        .iter()
        .zip(&pt.groups)
        .map(|(f, p)| {
            f.check_same_shape(p)?;
            f.with_values(f.values.iter().zip(&p.values).map(|(a, b)| a - b).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskVector { groups })
}
