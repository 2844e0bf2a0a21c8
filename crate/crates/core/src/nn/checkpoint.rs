//! Parameter checkpoints: `<stem>.bin` holds every tensor as little-endian
//! `f64` values back to back; `<stem>.json` is the manifest describing the
//! layer specs, tensor shapes and offsets, seed and optimizer step.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::layer::{Layer, LayerSpec};
use super::sequential::Sequential;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FORMAT: &str = "survfuse-f64le-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorRole {
    Param,
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub layer: usize,
    pub role: TensorRole,
    pub shape: Vec<usize>,
    /// Offset in `f64` values from the start of the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupManifest {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub groups: Vec<GroupManifest>,
    pub seed: u64,
    pub step: u64,
}

pub fn blob_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

/// Writes named layer sequences to `<stem>.bin` and `<stem>.json`.
pub fn save_checkpoint(
    stem: &Path,
    groups: &[(&str, &Sequential)],
    seed: u64,
    step: u64,
) -> Result<CheckpointManifest> {
    let mut blob = Vec::new();
    let mut offset = 0;
    let mut manifests = Vec::with_capacity(groups.len());
    for (name, seq) in groups {
        let mut tensors = Vec::new();
        for (li, layer) in seq.layers.iter().enumerate() {
            let all = layer
                .params
                .iter()
                .map(|t| (TensorRole::Param, t))
                .chain(layer.buffers.iter().map(|t| (TensorRole::Buffer, t)));
            for (role, t) in all {
                tensors.push(TensorEntry {
                    layer: li,
                    role,
                    shape: t.shape().to_vec(),
                    offset,
                });
                for v in t.data() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
                offset += t.len();
            }
        }
        manifests.push(GroupManifest {
            name: name.to_string(),
            layers: seq.specs(),
            tensors,
        });
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        groups: manifests,
        seed,
        step,
    };
    std::fs::write(blob_path(stem), blob)?;
    std::fs::write(
        manifest_path(stem),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Reads a checkpoint back into named layer sequences.
pub fn load_checkpoint(stem: &Path) -> Result<(CheckpointManifest, Vec<(String, Sequential)>)> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&std::fs::read_to_string(manifest_path(stem))?)?;
    if manifest.format != FORMAT {
        return Err(Error::Config(format!(
            "unsupported checkpoint format `{}`",
            manifest.format
        )));
    }
    let bytes = std::fs::read(blob_path(stem))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Input(format!(
            "checkpoint blob has {} bytes, not a multiple of 8",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut groups = Vec::with_capacity(manifest.groups.len());
    for g in &manifest.groups {
        let mut layers: Vec<Layer> = g
            .layers
            .iter()
            .map(|&spec| Layer {
                spec,
                params: Vec::new(),
                buffers: Vec::new(),
            })
            .collect();
        for e in &g.tensors {
            let n: usize = e.shape.iter().product();
            let data = values.get(e.offset..e.offset + n).ok_or_else(|| {
                Error::Input(format!("checkpoint blob too short for `{}`", g.name))
            })?;
            let t = Tensor::new(e.shape.clone(), data.to_vec())?;
            let layer = layers.get_mut(e.layer).ok_or_else(|| {
                Error::Input(format!("tensor refers to missing layer {}", e.layer))
            })?;
            match e.role {
                TensorRole::Param => layer.params.push(t),
                TensorRole::Buffer => layer.buffers.push(t),
            }
        }
        groups.push((g.name.clone(), Sequential::from_layers(layers)?));
    }
    Ok((manifest, groups))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let specs = [
            LayerSpec::conv3d(1, 2, 3),
            LayerSpec::Relu,
            LayerSpec::batchnorm3d(2),
            LayerSpec::GlobalAvgPool,
            LayerSpec::linear(2, 3),
        ];
        let a = Sequential::new(&specs, 1).unwrap();
        let b = Sequential::new(&[LayerSpec::linear(3, 1)], 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        save_checkpoint(&stem, &[("a", &a), ("b", &b)], 9, 4).unwrap();
        let (m, groups) = load_checkpoint(&stem).unwrap();
        assert_eq!((m.seed, m.step), (9, 4));
        assert_eq!(groups[0], ("a".to_string(), a));
        assert_eq!(groups[1], ("b".to_string(), b));
        let n: usize = m
            .groups
            .iter()
            .flat_map(|g| &g.tensors)
            .map(|e| e.shape.iter().product::<usize>())
            .sum();
        assert_eq!(
            std::fs::metadata(blob_path(&stem)).unwrap().len() as usize,
            8 * n
        );
    }
}
