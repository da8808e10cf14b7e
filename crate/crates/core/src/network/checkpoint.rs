//! Checkpoint serialization and pretrain-to-finetune weight transfer.
//!
//! A checkpoint is a self-describing archive: a JSON header (config,
//! provenance, tensor index) followed by raw little-endian f64 data. Loading
//! validates config compatibility before touching weights, and the format
//! round-trips weights bit-exactly.

use super::{build_unet, NetworkError, UNet, UNetConfig};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SSLSEG01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// Where a checkpoint came from: training phase, epoch budget, stage seed,
/// and the hash of the split manifest it was trained under.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub phase: Phase,
    pub epochs: usize,
    pub seed: u64,
    pub split_manifest_hash: String,
}

/// A named tensor with shape and flat data.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Serialized model state: trainable parameters and BN running buffers,
/// plus the config that produced them.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: UNetConfig,
    pub provenance: Provenance,
    pub params: BTreeMap<String, NamedTensor>,
    pub buffers: BTreeMap<String, NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    kind: String, // "param" | "buffer"
    shape: Vec<usize>,
    offset: usize, // element offset into the data section
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: UNetConfig,
    provenance: Provenance,
    entries: Vec<HeaderEntry>,
}

impl Checkpoint {
    /// Snapshot a model's full state.
    pub fn from_model(model: &UNet, provenance: Provenance) -> Self {
        let mut params = BTreeMap::new();
        model.visit_params(&mut |name, view| {
            params.insert(
                name.to_string(),
                NamedTensor {
                    shape: view.shape().to_vec(),
                    data: view.iter().copied().collect(),
                },
            );
        });
        let mut buffers = BTreeMap::new();
        model.visit_buffers(&mut |name, view| {
            buffers.insert(
                name.to_string(),
                NamedTensor {
                    shape: view.shape().to_vec(),
                    data: view.iter().copied().collect(),
                },
            );
        });
        Self {
            config: model.config().clone(),
            provenance,
            params,
            buffers,
        }
    }

    /// Rebuild the model this checkpoint was taken from. Every tensor the
    /// config produces must be present with a matching shape.
    pub fn build_model(&self) -> Result<UNet, NetworkError> {
        let mut rng = crate::rng::seeded_rng(0);
        let mut model = build_unet(&self.config, &mut rng)?;
        let mut missing = Vec::new();
        model.visit_params_mut(&mut |name, mut view| {
            match self.params.get(name) {
                Some(t) if t.shape == view.shape() => {
                    for (dst, &src) in view.iter_mut().zip(t.data.iter()) {
                        *dst = src;
                    }
                }
                _ => missing.push(name.to_string()),
            }
        });
        model.visit_buffers_mut(&mut |name, mut view| {
            match self.buffers.get(name) {
                Some(t) if t.shape == view.shape() => {
                    for (dst, &src) in view.iter_mut().zip(t.data.iter()) {
                        *dst = src;
                    }
                }
                _ => missing.push(name.to_string()),
            }
        });
        if !missing.is_empty() {
            return Err(NetworkError::MalformedCheckpoint {
                reason: format!("missing or mis-shaped tensors: {}", missing.join(", ")),
            });
        }
        let expected = self.params.len() + self.buffers.len();
        let mut produced = 0usize;
        {
            let mut count = |_: &str, _: ndarray::ArrayViewD<'_, f64>| produced += 1;
            let model_ref = &model;
            model_ref.visit_params(&mut count);
            model_ref.visit_buffers(&mut count);
        }
        if produced != expected {
            return Err(NetworkError::MalformedCheckpoint {
                reason: format!(
                    "checkpoint carries {expected} tensors but the config produces {produced}"
                ),
            });
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), NetworkError> {
        let io_err = |source| NetworkError::CheckpointIo {
            path: path.to_path_buf(),
            source,
        };
        let mut entries = Vec::new();
        let mut offset = 0usize;
        for (kind, map) in [("param", &self.params), ("buffer", &self.buffers)] {
            for (name, t) in map {
                entries.push(HeaderEntry {
                    name: name.clone(),
                    kind: kind.to_string(),
                    shape: t.shape.clone(),
                    offset,
                    len: t.data.len(),
                });
                offset += t.data.len();
            }
        }
        let header = Header {
            config: self.config.clone(),
            provenance: self.provenance.clone(),
            entries,
        };
        let header_json =
            serde_json::to_vec(&header).map_err(|e| NetworkError::MalformedCheckpoint {
                reason: e.to_string(),
            })?;

        let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        file.write_all(MAGIC).map_err(io_err)?;
        file.write_all(&(header_json.len() as u64).to_le_bytes())
            .map_err(io_err)?;
        file.write_all(&header_json).map_err(io_err)?;
        for map in [&self.params, &self.buffers] {
            for t in map.values() {
                for v in &t.data {
                    file.write_all(&v.to_le_bytes()).map_err(io_err)?;
                }
            }
        }
        file.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NetworkError> {
        let io_err = |source| NetworkError::CheckpointIo {
            path: path.to_path_buf(),
            source,
        };
        let mut file = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MAGIC {
            return Err(NetworkError::MalformedCheckpoint {
                reason: "bad magic bytes".into(),
            });
        }
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes).map_err(io_err)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_json = vec![0u8; header_len];
        file.read_exact(&mut header_json).map_err(io_err)?;
        let header: Header =
            serde_json::from_slice(&header_json).map_err(|e| NetworkError::MalformedCheckpoint {
                reason: e.to_string(),
            })?;
        header.config.validate()?;

        let total: usize = header.entries.iter().map(|e| e.len).sum();
        let mut raw = vec![0u8; total * 8];
        file.read_exact(&mut raw).map_err(io_err)?;

        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        for entry in &header.entries {
            let expected: usize = entry.shape.iter().product();
            if expected != entry.len {
                return Err(NetworkError::MalformedCheckpoint {
                    reason: format!("tensor '{}' shape/len disagreement", entry.name),
                });
            }
            let start = entry.offset * 8;
            let end = start + entry.len * 8;
            if end > raw.len() {
                return Err(NetworkError::MalformedCheckpoint {
                    reason: format!("tensor '{}' data out of bounds", entry.name),
                });
            }
            let data: Vec<f64> = raw[start..end]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            let tensor = NamedTensor {
                shape: entry.shape.clone(),
                data,
            };
            match entry.kind.as_str() {
                "param" => {
                    params.insert(entry.name.clone(), tensor);
                }
                "buffer" => {
                    buffers.insert(entry.name.clone(), tensor);
                }
                other => {
                    return Err(NetworkError::MalformedCheckpoint {
                        reason: format!("unknown tensor kind '{other}'"),
                    })
                }
            }
        }
        Ok(Self {
            config: header.config,
            provenance: header.provenance,
            params,
            buffers,
        })
    }
}

/// Counts of tensors copied vs. freshly initialized during transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransferStats {
    pub transferred_tensors: usize,
    pub reinitialized_tensors: usize,
    pub transferred_elements: usize,
    pub reinitialized_elements: usize,
}

/// Initialize a model for `target_cfg` from a pretrained checkpoint: every
/// parameter and buffer with a matching name and shape is copied; the output
/// head is freshly initialized when its shape differs (3-channel inpainting
/// head -> 1-channel segmentation head).
///
/// The encoder/decoder trunks must agree exactly; a name-set or shape
/// difference outside the head is an architecture mismatch.
pub fn transfer_weights<R: Rng>(
    pretrained: &Checkpoint,
    target_cfg: &UNetConfig,
    rng: &mut R,
) -> Result<(UNet, TransferStats), NetworkError> {
    target_cfg.validate()?;
    if !pretrained.config.same_trunk(target_cfg) {
        return Err(NetworkError::ArchitectureMismatch {
            reason: format!(
                "trunk configs differ: checkpoint depth/base/mult/bn = {}/{}/{}/{} vs target {}/{}/{}/{}",
                pretrained.config.depth,
                pretrained.config.base_channels,
                pretrained.config.channel_multiplier,
                pretrained.config.batch_norm,
                target_cfg.depth,
                target_cfg.base_channels,
                target_cfg.channel_multiplier,
                target_cfg.batch_norm,
            ),
        });
    }

    let mut model = build_unet(target_cfg, rng)?;

    // Name-set comparison over the trunk (everything but the head).
    let mut target_trunk: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    model.visit_params(&mut |name, view| {
        if !name.starts_with("head.") {
            target_trunk.insert(name.to_string(), view.shape().to_vec());
        }
    });
    let source_trunk: BTreeMap<String, Vec<usize>> = pretrained
        .params
        .iter()
        .filter(|(name, _)| !name.starts_with("head."))
        .map(|(name, t)| (name.clone(), t.shape.clone()))
        .collect();
    if target_trunk != source_trunk {
        let only_src: Vec<&String> = source_trunk
            .keys()
            .filter(|k| !target_trunk.contains_key(*k))
            .collect();
        let only_tgt: Vec<&String> = target_trunk
            .keys()
            .filter(|k| !source_trunk.contains_key(*k))
            .collect();
        return Err(NetworkError::ArchitectureMismatch {
            reason: format!(
                "trunk tensor sets differ (checkpoint-only: {only_src:?}, target-only: {only_tgt:?})"
            ),
        });
    }

    let mut stats = TransferStats {
        transferred_tensors: 0,
        reinitialized_tensors: 0,
        transferred_elements: 0,
        reinitialized_elements: 0,
    };
    model.visit_params_mut(&mut |name, mut view| {
        match pretrained.params.get(name) {
            Some(t) if t.shape == view.shape() => {
                for (dst, &src) in view.iter_mut().zip(t.data.iter()) {
                    *dst = src;
                }
                stats.transferred_tensors += 1;
                stats.transferred_elements += t.data.len();
            }
            _ => {
                // Head with a different out_channels keeps its fresh init.
                stats.reinitialized_tensors += 1;
                stats.reinitialized_elements += view.len();
            }
        }
    });
    model.visit_buffers_mut(&mut |name, mut view| {
        if let Some(t) = pretrained.buffers.get(name) {
            if t.shape == view.shape() {
                for (dst, &src) in view.iter_mut().zip(t.data.iter()) {
                    *dst = src;
                }
            }
        }
    });
    Ok((model, stats))
}
