//! Checkpoint persistence.
//!
//! Layout: an 8-byte little-endian header length, a JSON header (format
//! version, config snapshot, tensor manifest, optimizer step, RNG cursor),
//! then raw 32-bit little-endian tensor payloads in manifest order. Every
//! tensor carries a CRC in the manifest, so a flipped payload byte is
//! caught at load time and named. A finalized checkpoint additionally
//! stores the materialized discriminator embedding table (the sum of the
//! shared table and the delta) for downstream use.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{ModelConfig, Parameters};
use crate::objectives::LossWeights;
use crate::optim::{AdamState, Moments, TrainConfig};
use crate::tensor::Array;
use crate::trainer::{CorruptionConfig, Trainer};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Name under which a finalized checkpoint stores the summed embeddings.
pub const EXPORT_E_D: &str = "export.e_d";

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload region.
    pub offset: u64,
    pub crc32: u32,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct Header {
    pub version: u32,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub corruption: CorruptionConfig,
    pub weights: LossWeights,
    pub opt_step: u64,
    pub next_draw: u64,
    pub manifest: Vec<ManifestEntry>,
}

/// Everything needed to resume training or run inference.
#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub corruption: CorruptionConfig,
    pub weights: LossWeights,
    pub params: Parameters<f32>,
    pub opt: AdamState<f32>,
    pub next_draw: u64,
    /// Present only in finalized checkpoints.
    pub exported_e_d: Option<Array<f32>>,
}

impl LoadedCheckpoint {
    pub fn into_trainer(self) -> Trainer {
        Trainer {
            params: self.params,
            model_config: self.model_config,
            train_config: self.train_config,
            corruption: self.corruption,
            weights: self.weights,
            opt: self.opt,
            next_draw: self.next_draw,
        }
    }
}

fn tensor_bytes(a: &Array<f32>) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(a.numel() * 4);
    for &v in a.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

pub fn save_checkpoint(path: &Path, trainer: &Trainer, finalize: bool) -> Result<()> {
    let mut tensors: Vec<(String, &Array<f32>)> = Vec::new();
    trainer.params.visit(&mut |name, a| {
        tensors.push((format!("param.{name}"), a));
    });
    for (name, mom) in &trainer.opt.slots {
        tensors.push((format!("opt.m.{name}"), &mom.m));
        tensors.push((format!("opt.v.{name}"), &mom.v));
    }
    let exported;
    if finalize {
        exported = trainer.params.materialize_discriminator_embeddings();
        tensors.push((EXPORT_E_D.to_string(), &exported));
    }

    let mut manifest = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, a) in tensors {
        let bytes = tensor_bytes(a);
        manifest.push(ManifestEntry {
            name,
            shape: a.shape().to_vec(),
            offset: payload.len() as u64,
            crc32: crc32fast::hash(&bytes),
        });
        payload.extend_from_slice(&bytes);
    }

    let header = Header {
        version: CHECKPOINT_VERSION,
        model_config: trainer.model_config.clone(),
        train_config: trainer.train_config.clone(),
        corruption: trainer.corruption.clone(),
        weights: trainer.weights,
        opt_step: trainer.opt.step,
        next_draw: trainer.next_draw,
        manifest,
    };
    write_raw(path, &header, &payload)
}

pub(crate) fn write_raw(path: &Path, header: &Header, payload: &[u8]) -> Result<()> {
    let header_json = serde_json::to_vec(header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(header_json.len() as u64).to_le_bytes())?;
    w.write_all(&header_json)?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

fn read_tensor(payload: &[u8], entry: &ManifestEntry) -> Result<Array<f32>> {
    let numel: usize = entry.shape.iter().product();
    let start = entry.offset as usize;
    let need = start + numel * 4;
    if need > payload.len() {
        return Err(CoreError::CheckpointTruncated {
            need,
            have: payload.len(),
        });
    }
    let bytes = &payload[start..need];
    if crc32fast::hash(bytes) != entry.crc32 {
        return Err(CoreError::CheckpointCrc {
            name: entry.name.clone(),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Array::new(entry.shape.clone(), data))
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut file = File::open(path)?;
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    if header_len > 64 << 20 {
        return Err(CoreError::Config(format!(
            "implausible checkpoint header length {header_len}"
        )));
    }
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(CoreError::CheckpointVersion {
            version: header.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    header.model_config.validate()?;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;

    let find = |name: &str| header.manifest.iter().find(|e| e.name == name);

    // Parameters: every tensor must be present with the configured shape.
    let mut params = Parameters::<f32>::init(&header.model_config, 0);
    let mut failure: Option<CoreError> = None;
    params.visit_mut(&mut |name, a| {
        if failure.is_some() {
            return;
        }
        let full = format!("param.{name}");
        let Some(entry) = find(&full) else {
            failure = Some(CoreError::CheckpointMissing { name: full });
            return;
        };
        if entry.shape != a.shape() {
            failure = Some(CoreError::CheckpointShape {
                name: full,
                found: entry.shape.clone(),
                expected: a.shape().to_vec(),
            });
            return;
        }
        match read_tensor(&payload, entry) {
            Ok(t) => *a = t,
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }

    // Optimizer moments travel in pairs.
    let mut opt = AdamState::new();
    opt.step = header.opt_step;
    let mut names = Vec::new();
    params.visit(&mut |name, _| names.push(name));
    for name in names {
        let m_name = format!("opt.m.{name}");
        let v_name = format!("opt.v.{name}");
        match (find(&m_name), find(&v_name)) {
            (Some(me), Some(ve)) => {
                opt.slots.insert(
                    name,
                    Moments {
                        m: read_tensor(&payload, me)?,
                        v: read_tensor(&payload, ve)?,
                    },
                );
            }
            (None, None) => {}
            (Some(_), None) => return Err(CoreError::CheckpointMissing { name: v_name }),
            (None, Some(_)) => return Err(CoreError::CheckpointMissing { name: m_name }),
        }
    }

    let exported_e_d = match find(EXPORT_E_D) {
        Some(e) => Some(read_tensor(&payload, e)?),
        None => None,
    };

    Ok(LoadedCheckpoint {
        model_config: header.model_config,
        train_config: header.train_config,
        corruption: header.corruption,
        weights: header.weights,
        params,
        opt,
        next_draw: header.next_draw,
        exported_e_d,
    })
}
