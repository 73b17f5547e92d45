//! Checkpoint file: `PTIT`, u32 format version, u64 header length (all
//! little-endian), a JSON header, then every tensor as little-endian f64 in
//! header order. The header carries the SHA-256 of that blob.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Best, EpochRecord, Hyperparams, Moments, Optimizer, OptimizerMeta, TrainState};
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::fsio;
use crate::mix::MixPlan;
use crate::model::{ArchConfig, Model, Parameter};
use crate::peft::PeftState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PTIT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Group {
    Param,
    Best,
    M,
    V,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    group: Group,
    path: String,
    shape: Vec<usize>,
    #[serde(default)]
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct BestMeta {
    epoch: usize,
    #[serde(with = "crate::metrics::inf_sentinel")]
    psnr: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ArchConfig,
    model_seed: u64,
    peft: PeftState,
    plan: Option<MixPlan>,
    hyperparams: Hyperparams,
    optimizer: OptimizerMeta,
    global_step: usize,
    epoch_loss: (f64, usize),
    history: Vec<EpochRecord>,
    best: Option<BestMeta>,
    tensors: Vec<Entry>,
    blob_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    let mut push = |group, path: &str, shape: &[usize], trainable, data: &[f64]| {
        tensors.push(Entry {
            group,
            path: path.to_string(),
            shape: shape.to_vec(),
            trainable,
        });
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in state.model.parameters() {
        push(
            Group::Param,
            &p.path,
            p.value.shape(),
            p.trainable,
            p.value.data(),
        );
    }
    if let Some(best) = &state.best {
        for p in best.model.parameters() {
            push(
                Group::Best,
                &p.path,
                p.value.shape(),
                p.trainable,
                p.value.data(),
            );
        }
    }
    for (path, m) in &state.optimizer.moments {
        push(Group::M, path, &[m.m.len()], false, &m.m);
        push(Group::V, path, &[m.v.len()], false, &m.v);
    }
    let header = Header {
        config: state.model.config().clone(),
        model_seed: state.model.seed(),
        peft: state.model.peft().clone(),
        plan: state.plan.clone(),
        hyperparams: state.hp.clone(),
        optimizer: state.optimizer.meta(),
        global_step: state.global_step,
        epoch_loss: state.epoch_loss,
        history: state.history.clone(),
        best: state.best.as_ref().map(|b| BestMeta {
            epoch: b.epoch,
            psnr: b.psnr,
        }),
        tensors,
        blob_sha256: hex(&Sha256::digest(&blob)),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("missing PTIT magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(16))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("header length exceeds file size"))?;
    let header: Header = serde_json::from_slice(&bytes[16..end])
        .map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
    let blob = &bytes[end..];
    if hex(&Sha256::digest(blob)) != header.blob_sha256 {
        return Err(corrupt("parameter blob does not match its checksum"));
    }

    let mut offset = 0;
    let mut params = Vec::new();
    let mut best_params = Vec::new();
    let mut moments: IndexMap<String, Moments> = IndexMap::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let stop = offset + n * 8;
        if stop > blob.len() {
            return Err(corrupt("tensor table runs past the blob"));
        }
        let data: Vec<f64> = blob[offset..stop]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset = stop;
        match e.group {
            Group::Param | Group::Best => {
                let p = Parameter {
                    value: Tensor::new(e.shape, data)
                        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?,
                    path: e.path,
                    trainable: e.trainable,
                };
                if e.group == Group::Param {
                    params.push(p);
                } else {
                    best_params.push(p);
                }
            }
            Group::M => {
                moments.insert(
                    e.path,
                    Moments {
                        m: data,
                        v: Vec::new(),
                    },
                );
            }
            Group::V => {
                moments
                    .get_mut(&e.path)
                    .ok_or_else(|| corrupt("second moment without a first moment"))?
                    .v = data;
            }
        }
    }
    if offset != blob.len() {
        return Err(corrupt("trailing bytes after the last tensor"));
    }
    let model = Model::from_parts(
        header.config.clone(),
        header.model_seed,
        params,
        header.peft.clone(),
    )?;
    let best = match header.best {
        Some(meta) => Some(Best {
            epoch: meta.epoch,
            psnr: meta.psnr,
            model: Model::from_parts(header.config, header.model_seed, best_params, header.peft)?,
        }),
        None => None,
    };
    Ok(TrainState {
        model,
        plan: header.plan,
        hp: header.hyperparams,
        optimizer: Optimizer {
            kind: header.optimizer.kind,
            weight_decay: header.optimizer.weight_decay,
            step: header.optimizer.step,
            moments,
        },
        global_step: header.global_step,
        epoch_loss: header.epoch_loss,
        history: header.history,
        best,
    })
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    fsio::atomic_write(path, &encode_checkpoint(state)?)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode_checkpoint(&fsio::read(path)?)
}

/// The model stored in a checkpoint (the best epoch when one was recorded),
/// optionally checked against an expected architecture.
pub fn load_model(path: &Path, expected: Option<&ArchConfig>) -> Result<Model> {
    let state = load_checkpoint(path)?;
    let model = state.best.map(|b| b.model).unwrap_or(state.model);
    if let Some(cfg) = expected {
        if cfg != model.config() {
            return Err(Error::ArchMismatch(format!(
                "checkpoint holds {:?} (d={}, volume {}), expected {:?} (d={}, volume {})",
                model.config().variant,
                model.config().embed_dim,
                model.config().volume_size,
                cfg.variant,
                cfg.embed_dim,
                cfg.volume_size
            )));
        }
    }
    Ok(model)
}
