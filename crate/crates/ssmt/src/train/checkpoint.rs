//! Binary checkpoint format.
//!
//! Layout: magic `SSMT`, u32 version (=1), u32 tensor count, then per tensor
//! (sorted by name): u16 name length, UTF-8 name, u8 rank, u32 dims, raw f32
//! data; finally a u64 FNV-1a checksum of all preceding bytes. Every integer
//! and float is little-endian.
//!
//! A checkpoint is a flat name -> tensor map. Besides model parameters it
//! carries optimizer moments under `opt.` and run metadata (epoch, step,
//! best score, architecture dims) under `meta.`, so a file alone is enough
//! to rebuild the model and resume training bit-exactly.

use crate::autodiff::{AdamState, Tensor};
use crate::error::{Result, SsmtError};
use crate::model::{ModelConfig, SsmtModel};
use fnv::FnvHasher;
use std::collections::BTreeMap;
use std::hash::Hasher;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SSMT";
const VERSION: u32 = 1;
/// Caps name length and rank on read so a corrupt header cannot demand
/// absurd allocations before the checksum is ever verified.
const MAX_RANK: u8 = 8;

/// Serialize a name -> tensor map to the binary format.
pub fn encode(tensors: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len())
        .map_err(|_| SsmtError::Contract("too many tensors for a checkpoint".to_string()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        let len = u16::try_from(name_bytes.len()).map_err(|_| {
            SsmtError::Contract(format!("tensor name '{name}' exceeds u16 length"))
        })?;
        if t.shape().len() > MAX_RANK as usize {
            return Err(SsmtError::Contract(format!(
                "tensor '{name}' rank {} exceeds the format limit {MAX_RANK}",
                t.shape().len()
            )));
        }
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| {
                SsmtError::Contract(format!("dimension of '{name}' exceeds u32"))
            })?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut h = FnvHasher::default();
    h.write(&buf);
    buf.extend_from_slice(&h.finish().to_le_bytes());
    Ok(buf)
}

/// Parse the binary format, verifying structure and the trailing checksum.
pub fn decode(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let fail = |msg: String| Err(SsmtError::Checkpoint(msg));
    if bytes.len() < MAGIC.len() + 4 + 4 + 8 {
        return fail(format!("file too short: {} bytes", bytes.len()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let mut h = FnvHasher::default();
    h.write(body);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 tail bytes"));
    if h.finish() != stored {
        return fail("checksum mismatch".to_string());
    }
    if &body[..4] != MAGIC {
        return fail("bad magic bytes".to_string());
    }
    let mut pos = 4;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > body.len() {
            return Err(SsmtError::Checkpoint(format!(
                "truncated record at byte {pos}"
            )));
        }
        let s = &body[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return fail(format!("unsupported version {version}"));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(take(name_len)?)
            .map_err(|_| SsmtError::Checkpoint("tensor name is not UTF-8".to_string()))?
            .to_string();
        let rank = take(1)?[0];
        if rank > MAX_RANK {
            return fail(format!("tensor '{name}' rank {rank} exceeds {MAX_RANK}"));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::from_vec(data, &shape)
            .map_err(|e| SsmtError::Checkpoint(format!("tensor '{name}': {e}")))?;
        if out.insert(name.clone(), tensor).is_some() {
            return fail(format!("duplicate tensor '{name}'"));
        }
    }
    if pos != body.len() {
        return fail(format!("{} trailing bytes after last tensor", body.len() - pos));
    }
    Ok(out)
}

pub fn write_file(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let bytes = encode(tensors)?;
    let mut f = std::fs::File::create(path).map_err(|e| SsmtError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| SsmtError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| SsmtError::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| SsmtError::io(path, e))?;
    decode(&bytes)
}

/// Counters the training loop needs to resume exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMeta {
    pub epoch: usize,
    pub step: usize,
    pub best_dsc: f32,
}

impl Default for RunMeta {
    fn default() -> Self {
        RunMeta {
            epoch: 0,
            step: 0,
            best_dsc: f32::NEG_INFINITY,
        }
    }
}

fn cfg_tensors(cfg: &ModelConfig) -> [(String, Tensor); 2] {
    let dims = vec![
        cfg.image_size as f32,
        cfg.patch as f32,
        cfg.d_enc as f32,
        cfg.layers as f32,
        cfg.heads as f32,
        cfg.mlp_ratio as f32,
        cfg.d_dec as f32,
        cfg.queries as f32,
        cfg.refine_iters as f32,
    ];
    let chans: Vec<f32> = cfg.cnn_channels.iter().map(|&c| c as f32).collect();
    let n = dims.len();
    let k = chans.len();
    [
        (
            "meta.cfg.dims".to_string(),
            Tensor::from_vec(dims, &[n]).expect("fixed shape"),
        ),
        (
            "meta.cfg.cnn".to_string(),
            Tensor::from_vec(chans, &[k]).expect("fixed shape"),
        ),
    ]
}

fn cfg_from_tensors(map: &BTreeMap<String, Tensor>) -> Result<ModelConfig> {
    let get = |name: &str| {
        map.get(name)
            .ok_or_else(|| SsmtError::Checkpoint(format!("missing '{name}'")))
    };
    let dims = get("meta.cfg.dims")?.data();
    if dims.len() != 9 {
        return Err(SsmtError::Checkpoint(format!(
            "meta.cfg.dims must have 9 entries, got {}",
            dims.len()
        )));
    }
    let chans = get("meta.cfg.cnn")?.data();
    let as_usize = |v: f32| v as usize;
    Ok(ModelConfig {
        image_size: as_usize(dims[0]),
        patch: as_usize(dims[1]),
        d_enc: as_usize(dims[2]),
        layers: as_usize(dims[3]),
        heads: as_usize(dims[4]),
        mlp_ratio: as_usize(dims[5]),
        cnn_channels: chans.iter().map(|&c| c as usize).collect(),
        d_dec: as_usize(dims[6]),
        queries: as_usize(dims[7]),
        refine_iters: as_usize(dims[8]),
    })
}

/// Build the full checkpoint map: parameters, optimizer moments, metadata.
pub fn snapshot(
    model: &SsmtModel,
    adam: &BTreeMap<String, AdamState>,
    meta: &RunMeta,
) -> Result<BTreeMap<String, Tensor>> {
    let mut map = BTreeMap::new();
    for (name, t) in model.store.iter() {
        map.insert(name.clone(), t.clone());
    }
    for (name, st) in adam {
        if !model.store.contains(name) {
            return Err(SsmtError::Contract(format!(
                "optimizer state for unknown parameter '{name}'"
            )));
        }
        let shape = model.store.get(name)?.shape().to_vec();
        map.insert(
            format!("opt.{name}.m"),
            Tensor::from_vec(st.m.clone(), &shape)?,
        );
        map.insert(
            format!("opt.{name}.v"),
            Tensor::from_vec(st.v.clone(), &shape)?,
        );
        map.insert(format!("opt.{name}.t"), Tensor::scalar(st.step as f32));
    }
    map.insert("meta.epoch".to_string(), Tensor::scalar(meta.epoch as f32));
    map.insert("meta.step".to_string(), Tensor::scalar(meta.step as f32));
    map.insert("meta.best_dsc".to_string(), Tensor::scalar(meta.best_dsc));
    for (name, t) in cfg_tensors(&model.cfg) {
        map.insert(name, t);
    }
    Ok(map)
}

/// Rebuild a model (and the saved counters) from a checkpoint map. Every
/// architecture parameter must be present with the registered shape.
pub fn restore(map: &BTreeMap<String, Tensor>) -> Result<(SsmtModel, BTreeMap<String, AdamState>, RunMeta)> {
    let cfg = cfg_from_tensors(map)?;
    cfg.validate()
        .map_err(|e| SsmtError::Checkpoint(format!("stored config invalid: {e}")))?;
    let mut model = SsmtModel::new(cfg, 0)?;
    for name in model.store.names() {
        let stored = map
            .get(&name)
            .ok_or_else(|| SsmtError::Checkpoint(format!("missing parameter '{name}'")))?;
        let slot = model.store.get_mut(&name)?;
        if slot.shape() != stored.shape() {
            return Err(SsmtError::Checkpoint(format!(
                "parameter '{name}': stored shape {:?} vs registered {:?}",
                stored.shape(),
                slot.shape()
            )));
        }
        *slot = stored.clone();
    }
    let mut adam = BTreeMap::new();
    for name in model.store.names() {
        let (m_key, v_key, t_key) = (
            format!("opt.{name}.m"),
            format!("opt.{name}.v"),
            format!("opt.{name}.t"),
        );
        if let (Some(m), Some(v), Some(t)) = (map.get(&m_key), map.get(&v_key), map.get(&t_key)) {
            if m.shape() != v.shape() || m.numel() != model.store.get(&name)?.numel() {
                return Err(SsmtError::Checkpoint(format!(
                    "optimizer state shape mismatch for '{name}'"
                )));
            }
            adam.insert(
                name.clone(),
                AdamState {
                    m: m.data().to_vec(),
                    v: v.data().to_vec(),
                    step: t.data()[0] as u64,
                },
            );
        }
    }
    let scalar = |key: &str| -> Result<f32> {
        Ok(map
            .get(key)
            .ok_or_else(|| SsmtError::Checkpoint(format!("missing '{key}'")))?
            .data()[0])
    };
    let meta = RunMeta {
        epoch: scalar("meta.epoch")? as usize,
        step: scalar("meta.step")? as usize,
        best_dsc: scalar("meta.best_dsc")?,
    };
    Ok((model, adam, meta))
}

/// Load just the model from a checkpoint file (evaluation, inference).
pub fn load_model(path: &Path) -> Result<SsmtModel> {
    let map = read_file(path)?;
    let (model, _, _) = restore(&map)?;
    Ok(model)
}
