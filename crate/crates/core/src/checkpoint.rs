//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes   "GEMR"
//! version  u16       currently 1
//! count    u32       number of tensor entries
//! entry*   count × [ name_len u16 | name UTF-8 | rank u8 |
//!                    dims  rank × u32 | payload  f32 × len ]
//! meta_len u32
//! meta     UTF-8 JSON (seed, epoch, mechanism, full model config)
//! ```
//!
//! Entries hold every learnable parameter in canonical order followed by
//! the four batch-norm running-statistic vectors. Round-trips are
//! bit-exact. Loaded models come back in eval mode.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::MechanismKind;
use crate::model::{GroupEmotionModel, Mode, ModelConfig};
use crate::tape::BnRunning;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: [u8; 4] = *b"GEMR";
pub const VERSION: u16 = 1;
/// Conventional file extension for checkpoints.
pub const EXTENSION: &str = "gemr";

const RUNNING_STAT_NAMES: [&str; 4] = [
    "bn_global.running_mean",
    "bn_global.running_var",
    "bn_pooled.running_mean",
    "bn_pooled.running_var",
];

/// Training metadata stored in the trailing JSON block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    pub mechanism: MechanismKind,
    pub config: ModelConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: expected magic {MAGIC:?}, found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found} (this build reads version {VERSION})")]
    UnsupportedVersion { found: u16 },
    #[error("truncated checkpoint: file ends inside {what}")]
    Truncated { what: String },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint does not match its own manifest: {0}")]
    Manifest(String),
    #[error("bad checkpoint metadata: {0}")]
    Meta(String),
}

fn read_exact_ctx<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated { what: what.to_string() }
        } else {
            CheckpointError::Io(e)
        }
    })
}

fn read_u16<R: Read>(r: &mut R, what: &str) -> Result<u16, CheckpointError> {
    let mut b = [0u8; 2];
    read_exact_ctx(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact_ctx(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn write_entry<W: Write>(w: &mut W, name: &str, shape: Shape, data: &[f32]) -> Result<(), CheckpointError> {
    let name_bytes = name.as_bytes();
    if name_bytes.len() > u16::MAX as usize {
        return Err(CheckpointError::Format(format!("parameter name '{name}' too long")));
    }
    w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
    w.write_all(name_bytes)?;
    let dims = shape.dims();
    w.write_all(&[dims.len() as u8])?;
    for d in &dims {
        if *d > u32::MAX as usize {
            return Err(CheckpointError::Format(format!("dimension {d} of '{name}' too large")));
        }
        w.write_all(&(*d as u32).to_le_bytes())?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Writes an arbitrary entry list plus metadata in checkpoint layout.
/// `save_model` is the public face; tests use this to craft corrupt files.
pub(crate) fn write_raw<W: Write>(
    w: &mut W,
    entries: &[(String, Shape, Vec<f32>)],
    meta_json: &str,
) -> Result<(), CheckpointError> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, shape, data) in entries {
        write_entry(w, name, *shape, data)?;
    }
    let meta = meta_json.as_bytes();
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta)?;
    Ok(())
}

fn model_entries(model: &GroupEmotionModel) -> Vec<(String, Shape, Vec<f32>)> {
    let mut entries: Vec<(String, Shape, Vec<f32>)> = model
        .params
        .named()
        .into_iter()
        .map(|(name, t)| (name, t.shape(), t.data().to_vec()))
        .collect();
    for (name, data) in RUNNING_STAT_NAMES.iter().zip([
        &model.bn_g.mean,
        &model.bn_g.var,
        &model.bn_f.mean,
        &model.bn_f.var,
    ]) {
        entries.push((name.to_string(), Shape::Vector(data.len()), data.clone()));
    }
    entries
}

pub fn save<W: Write>(
    w: &mut W,
    model: &GroupEmotionModel,
    meta: &CheckpointMeta,
) -> Result<(), CheckpointError> {
    let meta_json = serde_json::to_string(meta)
        .map_err(|e| CheckpointError::Meta(format!("serializing metadata: {e}")))?;
    write_raw(w, &model_entries(model), &meta_json)
}

pub fn save_model(
    path: &Path,
    model: &GroupEmotionModel,
    meta: &CheckpointMeta,
) -> Result<(), CheckpointError> {
    let file = std::fs::File::create(path)?;
    let mut buf = std::io::BufWriter::new(file);
    save(&mut buf, model, meta)?;
    buf.flush()?;
    Ok(())
}

fn read_entries<R: Read>(r: &mut R) -> Result<Vec<(String, Shape, Vec<f32>)>, CheckpointError> {
    let mut magic = [0u8; 4];
    read_exact_ctx(r, &mut magic, "the magic header")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic });
    }
    let version = read_u16(r, "the version field")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let count = read_u32(r, "the entry count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let ctx = format!("entry {i}'s name");
        let name_len = read_u16(r, &ctx)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact_ctx(r, &mut name_bytes, &ctx)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Format(format!("entry {i} has a non-UTF-8 name")))?;
        let mut rank = [0u8; 1];
        read_exact_ctx(r, &mut rank, &format!("the rank of '{name}'"))?;
        let rank = rank[0] as usize;
        if rank > 2 {
            return Err(CheckpointError::Format(format!(
                "entry '{name}' has rank {rank}; only scalars, vectors, and matrices exist"
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(r, &format!("the dimensions of '{name}'"))? as usize);
        }
        let shape = Shape::from_dims(&dims)
            .map_err(|e| CheckpointError::Format(format!("entry '{name}': {e}")))?;
        let len = shape.len();
        let mut payload = vec![0u8; len * 4];
        read_exact_ctx(r, &mut payload, &format!("the payload of '{name}'"))?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push((name, shape, data));
    }
    Ok(entries)
}

pub fn load<R: Read>(r: &mut R) -> Result<(GroupEmotionModel, CheckpointMeta), CheckpointError> {
    let entries = read_entries(r)?;
    let meta_len = read_u32(r, "the metadata length")? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    read_exact_ctx(r, &mut meta_bytes, "the metadata block")?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(CheckpointError::Format(format!(
            "{} trailing byte(s) after the metadata block",
            rest.len()
        )));
    }
    let meta_str = std::str::from_utf8(&meta_bytes)
        .map_err(|_| CheckpointError::Meta("metadata is not UTF-8".to_string()))?;
    let meta: CheckpointMeta = serde_json::from_str(meta_str)
        .map_err(|e| CheckpointError::Meta(format!("parsing metadata JSON: {e}")))?;
    if meta.mechanism != meta.config.mechanism {
        return Err(CheckpointError::Meta(format!(
            "metadata mechanism '{}' disagrees with the config's '{}'",
            meta.mechanism, meta.config.mechanism
        )));
    }

    let mut model = GroupEmotionModel::init(meta.config.clone(), meta.seed)
        .map_err(|e| CheckpointError::Meta(format!("invalid model config: {e}")))?;
    model.mode = Mode::Eval;
    model.bn_g = BnRunning::new(model.config.global_dim());
    model.bn_f = BnRunning::new(model.config.face_dim());

    let mut expected: std::collections::BTreeMap<String, Shape> = model
        .params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.shape()))
        .collect();
    expected.insert(RUNNING_STAT_NAMES[0].into(), Shape::Vector(model.config.global_dim()));
    expected.insert(RUNNING_STAT_NAMES[1].into(), Shape::Vector(model.config.global_dim()));
    expected.insert(RUNNING_STAT_NAMES[2].into(), Shape::Vector(model.config.face_dim()));
    expected.insert(RUNNING_STAT_NAMES[3].into(), Shape::Vector(model.config.face_dim()));

    let mut seen = std::collections::BTreeSet::new();
    for (name, shape, data) in entries {
        let Some(want) = expected.get(&name) else {
            return Err(CheckpointError::Manifest(format!(
                "file contains parameter '{name}' which the config does not declare"
            )));
        };
        if *want != shape {
            return Err(CheckpointError::Manifest(format!(
                "parameter '{name}' has shape {shape} in the file but the config requires {want}"
            )));
        }
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::Manifest(format!("duplicate parameter '{name}'")));
        }
        match name.as_str() {
            "bn_global.running_mean" => model.bn_g.mean = data,
            "bn_global.running_var" => model.bn_g.var = data,
            "bn_pooled.running_mean" => model.bn_f.mean = data,
            "bn_pooled.running_var" => model.bn_f.var = data,
            _ => {
                let mut installed = false;
                for (n, t) in model.params.named_mut() {
                    if n == name {
                        *t = Tensor::new(shape, data.clone()).map_err(|e| {
                            CheckpointError::Format(format!("parameter '{name}': {e}"))
                        })?;
                        installed = true;
                        break;
                    }
                }
                debug_assert!(installed, "expected-name map and named_mut disagree");
            }
        }
    }
    let missing: Vec<&String> = expected.keys().filter(|k| !seen.contains(*k)).collect();
    if !missing.is_empty() {
        return Err(CheckpointError::Manifest(format!(
            "file is missing parameter(s) required by its config: {}",
            missing.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    Ok((model, meta))
}

pub fn load_model(path: &Path) -> Result<(GroupEmotionModel, CheckpointMeta), CheckpointError> {
    let file = std::fs::File::open(path)?;
    let mut buf = std::io::BufReader::new(file);
    load(&mut buf)
}
