//! Model checkpoints.
//!
//! Layout: `"MMCK"`, version `u32`, manifest length `u64`, the JSON manifest
//! (config, vocabulary hashes, parameter names and shapes), then each
//! parameter as little-endian `f32` in manifest order. Vocabularies are
//! written next to the checkpoint as `<file>.src.vocab` / `<file>.tgt.vocab`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{Real, Tensor};
use crate::vocab::Vocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub src_vocab_hash: String,
    pub tgt_vocab_hash: String,
    pub params: Vec<ParamEntry>,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn src_vocab_path(checkpoint: &Path) -> PathBuf {
    sibling(checkpoint, ".src.vocab")
}

pub fn tgt_vocab_path(checkpoint: &Path) -> PathBuf {
    sibling(checkpoint, ".tgt.vocab")
}

/// Serializes a model; values are stored as `f32` whatever `T` is.
pub fn to_bytes<T: Real>(model: &Model<T>, src: &Vocabulary, tgt: &Vocabulary) -> Result<Vec<u8>> {
    let manifest = Manifest {
        config: model.config().clone(),
        src_vocab_hash: src.hash(),
        tgt_vocab_hash: tgt.hash(),
        params: model
            .params
            .iter()
            .map(|(_, p)| ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in model.params.iter() {
        for &x in p.value.data() {
            out.extend_from_slice(&(x.to_f64c() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a checkpoint, verifying the vocabulary hashes.
pub fn from_bytes<T: Real>(bytes: &[u8], src: &Vocabulary, tgt: &Vocabulary) -> Result<Model<T>> {
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes.get(16..16 + mlen).ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(json)?;
    if manifest.src_vocab_hash != src.hash() || manifest.tgt_vocab_hash != tgt.hash() {
        return Err(Error::Checkpoint("vocabulary does not match the checkpoint".into()));
    }

    let mut model = Model::<T>::new(manifest.config.clone(), 0)?;
    if model.params.len() != manifest.params.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} parameters, config implies {}",
            manifest.params.len(),
            model.params.len()
        )));
    }
    let mut payload = &bytes[16 + mlen..];
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    for (id, entry) in ids.into_iter().zip(&manifest.params) {
        let p = model.params.get_mut(id);
        if p.name != entry.name || p.value.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {} {:?} does not match manifest entry {} {:?}",
                p.name,
                p.value.shape(),
                entry.name,
                entry.shape
            )));
        }
        let n = p.value.len();
        if payload.len() < 4 * n {
            return Err(Error::Checkpoint(format!("payload truncated at {}", entry.name)));
        }
        let data = payload[..4 * n]
            .chunks_exact(4)
            .map(|c| T::from_f64c(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        p.value = Tensor::new(entry.shape.clone(), data)?;
        payload = &payload[4 * n..];
    }
    if !payload.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", payload.len())));
    }
    Ok(model)
}

/// Writes the checkpoint and both vocabularies.
pub fn save<T: Real>(path: impl AsRef<Path>, model: &Model<T>, src: &Vocabulary, tgt: &Vocabulary) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model, src, tgt)?).map_err(|e| Error::io(path, e))?;
    src.save(src_vocab_path(path))?;
    tgt.save(tgt_vocab_path(path))
}

/// Reads a checkpoint and the vocabularies stored next to it.
pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<(Model<T>, Vocabulary, Vocabulary)> {
    let path = path.as_ref();
    let src = Vocabulary::load(src_vocab_path(path))?;
    let tgt = Vocabulary::load(tgt_vocab_path(path))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let model = from_bytes(&bytes, &src, &tgt)?;
    Ok((model, src, tgt))
}
