//! Single-file archive of named arrays, the architecture config and free-form
//! metadata.
//!
//! Layout (little endian): magic, config TOML, metadata JSON, array count,
//! then per array its name, `[c, h, w]` and `f64` data, and finally the
//! SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ArchitectureConfig, CoSemDepth, ModelError, ModelKind};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CSDCKPT1";
const PARAM_PREFIX: &str = "param/";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

/// Hex SHA-256 of the config's TOML form.
pub fn config_hash(cfg: &ArchitectureConfig) -> String {
    hex(&Sha256::digest(cfg.to_toml().as_bytes()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ArchitectureConfig,
    pub metadata: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Snapshot of the model's parameters under `param/<name>`.
    pub fn from_model(model: &CoSemDepth) -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert("model_kind".into(), model.kind.as_str().into());
        metadata.insert("config_hash".into(), config_hash(&model.config));
        let arrays = model
            .params
            .entries()
            .iter()
            .map(|e| (format!("{PARAM_PREFIX}{}", e.name), e.value.clone()))
            .collect();
        Self {
            config: model.config.clone(),
            metadata,
            arrays,
        }
    }

    /// Arrays stored under `prefix`, with the prefix stripped.
    pub fn arrays_with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (&'a str, &'a Tensor)> + 'a {
        self.arrays
            .iter()
            .filter_map(move |(k, v)| k.strip_prefix(prefix).map(|n| (n, v)))
    }

    pub fn model_kind(&self) -> Result<ModelKind, ModelError> {
        self.metadata
            .get("model_kind")
            .map(|s| s.parse())
            .unwrap_or(Ok(ModelKind::Joint))
    }

    /// Rebuilds the model, checking that every parameter is present with
    /// the expected shape and that nothing is left over.
    pub fn to_model(&self) -> Result<CoSemDepth, ModelError> {
        if let Some(h) = self.metadata.get("config_hash") {
            if *h != config_hash(&self.config) {
                return Err(CheckpointError::Mismatch("config hash differs".into()).into());
            }
        }
        let mut model = CoSemDepth::new(self.config.clone(), self.model_kind()?, 0)?;
        let stored: BTreeMap<&str, &Tensor> = self.arrays_with_prefix(PARAM_PREFIX).collect();
        if stored.len() != model.params.len() {
            return Err(CheckpointError::Mismatch(format!(
                "{} stored parameters, model has {}",
                stored.len(),
                model.params.len()
            ))
            .into());
        }
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            let t = stored
                .get(name.as_str())
                .ok_or_else(|| CheckpointError::Mismatch(format!("missing parameter {name}")))?;
            let slot = model.params.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "{name}: stored shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                ))
                .into());
            }
            *slot = (*t).clone();
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_bytes(&mut out, self.config.to_toml().as_bytes());
        let meta = serde_json::to_string(&self.metadata).expect("string map serializes");
        put_bytes(&mut out, meta.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for (name, t) in &self.arrays {
            put_bytes(&mut out, name.as_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let fmt = |m: &str| CheckpointError::Format(m.to_string());
        if bytes.len() < MAGIC.len() + 32 || &bytes[..8] != MAGIC {
            return Err(fmt("bad magic"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(fmt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let config_text = r.string()?;
        let config = ArchitectureConfig::from_toml(&config_text)
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
        let metadata: BTreeMap<String, String> = serde_json::from_str(&r.string()?)
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
        let count = r.u64()? as usize;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let (c, h, w) = (r.u64()? as usize, r.u64()? as usize, r.u64()? as usize);
            let n = c
                .checked_mul(h)
                .and_then(|x| x.checked_mul(w))
                .ok_or_else(|| fmt("array size overflow"))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| fmt("array size overflow"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            arrays.insert(name, Tensor::from_vec(c, h, w, data));
        }
        if r.pos != body.len() {
            return Err(fmt("trailing bytes"));
        }
        Ok(Self {
            config,
            metadata,
            arrays,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Format("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CheckpointError::Format("invalid utf-8".into()))
    }
}
