//! Versioned, checksummed binary container for named tensors.
//!
//! ```text
//! magic "PGCK" | version u32 | manifest_len u64 | manifest JSON
//! | record_count u32 | records... | file_crc u32
//! record = name_len u32 | name | dtype u8 | rank u32 | dims u64×rank
//!        | payload_len u64 | payload (little-endian) | crc32 u32
//! ```
//!
//! A record checksum covers everything in the record before it. All integers
//! are little-endian. Records are written in name order, so serialization is
//! a pure function of the contents.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Blueprint, Model, ModelConfig};
use crate::numerics::{DType, Float, Tensor};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"PGCK";
pub const VERSION: u32 = 1;

/// Hex SHA-256 of the model configuration's JSON form.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub blueprint: Blueprint,
    /// Pretraining updates applied so far, over all tasks.
    pub step: u64,
    pub dtype: DType,
    /// Free-form run metadata, typically the full experiment configuration.
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F> {
    pub manifest: Manifest,
    pub params: ParamStore<F>,
}

impl<F: Float> Checkpoint<F> {
    pub fn from_model(model: &Model<F>, step: u64, extra: serde_json::Value) -> Self {
        Self {
            manifest: Manifest {
                config_hash: config_hash(&model.blueprint.config),
                blueprint: model.blueprint.clone(),
                step,
                dtype: F::DTYPE,
                extra,
            },
            params: model.params.clone(),
        }
    }

    /// Rebuilds the model, checking every tensor against the blueprint.
    pub fn into_model(self) -> Result<Model<F>> {
        let model = Model { blueprint: self.manifest.blueprint, params: self.params };
        model.check_layout()?;
        Ok(model)
    }

    /// Shape check of the stored tensors against `cfg` (for loading into a
    /// possibly different preset), run before anything is computed.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let bp = Blueprint { config: cfg.clone(), ..self.manifest.blueprint.clone() };
        for spec in bp.layout() {
            let stored = self.params.get(&spec.name)?;
            if stored.shape() != spec.shape.as_slice() {
                return Err(Error::dim(
                    "checkpoint",
                    format!("`{}`: stored {:?}, config expects {:?}", spec.name, stored.shape(), spec.shape),
                ));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let manifest = serde_json::to_vec(&self.manifest)?;
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            let start = out.len();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(F::DTYPE.code());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&((t.len() * F::DTYPE.size()) as u64).to_le_bytes());
            for &v in t.data() {
                v.write_le(&mut out);
            }
            let crc = crc32fast::hash(&out[start..]);
            out.extend_from_slice(&crc.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Parses a checkpoint; `expected_hash` is enforced unless `force`.
    pub fn from_bytes(bytes: &[u8], expected_hash: Option<&str>, force: bool) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let mlen = r.u64("manifest length")? as usize;
        let manifest: Manifest = serde_json::from_slice(r.take(mlen, "manifest")?)
            .map_err(|e| Error::Integrity(format!("manifest: {e}")))?;
        if let Some(expected) = expected_hash {
            if manifest.config_hash != expected && !force {
                return Err(Error::ConfigHash { found: manifest.config_hash, expected: expected.to_string() });
            }
        }
        if manifest.dtype != F::DTYPE {
            return Err(Error::Manifest(format!("checkpoint holds {:?}, requested {:?}", manifest.dtype, F::DTYPE)));
        }
        let count = r.u32("record count")?;
        let mut params = ParamStore::new();
        for i in 0..count {
            let start = r.pos;
            let what = format!("record #{i}");
            let nlen = r.u32(&what)? as usize;
            let name = String::from_utf8(r.take(nlen, &what)?.to_vec())
                .map_err(|_| Error::Integrity(format!("{what}: name is not UTF-8")))?;
            let dtype = r.take(1, &name)?[0];
            if DType::from_code(dtype) != Some(F::DTYPE) {
                return Err(Error::Integrity(format!("record `{name}`: dtype code {dtype}")));
            }
            let rank = r.u32(&name)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64(&name)? as usize);
            }
            let plen = r.u64(&name)? as usize;
            let numel: usize = shape.iter().product();
            if plen != numel * F::DTYPE.size() {
                return Err(Error::Integrity(format!("record `{name}`: payload {plen} bytes for shape {shape:?}")));
            }
            let payload = r.take(plen, &name)?;
            let body_end = r.pos;
            let crc = r.u32(&name)?;
            if crc32fast::hash(&bytes[start..body_end]) != crc {
                return Err(Error::Checksum(name));
            }
            let data: Vec<F> = payload.chunks_exact(F::DTYPE.size()).map(F::read_le).collect();
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        let body_end = r.pos;
        let crc = r.u32("file checksum")?;
        if crc32fast::hash(&bytes[..body_end]) != crc {
            return Err(Error::Integrity("file checksum mismatch".into()));
        }
        if r.pos != bytes.len() {
            return Err(Error::Integrity(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { manifest, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path, expected_hash: Option<&str>, force: bool) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, expected_hash, force)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Integrity(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}
