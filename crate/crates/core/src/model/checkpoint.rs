//! Binary checkpoint format.
//!
//! All integers are little-endian:
//!
//! ```text
//! "CMTA" | u32 version | u32 len, config JSON | [u8; 32] vocab SHA-256
//! | u32 len, metadata JSON | u32 entry count
//! | entries: u32 len, name | u8 dtype | u32 ndim | u64 dims... | raw data
//! | u32 CRC32 of everything before it
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::network::{Model, Params};
use crate::nn::Tensor;
use crate::scalar::{DType, Scalar};
use crate::tokenizer::Vocab;

pub const MAGIC: &[u8; 4] = b"CMTA";
pub const VERSION: u32 = 1;

/// Training facts stored next to the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointMeta {
    pub epochs_run: usize,
    pub steps: u64,
    pub seed: u64,
    /// Named scalar metrics, e.g. `val_accuracy`.
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub vocab_hash: [u8; 32],
    pub meta: CheckpointMeta,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: Model<T>, vocab: &Vocab, meta: CheckpointMeta) -> Self {
        Self {
            model,
            vocab_hash: vocab.sha256(),
            meta,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_blob(&mut out, self.model.config().to_canonical_json().as_bytes());
        out.extend_from_slice(&self.vocab_hash);
        put_blob(&mut out, serde_json::to_string(&self.meta).expect("meta serializes").as_bytes());
        let params = self.model.params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, t) in params.iter() {
            put_blob(&mut out, name.as_bytes());
            out.push(T::DTYPE.tag());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses a checkpoint. Entries stored in another precision are
    /// converted; same-precision loads are bit-exact.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 {
            return Err(Error::CorruptFile(bytes.len()));
        }
        let body_len = bytes.len() - 4;
        let mut r = Reader { buf: &bytes[..body_len], pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::CorruptFile(0));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
        if crc32fast::hash(&bytes[..body_len]) != stored {
            return Err(Error::CorruptFile(body_len));
        }

        let at = r.pos;
        let config: ModelConfig = serde_json::from_slice(r.blob()?).map_err(|_| Error::CorruptFile(at))?;
        let vocab_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let at = r.pos;
        let meta: CheckpointMeta = serde_json::from_slice(r.blob()?).map_err(|_| Error::CorruptFile(at))?;
        let count = r.u32()? as usize;
        let mut params = Params::default();
        for _ in 0..count {
            let at = r.pos;
            let name = std::str::from_utf8(r.blob()?)
                .map_err(|_| Error::CorruptFile(at))?
                .to_string();
            let at = r.pos;
            let dtype = DType::from_tag(r.take(1)?[0]).ok_or(Error::CorruptFile(at))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let at = r.pos;
            let raw = r.take(n.checked_mul(dtype.size()).ok_or(Error::CorruptFile(at))?)?;
            let data: Vec<T> = match dtype {
                d if d == T::DTYPE => raw.chunks_exact(d.size()).map(T::read_le).collect(),
                DType::F32 => raw.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
                DType::F64 => raw.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
            };
            params
                .push(name, Tensor::new(&shape, data)?)
                .map_err(|_| Error::CorruptFile(at))?;
        }
        if r.pos != body_len {
            return Err(Error::CorruptFile(r.pos));
        }
        let model = Model::from_params(config, params)?;
        Ok(Self { model, vocab_hash, meta })
    }

    /// Errors with `VocabHashMismatch` unless `vocab` is the one trained with.
    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        if vocab.sha256() == self.vocab_hash {
            Ok(())
        } else {
            Err(Error::VocabHashMismatch)
        }
    }
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

/// Reads a checkpoint and, when `vocab` is given, verifies its hash.
pub fn load_checkpoint<T: Scalar>(path: &Path, vocab: Option<&Vocab>) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    if let Some(v) = vocab {
        ckpt.check_vocab(v)?;
    }
    Ok(ckpt)
}

fn put_blob(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(Error::CorruptFile(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}
