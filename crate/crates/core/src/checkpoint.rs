//! Versioned binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "URWCKPT\0" | version u32 | header_len u64 | header (JSON)
//! tensor_count u32 | tensors
//! has_optimizer u8 | [adam_step u64 | m tensors | v tensors]
//! sha256 of all preceding bytes (32 bytes)
//! tensor := name_len u32 | name | rows u64 | cols u64 | rows*cols f32
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Params};
use crate::optim::{Adam, AdamConfig};

pub const MAGIC: &[u8; 8] = b"URWCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    step: u64,
    vocab_hash: String,
    adam: Option<AdamConfig>,
    meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub step: u64,
    pub vocab_hash: String,
    /// Trainer-owned metadata (training config, data cursors).
    pub meta: serde_json::Value,
    pub params: Params<f32>,
    pub optimizer: Option<Adam<f32>>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model<f32>> {
        Model::from_params(self.model_config.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model_config.clone(),
            step: self.step,
            vocab_hash: self.vocab_hash.clone(),
            adam: self.optimizer.as_ref().map(|o| o.cfg),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(self.params.count() * 4 * 3 + json.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        write_params(&mut out, &self.params);
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.step.to_le_bytes());
                write_params(&mut out, &opt.m);
                write_params(&mut out, &opt.v);
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Parses a checkpoint; when `vocab_hash` is given it must match the stored hash.
    pub fn from_bytes(bytes: &[u8], vocab_hash: Option<&str>) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 8 + 32 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch (truncated or corrupted file)".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let header_len = r.u64()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(header_len)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if let Some(expected) = vocab_hash {
            if expected != header.vocab_hash {
                return Err(Error::Checkpoint(format!(
                    "vocabulary hash mismatch: checkpoint {}, vocabulary {}",
                    header.vocab_hash, expected
                )));
            }
        }
        let params = r.params()?;
        // Validates names and shapes against the stored config.
        let model = Model::from_params(header.model.clone(), params)?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let cfg = header.adam.ok_or_else(|| Error::Checkpoint("optimizer state without config".into()))?;
                let step = r.u64()?;
                let m = r.params()?;
                let v = r.params()?;
                if m.names != model.params.names || v.names != model.params.names {
                    return Err(Error::Checkpoint("optimizer state layout differs from parameters".into()));
                }
                let mut opt = Adam::new(cfg, &model.params)?;
                opt.step = step;
                opt.m = m;
                opt.v = v;
                Some(opt)
            }
            f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after optimizer state".into()));
        }
        Ok(Checkpoint {
            model_config: header.model,
            step: header.step,
            vocab_hash: header.vocab_hash,
            meta: header.meta,
            params: model.params,
            optimizer,
        })
    }

    /// Writes atomically: a temporary sibling file is renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let name = path.file_name().ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
        let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }

    pub fn load(path: &Path, vocab_hash: Option<&str>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, vocab_hash)
    }
}

fn write_params(out: &mut Vec<u8>, p: &Params<f32>) {
    out.extend_from_slice(&(p.tensors.len() as u32).to_le_bytes());
    for (name, t) in p.names.iter().zip(&p.tensors) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
        for &v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn params(&mut self) -> Result<Params<f32>> {
        let n = self.u32()? as usize;
        let mut names = Vec::with_capacity(n.min(4096));
        let mut tensors = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let len = self.u32()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rows = self.u64()? as usize;
            let cols = self.u64()? as usize;
            let count = rows.checked_mul(cols).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?;
            let raw = self.take(count.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            names.push(name);
            tensors.push(t);
        }
        Ok(Params { names, tensors })
    }
}
