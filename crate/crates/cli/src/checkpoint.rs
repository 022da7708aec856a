//! Binary checkpoints: `FSEG`, u16 version, SHA-256 of the model
//! configuration, named float32 tensors, trailing CRC32. Little-endian.

use std::fs;
use std::path::Path;

use fedseg::model::{AttentionUNet, Segmenter, UNetConfig};
use fedseg::tensor::{Shape, StateDict, Tensor};
use fedseg::Scalar;
use sha2::{Digest, Sha256};

use crate::error::{CheckpointError, CliError, Result};

pub const MAGIC: &[u8; 4] = b"FSEG";
pub const VERSION: u16 = 1;

pub fn config_digest(config: &UNetConfig) -> [u8; 32] {
    let json = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(json).into()
}

pub fn encode<T: Scalar>(model: &AttentionUNet<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&config_digest(model.config()));
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        let s = p.value.shape();
        for d in [s.n, s.c, s.h, s.w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn save_checkpoint<T: Scalar>(model: &AttentionUNet<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| CliError::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses and verifies a checkpoint; checks run in the order magic, CRC, version, digest.
pub fn decode<T: Scalar>(bytes: &[u8], config: &UNetConfig, path: &Path) -> Result<StateDict<T>> {
    let malformed = |reason: &str| CheckpointError::Malformed {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::Magic {
            path: path.to_path_buf(),
        }
        .into());
    }
    if bytes.len() < 4 + 2 + 32 + 4 + 4 {
        let computed = crc32fast::hash(&bytes[..bytes.len().saturating_sub(4)]);
        return Err(CheckpointError::Crc {
            path: path.to_path_buf(),
            stored: 0,
            computed,
        }
        .into());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Crc {
            path: path.to_path_buf(),
            stored,
            computed,
        }
        .into());
    }
    let mut r = Reader {
        bytes: body,
        pos: 4,
    };
    let version = r.u16().ok_or_else(|| malformed("missing version"))?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            path: path.to_path_buf(),
            found: version,
            expected: VERSION,
        }
        .into());
    }
    let digest = r.take(32).ok_or_else(|| malformed("missing digest"))?;
    if digest != config_digest(config) {
        return Err(CheckpointError::Digest {
            path: path.to_path_buf(),
        }
        .into());
    }
    let count = r.u32().ok_or_else(|| malformed("missing entry count"))?;
    let mut state = StateDict::new();
    for _ in 0..count {
        let len = r.u16().ok_or_else(|| malformed("truncated entry"))? as usize;
        let name = r.take(len).ok_or_else(|| malformed("truncated name"))?;
        let name =
            String::from_utf8(name.to_vec()).map_err(|_| malformed("entry name is not UTF-8"))?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32().ok_or_else(|| malformed("truncated shape"))? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let raw = r
            .take(shape.numel() * 4)
            .ok_or_else(|| malformed("truncated payload"))?;
        let data: Vec<T> = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let t = Tensor::from_vec(shape, data).map_err(|e| malformed(&e.to_string()))?;
        if state.insert(name.clone(), t).is_some() {
            return Err(malformed(&format!("duplicate entry {name}")).into());
        }
    }
    if r.pos != body.len() {
        return Err(malformed("trailing bytes after the last entry").into());
    }
    Ok(state)
}

/// Loads a checkpoint written for `config`. The model is never partially filled.
pub fn load_checkpoint<T: Scalar>(path: &Path, config: &UNetConfig) -> Result<AttentionUNet<T>> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let state = decode::<T>(&bytes, config, path)?;
    let mut model = AttentionUNet::<T>::new(config.clone(), 0)?;
    model
        .params_mut()
        .load_state_dict(&state)
        .map_err(|e| CheckpointError::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    Ok(model)
}
