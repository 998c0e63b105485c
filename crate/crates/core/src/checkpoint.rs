//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "GMNNCKPT"
//! version      u32       1
//! digest       32 bytes  SHA-256 of the config JSON below
//! config_len   u32
//! config       config_len bytes, JSON model config
//! count        u32       number of tensors
//! per tensor:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   rows       u64
//!   cols       u64
//!   values     rows * cols f64, row-major
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{GmnnError, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::nn::ParamStore;
use crate::tensor::{Matrix, Scalar};

pub const MAGIC: &[u8; 8] = b"GMNNCKPT";
pub const VERSION: u32 = 1;

pub fn write_checkpoint(model: &ModelParams, out: &mut impl Write) -> Result<()> {
    let config = serde_json::to_vec(&model.config).expect("model config serializes");
    let digest: [u8; 32] = Sha256::digest(&config).into();
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&digest)?;
    out.write_all(&(config.len() as u32).to_le_bytes())?;
    out.write_all(&config)?;
    out.write_all(&(model.store.len() as u32).to_le_bytes())?;
    for (_, name, m) in model.store.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(m.rows() as u64).to_le_bytes())?;
        out.write_all(&(m.cols() as u64).to_le_bytes())?;
        for &v in m.as_slice() {
            out.write_all(&crate::tensor::widen(v).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(model: &ModelParams, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(GmnnError::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint and rebuilds the model it describes.
pub fn read_checkpoint(input: &mut impl Read) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(GmnnError::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(GmnnError::Checkpoint(format!("unsupported version {version}")));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    let len = r.u32()? as usize;
    let config_bytes = r.take(len)?;
    if <[u8; 32]>::from(Sha256::digest(config_bytes)) != digest {
        return Err(GmnnError::Checkpoint("config digest mismatch".into()));
    }
    let config: ModelConfig = serde_json::from_slice(config_bytes)
        .map_err(|e| GmnnError::Checkpoint(format!("config: {e}")))?;
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| GmnnError::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let raw = r.take(rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or_else(
            || GmnnError::Checkpoint("tensor size overflows".into()),
        )?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Scalar)
            .collect();
        store.add(name, Matrix::from_vec(rows, cols, data)?);
    }
    if r.pos != bytes.len() {
        return Err(GmnnError::Checkpoint("trailing bytes".into()));
    }
    ModelParams::with_store(config, store)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut file = fs::File::open(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    read_checkpoint(&mut file)
}

/// Loads a checkpoint and checks it was written for `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<ModelParams> {
    let model = load_checkpoint(path)?;
    if model.config.digest() != expected.digest() {
        return Err(GmnnError::Checkpoint(
            "checkpoint was written for a different model config".into(),
        ));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelParams {
        ModelParams::new(ModelConfig {
            widths: vec![4, 4],
            k_set: vec![2, 4],
            classes: 3,
            score_width: 2,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let model = tiny();
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn corruption_is_detected() {
        let model = tiny();
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&mut bad.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[8 + 4 + 32 + 4 + 2] ^= 1;
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(GmnnError::Checkpoint(_))));
        let truncated = &buf[..buf.len() - 3];
        assert!(read_checkpoint(&mut &truncated[..]).is_err());
    }
}
