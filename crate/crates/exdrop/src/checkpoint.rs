//! Versioned binary checkpoints of encoder parameters.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic            8 bytes  "EXDROPCK"
//! version          u32
//! tensor count     u32
//! per tensor       u32 name length, UTF-8 name, u32 rows, u32 cols
//! data             f64 values, tensor by tensor, row-major
//! checksum         SHA-256 of every preceding byte
//! ```

use std::path::Path;

use exdrop_core::encoder::EncoderParams;
use exdrop_core::Matrix;
use sha2::{Digest, Sha256};

use crate::error::{io_err, HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"EXDROPCK";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

pub fn encode(params: &EncoderParams) -> Vec<u8> {
    let named = params.named();
    let mut out = Vec::with_capacity(64 + 8 * params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, m) in &named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    }
    for (_, m) in &named {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.at..self.at + n)?;
        self.at += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<EncoderParams> {
    let fail = |reason: &str| HarnessError::Checkpoint {
        path: path.to_owned(),
        reason: reason.to_owned(),
    };
    if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN {
        return Err(fail("file too short to hold a checksum"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(fail("checksum mismatch"));
    }
    let mut c = Cursor { bytes: body, at: 0 };
    if c.take(MAGIC.len()) != Some(&MAGIC[..]) {
        return Err(fail("not a checkpoint (bad magic bytes)"));
    }
    let version = c.u32().ok_or_else(|| fail("truncated header"))?;
    if version != VERSION {
        return Err(fail(&format!("format version {version}, expected {VERSION}")));
    }
    let count = c.u32().ok_or_else(|| fail("truncated header"))? as usize;
    let mut table = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u32().ok_or_else(|| fail("truncated shape table"))? as usize;
        let name = c.take(len).ok_or_else(|| fail("truncated shape table"))?;
        let name = std::str::from_utf8(name).map_err(|_| fail("tensor name is not UTF-8"))?;
        let rows = c.u32().ok_or_else(|| fail("truncated shape table"))? as usize;
        let cols = c.u32().ok_or_else(|| fail("truncated shape table"))? as usize;
        table.push((name.to_owned(), rows, cols));
    }
    let mut tensors = Vec::with_capacity(table.len());
    for (name, rows, cols) in table {
        let n = rows.checked_mul(cols).ok_or_else(|| fail("tensor too large"))?;
        let raw = c.take(n * 8).ok_or_else(|| fail("truncated tensor data"))?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let m = Matrix::new(rows, cols, data).map_err(|e| fail(&format!("tensor {name}: {e}")))?;
        tensors.push((name, m));
    }
    if c.at != body.len() {
        return Err(fail("trailing bytes after tensor data"));
    }
    EncoderParams::from_named(tensors).map_err(|e| fail(&e.to_string()))
}

pub fn checkpoint_save(params: &EncoderParams, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, encode(params)).map_err(io_err(path))
}

pub fn checkpoint_load(path: &Path) -> Result<EncoderParams> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use exdrop_core::encoder::{ModelConfig, NormPlacement};

    fn params() -> EncoderParams {
        let config = ModelConfig {
            input_dim: 3,
            max_tokens: 4,
            d_model: 4,
            d_ff: 8,
            layers: 2,
            heads: 2,
            num_classes: 3,
            norm: NormPlacement::Pre,
        };
        EncoderParams::init(&config, 11).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let p = params();
        checkpoint_save(&p, &path).unwrap();
        assert_eq!(checkpoint_load(&path).unwrap(), p);
    }

    #[test]
    fn corruption_is_refused() {
        let bytes = encode(&params());
        let p = Path::new("mem");
        let reason = |r: Result<EncoderParams>| match r {
            Err(HarnessError::Checkpoint { reason, .. }) => reason,
            other => panic!("{other:?}"),
        };
        assert_eq!(reason(decode(&bytes[..bytes.len() - 9], p)), "checksum mismatch");
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert_eq!(reason(decode(&flipped, p)), "checksum mismatch");

        // A well-formed file from a future version is refused on the version.
        let mut future = bytes[..bytes.len() - DIGEST_LEN].to_vec();
        future[8..12].copy_from_slice(&2u32.to_le_bytes());
        let digest = Sha256::digest(&future);
        future.extend_from_slice(&digest);
        assert!(reason(decode(&future, p)).contains("version 2"));
        assert!(decode(&bytes[..10], p).is_err());
    }
}
