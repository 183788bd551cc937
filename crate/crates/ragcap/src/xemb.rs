//! XEMB: the binary embedding store format.
//!
//! Little-endian, no padding:
//!
//! ```text
//! "XEMB" | version u32 = 1 | dim u32 | count u64 | count x (id u64 | dim x f32)
//! ```

use std::io::{Read, Write};

use ragcap_core::embed::EmbeddingStore;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"XEMB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum XembError {
    #[error("bad magic {0:02x?}, expected \"XEMB\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("inconsistent header: {0}")]
    Inconsistent(String),
    #[error("invalid entry: {0}")]
    Invalid(#[from] ragcap_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Size in bytes of a file holding `count` vectors of `dim` floats.
pub fn file_len(dim: usize, count: usize) -> Option<u64> {
    let entry = 8u64.checked_add(4u64.checked_mul(dim as u64)?)?;
    (HEADER_LEN as u64).checked_add(entry.checked_mul(count as u64)?)
}

pub fn to_bytes(store: &EmbeddingStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(file_len(store.dim(), store.len()).unwrap_or(0) as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (id, row) in store.iter() {
        out.extend_from_slice(&id.to_le_bytes());
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_store<W: Write>(store: &EmbeddingStore, mut sink: W) -> Result<(), XembError> {
    sink.write_all(&to_bytes(store))?;
    sink.flush()?;
    Ok(())
}

pub fn from_bytes(bytes: &[u8]) -> Result<EmbeddingStore, XembError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(XembError::BadMagic(bytes[..4].try_into().unwrap_or_default()));
        }
        return Err(XembError::Truncated { expected: HEADER_LEN as u64, actual: bytes.len() as u64 });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap_or_default();
    if &magic != MAGIC {
        return Err(XembError::BadMagic(magic));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap_or_default());
    let version = u32_at(4);
    if version != VERSION {
        return Err(XembError::UnsupportedVersion(version));
    }
    let dim = u32_at(8) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap_or_default());
    if dim == 0 && count > 0 {
        return Err(XembError::Inconsistent(format!("dim 0 with {count} entries")));
    }
    let count = usize::try_from(count).map_err(|_| XembError::Inconsistent(format!("count {count} too large")))?;
    let expected = file_len(dim, count).ok_or_else(|| XembError::Inconsistent("size overflows".into()))?;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(XembError::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(XembError::Inconsistent(format!(
            "{} trailing bytes after {count} entries of dim {dim}",
            actual - expected
        )));
    }
    let mut ids = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * dim);
    let entry = 8 + 4 * dim;
    for chunk in bytes[HEADER_LEN..].chunks_exact(entry) {
        ids.push(u64::from_le_bytes(chunk[..8].try_into().unwrap_or_default()));
        data.extend(chunk[8..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap_or_default())));
    }
    Ok(EmbeddingStore::from_parts(dim, ids, data)?)
}

pub fn read_store<R: Read>(mut source: R) -> Result<EmbeddingStore, XembError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
