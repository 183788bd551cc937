//! XCKP: parameter checkpoints.
//!
//! Little-endian:
//!
//! ```text
//! "XCKP" | version u32 = 1 | meta_len u32 | meta (UTF-8 JSON)
//! | tensors u32 | tensors x (name_len u32 | name | rows u32 | cols u32)
//! | all values as f64, tensor after tensor, row-major
//! ```

use ragcap_core::captioner::{Captioner, CaptionerConfig, Vocabulary};
use ragcap_core::conditioning::ConditioningConfig;
use ragcap_core::rng::SplitMix64;
use ragcap_core::tensor::Matrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"XCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic, expected \"XCKP\"")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("{0} trailing bytes")]
    TrailingBytes(usize),
    #[error("bad metadata: {0}")]
    Meta(String),
    #[error(transparent)]
    Model(#[from] ragcap_core::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub tensors: Vec<(String, Matrix)>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let out = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap_or_default()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        }
        for (_, m) in &self.tensors {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let meta_len = c.u32()? as usize;
        let meta = String::from_utf8(c.take(meta_len)?.to_vec()).map_err(|e| CheckpointError::Meta(e.to_string()))?;
        let count = c.u32()? as usize;
        let mut manifest = Vec::new();
        for _ in 0..count {
            let len = c.u32()? as usize;
            let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|e| CheckpointError::Meta(e.to_string()))?;
            let (rows, cols) = (c.u32()? as usize, c.u32()? as usize);
            manifest.push((name, rows, cols));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, rows, cols) in manifest {
            let n = rows.checked_mul(cols).ok_or(CheckpointError::Truncated)?;
            let raw = c.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
            let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap_or_default())).collect();
            tensors.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        if c.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - c.pos));
        }
        Ok(Self { meta, tensors })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    captioner: CaptionerConfig,
    conditioning: ConditioningConfig,
    use_text: bool,
    vocab: Vec<String>,
}

pub fn save_model(model: &Captioner, vocab: &Vocabulary) -> Checkpoint {
    let meta = ModelMeta {
        captioner: model.config,
        conditioning: model.cond_config,
        use_text: model.use_text,
        vocab: vocab.tokens().to_vec(),
    };
    let params = model.params();
    Checkpoint {
        meta: serde_json::to_string(&meta).expect("model metadata serializes"),
        tensors: params.names().iter().cloned().zip(params.values().iter().cloned()).collect(),
    }
}

pub fn load_model(ckpt: &Checkpoint) -> Result<(Captioner, Vocabulary), CheckpointError> {
    let meta: ModelMeta = serde_json::from_str(&ckpt.meta).map_err(|e| CheckpointError::Meta(e.to_string()))?;
    let vocab = Vocabulary::from_tokens(meta.vocab)?;
    let mut model = Captioner::new(meta.captioner, meta.conditioning, meta.use_text, &mut SplitMix64::new(0))?;
    let (names, values): (Vec<String>, Vec<Matrix>) = ckpt.tensors.iter().cloned().unzip();
    model.load_params(&names, values)?;
    Ok((model, vocab))
}
