//! Unit-norm embeddings, the in-memory embedding store and the embedder
//! interface (text side and image-region side of a dual encoder).

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use crate::crops::Region;
use crate::rng::{derive_seed, fnv1a64, SplitMix64};
use crate::{math, Error, Result};

/// Largest tolerated deviation of a stored vector's norm from 1.
pub const UNIT_NORM_TOL: f64 = 1e-5;

/// A unit-norm `f32` vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Wraps values that are already unit-norm, checking the invariant.
    pub fn from_unit(values: Vec<f32>) -> Result<Self> {
        check_finite(&values)?;
        let n = norm_f32(&values);
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::NotUnitNorm(n));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&x| f64::from(x)).collect()
    }
}

fn check_finite(values: &[f32]) -> Result<()> {
    if values.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

/// L2 norm accumulated in 64-bit.
pub fn norm_f32(values: &[f32]) -> f64 {
    math::sqrt(values.iter().map(|&x| f64::from(x) * f64::from(x)).sum())
}

/// Scales `v` to unit L2 norm.
pub fn normalize(v: &[f32]) -> Result<EmbeddingVector> {
    check_finite(v)?;
    normalize_f64(&v.iter().map(|&x| f64::from(x)).collect::<Vec<_>>())
}

/// Normalizes a 64-bit vector and rounds it to `f32`.
pub fn normalize_f64(v: &[f64]) -> Result<EmbeddingVector> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    let n = math::norm2(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(EmbeddingVector(v.iter().map(|&x| (x / n) as f32).collect()))
}

/// Draws `dim` standard normals from the SplitMix64 stream seeded by
/// `derive_seed(seed, fnv1a64(payload))`, without normalizing.
pub fn mock_gaussian(payload: &[u8], dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = SplitMix64::new(derive_seed(seed, fnv1a64(payload)));
    (0..dim).map(|_| rng.next_normal()).collect()
}

/// Deterministic stand-in for a learned encoder: a pure function of
/// `(payload, dim, seed)` returning a pseudo-random unit vector.
///
/// The payload is hashed with FNV-1a, the hash is mixed with the seed into a
/// SplitMix64 state, `dim` Box-Muller normals are drawn and the result is
/// normalized.
pub fn mock_embed(payload: &[u8], dim: usize, seed: u64) -> EmbeddingVector {
    assert!(dim >= 1, "mock_embed needs dim >= 1");
    let raw = mock_gaussian(payload, dim, seed);
    // A Box-Muller draw is exactly zero with probability zero; fall back to
    // a basis vector rather than failing.
    normalize_f64(&raw).unwrap_or_else(|_| {
        let mut e = alloc::vec![0.0f32; dim];
        e[0] = 1.0;
        EmbeddingVector(e)
    })
}

/// Id-keyed matrix of unit-norm vectors, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<u64>,
    data: Vec<f32>,
    seen: BTreeSet<u64>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self { dim, ids: Vec::new(), data: Vec::new(), seen: BTreeSet::new() }
    }

    /// Builds a store from raw parts, validating every row.
    pub fn from_parts(dim: usize, ids: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(Error::DimMismatch { expected: ids.len() * dim, actual: data.len() });
        }
        let mut store = Self::new(dim);
        store.ids.reserve(ids.len());
        store.data.reserve(data.len());
        for (i, id) in ids.into_iter().enumerate() {
            let row = &data[i * dim..(i + 1) * dim];
            store.push(id, &EmbeddingVector::from_unit(row.to_vec())?)?;
        }
        Ok(store)
    }

    pub fn push(&mut self, id: u64, v: &EmbeddingVector) -> Result<()> {
        if v.dim() != self.dim {
            return Err(Error::DimMismatch { expected: self.dim, actual: v.dim() });
        }
        if !self.seen.insert(id) {
            return Err(Error::DuplicateId(id));
        }
        self.ids.push(id);
        self.data.extend_from_slice(v.as_slice());
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// Row-major vector data, `len() * dim()` values.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[f32])> + '_ {
        self.ids.iter().copied().zip(self.data.chunks_exact(self.dim.max(1)))
    }
}

/// Dual encoder interface: a text branch for database keys and an image
/// branch that encodes a sub-region of an image payload into a query.
pub trait Embedder {
    fn dim(&self) -> usize;

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector>;

    fn embed_region(&self, image: &[u8], width: u32, height: u32, region: Region) -> Result<EmbeddingVector>;
}

/// Embedder built directly on [`mock_embed`]: text and regions hash to
/// unrelated random directions. Useful for plumbing tests, not for learning.
#[derive(Debug, Clone, Copy)]
pub struct MockEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Embedder for MockEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        Ok(mock_embed(text.as_bytes(), self.dim, self.seed))
    }

    fn embed_region(&self, image: &[u8], _width: u32, _height: u32, region: Region) -> Result<EmbeddingVector> {
        let mut payload = Vec::with_capacity(image.len() + 16);
        payload.extend_from_slice(image);
        for v in [region.x, region.y, region.w, region.h] {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        Ok(mock_embed(&payload, self.dim, self.seed))
    }
}
