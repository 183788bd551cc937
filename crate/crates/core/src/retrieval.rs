//! Exact top-k cosine retrieval over an [`EmbeddingStore`].
//!
//! Stored keys are unit-norm, so cosine similarity is a plain dot product.
//! Scores are accumulated in 64-bit and ranked by `(score desc, id asc)`.

use alloc::collections::BinaryHeap;
use alloc::vec::Vec;
use core::cmp::Ordering;
use serde::{Deserialize, Serialize};

use crate::crops::{generate_all_crops, CropConfig, CropId};
use crate::embed::{norm_f32, Embedder, EmbeddingStore, EmbeddingVector};
use crate::{Error, Result};

/// Default number of retrieved descriptions per crop.
pub const DEFAULT_K: usize = 12;

/// Query norms further than this from 1 are rejected.
pub const QUERY_NORM_TOL: f64 = 1e-3;

/// Rows scored per block before the heap is consulted.
const BLOCK_ROWS: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    #[serde(rename = "id")]
    pub description_id: u64,
    pub score: f64,
    pub rank: u32,
}

/// Heap entry ordered so that the *worst* candidate is the maximum.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    score: f64,
    id: u64,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        other.score.total_cmp(&self.score).then(self.id.cmp(&other.id))
    }
}

/// Sequential 64-bit accumulation; f32 products are exact in f64, so only
/// the summation order affects the result.
#[inline]
fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Exact top-`k` keys by cosine similarity. Returns `min(k, N)` hits.
pub fn cosine_topk(query: &EmbeddingVector, store: &EmbeddingStore, k: usize) -> Result<Vec<RetrievalHit>> {
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    if k == 0 {
        return Err(Error::InvalidK);
    }
    if query.dim() != store.dim() {
        return Err(Error::DimMismatch { expected: store.dim(), actual: query.dim() });
    }
    let qn = norm_f32(query.as_slice());
    if (qn - 1.0).abs() > QUERY_NORM_TOL {
        return Err(Error::QueryNotNormalized(qn));
    }

    let q = query.as_slice();
    let dim = store.dim();
    let k = k.min(store.len());
    let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
    let mut scores = Vec::with_capacity(BLOCK_ROWS);
    let ids = store.ids();
    for (block, rows) in store.data().chunks(BLOCK_ROWS * dim).enumerate() {
        scores.clear();
        scores.extend(rows.chunks_exact(dim).map(|row| dot_f64(q, row)));
        let base = block * BLOCK_ROWS;
        for (i, &score) in scores.iter().enumerate() {
            let cand = Candidate { score, id: ids[base + i] };
            if heap.len() < k {
                heap.push(cand);
            } else if let Some(worst) = heap.peek() {
                if cand < *worst {
                    heap.pop();
                    heap.push(cand);
                }
            }
        }
    }
    Ok(heap
        .into_sorted_vec()
        .into_iter()
        .enumerate()
        .map(|(rank, c)| RetrievalHit { description_id: c.id, score: c.score, rank: rank as u32 })
        .collect())
}

/// Retrieved descriptions for every crop of one image, in flat crop order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSet {
    pub k: usize,
    pub per_crop: Vec<(CropId, Vec<RetrievalHit>)>,
}

impl RetrievalSet {
    pub fn total_hits(&self) -> usize {
        self.per_crop.iter().map(|(_, h)| h.len()).sum()
    }

    pub fn hits(&self, crop: CropId) -> Option<&[RetrievalHit]> {
        self.per_crop.iter().find(|(c, _)| *c == crop).map(|(_, h)| h.as_slice())
    }
}

/// Embeds all 15 crops of an image and retrieves the top-`k` keys for each.
pub fn batch_retrieve<E: Embedder + ?Sized>(
    image: &[u8],
    width: u32,
    height: u32,
    embedder: &E,
    store: &EmbeddingStore,
    k: usize,
    crops: &CropConfig,
) -> Result<RetrievalSet> {
    let regions = generate_all_crops(width, height, crops)?;
    let mut per_crop = Vec::with_capacity(regions.len());
    for (crop, region) in regions {
        let query = embedder.embed_region(image, width, height, region)?;
        per_crop.push((crop, cosine_topk(&query, store, k)?));
    }
    Ok(RetrievalSet { k, per_crop })
}
