use proptest::prelude::*;
use ragcap_core::crops::CropConfig;
use ragcap_core::embed::{mock_embed, normalize, EmbeddingStore, EmbeddingVector, MockEmbedder};
use ragcap_core::retrieval::{batch_retrieve, cosine_topk, RetrievalHit};
use ragcap_core::rng::SplitMix64;

fn random_store(n: usize, dim: usize, seed: u64) -> EmbeddingStore {
    let mut store = EmbeddingStore::new(dim);
    for i in 0..n {
        store.push(i as u64, &mock_embed(&(i as u64).to_le_bytes(), dim, seed)).unwrap();
    }
    store
}

/// Scores every key in 64-bit and sorts the whole list.
fn oracle(q: &EmbeddingVector, store: &EmbeddingStore, k: usize) -> Vec<(u64, f64)> {
    let mut all: Vec<(u64, f64)> = store
        .iter()
        .map(|(id, row)| {
            let s: f64 = q.as_slice().iter().zip(row).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
            (id, s)
        })
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn check(hits: &[RetrievalHit], expected: &[(u64, f64)]) -> Result<(), TestCaseError> {
    prop_assert_eq!(hits.len(), expected.len());
    for (r, (h, e)) in hits.iter().zip(expected).enumerate() {
        prop_assert_eq!(h.rank as usize, r);
        prop_assert_eq!(h.description_id, e.0);
        prop_assert!((h.score - e.1).abs() <= 1e-12);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn blocked_topk_equals_full_sort(n in 1usize..3000, dim in 1usize..24, k in 1usize..40, seed in any::<u64>()) {
        let store = random_store(n, dim, seed);
        let q = mock_embed(b"query", dim, seed ^ 1);
        check(&cosine_topk(&q, &store, k).unwrap(), &oracle(&q, &store, k))?;
    }

    #[test]
    fn smaller_k_is_a_prefix(n in 1usize..500, k in 1usize..30, seed in any::<u64>()) {
        let store = random_store(n, 8, seed);
        let q = mock_embed(b"q", 8, seed);
        let big = cosine_topk(&q, &store, k + 5).unwrap();
        let small = cosine_topk(&q, &store, k).unwrap();
        prop_assert_eq!(&big[..small.len()], &small[..]);
        for w in big.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
            prop_assert!(w[0].score > w[1].score || w[0].description_id < w[1].description_id);
        }
    }

    #[test]
    fn ranking_is_scale_invariant(raw in prop::collection::vec(-1.0f32..1.0, 16), c in 1e-3f32..1e3, seed in any::<u64>()) {
        prop_assume!(raw.iter().any(|x| x.abs() > 1e-2));
        let store = random_store(200, 16, seed);
        let scaled: Vec<f32> = raw.iter().map(|x| x * c).collect();
        let ids = |v: &[f32]| -> Vec<(u64, u32)> {
            cosine_topk(&normalize(v).unwrap(), &store, 12).unwrap().iter().map(|h| (h.description_id, h.rank)).collect()
        };
        prop_assert_eq!(ids(&raw), ids(&scaled));
    }
}

#[test]
fn ties_break_by_ascending_id() {
    let e = normalize(&[1.0, 0.0]).unwrap();
    let mut store = EmbeddingStore::new(2);
    for id in [5u64, 2, 9, 0] {
        store.push(id, &e).unwrap();
    }
    let hits = cosine_topk(&e, &store, 4).unwrap();
    assert_eq!(hits.iter().map(|h| h.description_id).collect::<Vec<_>>(), vec![0, 2, 5, 9]);
}

#[test]
fn batch_retrieve_is_deterministic_and_clamps() {
    let store = random_store(1, 16, 3);
    let emb = MockEmbedder { dim: 16, seed: 4 };
    let a = batch_retrieve(b"img", 40, 40, &emb, &store, 1, &CropConfig::default()).unwrap();
    assert_eq!(a, batch_retrieve(b"img", 40, 40, &emb, &store, 1, &CropConfig::default()).unwrap());
    assert!(a.per_crop.iter().all(|(_, h)| h.len() == 1 && h[0].description_id == 0));
    let clamped = batch_retrieve(b"img", 40, 40, &emb, &store, 12, &CropConfig::default()).unwrap();
    assert_eq!(clamped.total_hits(), 15);
    let mut rng = SplitMix64::new(1);
    let big = random_store(100, 16, rng.next_u64());
    assert_eq!(batch_retrieve(b"img", 40, 40, &emb, &big, 12, &CropConfig::default()).unwrap().total_hits(), 180);
}
