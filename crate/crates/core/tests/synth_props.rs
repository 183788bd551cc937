use std::collections::BTreeSet;

use ragcap_core::crops::CropConfig;
use ragcap_core::experiment::embed_database;
use ragcap_core::retrieval::batch_retrieve;
use ragcap_core::synth::{generate_dataset, Predicate, SynthConfig, SynthDataset, SynthEmbedder, IMAGE_PX};

fn dataset(n: usize, seed: u64) -> SynthDataset {
    generate_dataset(n, seed, SynthConfig::default()).unwrap()
}

#[test]
fn same_seed_same_dataset() {
    let (a, b) = (dataset(50, 4), dataset(50, 4));
    assert_eq!(a.scenes, b.scenes);
    assert_eq!(a.payloads, b.payloads);
    assert_eq!(a.captions, b.captions);
    assert_eq!(a.object_features, b.object_features);
    assert_eq!(a.db, b.db);
    assert_ne!(dataset(50, 5).payloads, a.payloads);
}

#[test]
fn database_size_matches_enumeration() {
    let data = dataset(300, 9);
    let mut texts = BTreeSet::new();
    for scene in &data.scenes {
        let names: Vec<String> = scene.objects.iter().map(|o| format!("{} {}", o.color.as_str(), o.shape.as_str())).collect();
        texts.extend(names.iter().cloned());
        let (s, o) = (&scene.objects[0], &scene.objects[1]);
        let pred = if s.cell.1 != o.cell.1 {
            if s.cell.1 < o.cell.1 { "left of" } else { "right of" }
        } else if s.cell.0 < o.cell.0 {
            "above"
        } else {
            "below"
        };
        texts.insert(format!("{} {pred} {}", names[0], names[1]));
    }
    assert_eq!(data.db.len(), texts.len());
    let pairs = 16;
    assert!(data.db.len() <= pairs + pairs * pairs * Predicate::ALL.len());
    let db_texts: BTreeSet<String> = data.db.iter().map(|d| d.text.clone()).collect();
    assert_eq!(db_texts, texts);
}

/// Multinomial logistic regression on object features alone.
#[test]
fn object_features_do_not_predict_the_relation() {
    let data = dataset(2000, 21);
    let classes = Predicate::ALL.len();
    let label = |i: usize| Predicate::ALL.iter().position(|p| *p == data.gold_predicate(i)).unwrap();
    let x: Vec<Vec<f64>> = data
        .object_features
        .iter()
        .map(|m| {
            let mut v = m.data().to_vec();
            v.push(1.0);
            v
        })
        .collect();
    let dim = x[0].len();
    let (train, test) = (0..1600, 1600..2000);
    let mut w = vec![vec![0.0; dim]; classes];
    let probs = |w: &[Vec<f64>], xi: &[f64]| -> Vec<f64> {
        let logits: Vec<f64> = w.iter().map(|wc| wc.iter().zip(xi).map(|(a, b)| a * b).sum()).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    };
    for _ in 0..300 {
        let mut g = vec![vec![0.0; dim]; classes];
        for i in train.clone() {
            let p = probs(&w, &x[i]);
            for c in 0..classes {
                let err = p[c] - f64::from(u8::from(c == label(i)));
                for (gj, xj) in g[c].iter_mut().zip(&x[i]) {
                    *gj += err * xj;
                }
            }
        }
        for (wc, gc) in w.iter_mut().zip(&g) {
            for (wj, gj) in wc.iter_mut().zip(gc) {
                *wj -= 0.5 * gj / train.len() as f64;
            }
        }
    }
    let correct = test
        .clone()
        .filter(|&i| {
            let p = probs(&w, &x[i]);
            let best = (0..classes).max_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap()).unwrap();
            best == label(i)
        })
        .count();
    let mut counts = vec![0usize; classes];
    test.clone().for_each(|i| counts[label(i)] += 1);
    let chance = *counts.iter().max().unwrap() as f64 / test.len() as f64;
    let accuracy = correct as f64 / test.len() as f64;
    assert!(accuracy <= chance + 0.10, "probe {accuracy} vs chance {chance}");
}

#[test]
fn gold_relation_is_retrieved_for_most_scenes() {
    let data = dataset(300, 13);
    let embedder = SynthEmbedder::default();
    let store = embed_database(&data.db, &embedder).unwrap();
    let mut found = 0;
    for (payload, caption) in data.payloads.iter().zip(&data.captions) {
        let gold = caption.join(" ");
        let set = batch_retrieve(payload, IMAGE_PX, IMAGE_PX, &embedder, &store, 12, &CropConfig::default()).unwrap();
        let hit = set
            .per_crop
            .iter()
            .flat_map(|(_, hits)| hits)
            .any(|h| data.db.get(h.description_id as u32).is_some_and(|d| d.text == gold));
        found += usize::from(hit);
    }
    assert!(found as f64 >= 0.9 * data.len() as f64, "{found}/{}", data.len());
}
