use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use proptest::prelude::*;
use ragcap::annotations::{db_to_bytes, parse_attributes, parse_lexicon, parse_relationships, read_db, ParseMode};
use ragcap::checkpoint::{load_model, save_model, Checkpoint};
use ragcap::config::PipelineConfig;
use ragcap::xemb::{self, XembError};
use ragcap_core::captioner::{Captioner, CaptionerConfig, Vocabulary};
use ragcap_core::conditioning::ConditioningConfig;
use ragcap_core::descdb::build_database;
use ragcap_core::embed::{mock_embed, EmbeddingStore};
use ragcap_core::rng::SplitMix64;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn store(n: usize, dim: usize, seed: u64) -> EmbeddingStore {
    let mut s = EmbeddingStore::new(dim);
    for i in 0..n {
        s.push(seed.wrapping_add(i as u64 * 7), &mock_embed(&(i as u64).to_le_bytes(), dim, seed)).unwrap();
    }
    s
}

proptest! {
    #[test]
    fn xemb_roundtrip(n in 0usize..40, dim in 1usize..70, seed in any::<u64>()) {
        let s = store(n, dim, seed);
        let bytes = xemb::to_bytes(&s);
        prop_assert_eq!(bytes.len() as u64, xemb::file_len(dim, n).unwrap());
        let back = xemb::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.ids(), s.ids());
        prop_assert_eq!(back.dim(), s.dim());
        let same_bits = back.data().iter().zip(s.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same_bits);
    }

    #[test]
    fn truncated_xemb_is_rejected(n in 1usize..10, dim in 1usize..10, cut in 1usize..20) {
        let bytes = xemb::to_bytes(&store(n, dim, 1));
        let cut = cut.min(bytes.len());
        let err = xemb::from_bytes(&bytes[..bytes.len() - cut]).unwrap_err();
        let truncated = matches!(err, XembError::Truncated { .. });
        prop_assert!(truncated);
    }
}

#[test]
fn lenient_fixture_parses_18_and_counts_2() {
    let file = BufReader::new(File::open(fixture("attributes_20.jsonl")).unwrap());
    let parsed = parse_attributes(file, ParseMode::Lenient).unwrap();
    assert_eq!(parsed.records.len(), 18);
    assert_eq!(parsed.errors.len(), 2);
    assert_eq!(parsed.errors.iter().map(|e| e.line).collect::<Vec<_>>(), vec![6, 13]);
    let file = BufReader::new(File::open(fixture("attributes_20.jsonl")).unwrap());
    assert_eq!(parse_attributes(file, ParseMode::Strict).unwrap_err().line, 6);
}

#[test]
fn attribute_line_maps_fields() {
    let line = r#"{"object":"Cars","attributes":["red"],"image_id":1,"region_id":7}"#;
    let parsed = parse_attributes(line.as_bytes(), ParseMode::Strict).unwrap();
    assert_eq!(parsed.records[0].object_name, "Cars");
    assert_eq!(parsed.records[0].attributes, vec!["red"]);
    assert_eq!(parsed.records[0].source_region_id, 7);
    assert!(parse_attributes(&b""[..], ParseMode::Strict).unwrap().records.is_empty());
    assert!(parse_relationships(&b""[..], ParseMode::Strict).unwrap().records.is_empty());
    let blank = r#"{"subject":" ","predicate":"on","object":"x","image_id":1}"#;
    assert_eq!(parse_relationships(blank.as_bytes(), ParseMode::Lenient).unwrap().errors.len(), 1);
}

#[test]
fn shuffled_fixture_serializes_identically() {
    let lex = parse_lexicon(&std::fs::read_to_string(fixture("lexicon.json")).unwrap()).unwrap();
    let file = BufReader::new(File::open(fixture("attributes_20.jsonl")).unwrap());
    let attrs = parse_attributes(file, ParseMode::Lenient).unwrap().records;
    let a = db_to_bytes(&build_database(&attrs, &[], &lex));
    for seed in 0..5 {
        let mut shuffled = attrs.clone();
        SplitMix64::new(seed).shuffle(&mut shuffled);
        assert_eq!(db_to_bytes(&build_database(&shuffled, &[], &lex)), a);
    }
    let db = read_db(&a[..]).unwrap();
    assert_eq!(db_to_bytes(&db), a);
    assert!(db.iter().any(|d| d.text == "red car"));
    assert!(db.iter().any(|d| d.text == "green traffic light"));
}

#[test]
fn checkpoint_roundtrip_preserves_logits() {
    let mut rng = SplitMix64::new(3);
    let cfg = CaptionerConfig { d: 8, layers: 1, heads: 2, d_ff: 16, max_len: 6, vocab_size: 9 };
    let cond = ConditioningConfig { d_o: 4, d_t: 4, d_x: 4, ..Default::default() };
    let model = Captioner::new(cfg, cond, false, &mut rng).unwrap();
    let vocab = Vocabulary::new(["red", "cube", "left", "of"]);
    let bytes = save_model(&model, &vocab).to_bytes();
    let (back, v2) = load_model(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(v2, vocab);
    assert_eq!(back.params().flatten(), model.params().flatten());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn config_rejects_unknown_keys() {
    assert!(PipelineConfig::from_json(r#"{"scenes": 10}"#).is_ok());
    assert!(PipelineConfig::from_json(r#"{"scenes": 10, "typo": 1}"#).is_err());
    assert!(PipelineConfig::from_json(r#"{"experiment": {"k": 0}}"#).is_err());
    assert!(PipelineConfig::from_json(r#"{"experiment": {"captioner": {"dd": 3}}}"#).is_err());
}
