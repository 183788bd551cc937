use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ragcap(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ragcap")).args(args).current_dir(cwd).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const QUICKSTART: &str = r#"{
  "scenes": 40,
  "seed": 5,
  "scst": {"steps": 2, "batch_size": 2},
  "experiment": {"k": 3, "epochs": 1, "batch_size": 8,
                 "captioner": {"d": 16, "layers": 1, "heads": 2, "d_ff": 32, "max_len": 8, "vocab_size": 64}}
}"#;

#[test]
fn quickstart_pipeline_runs_then_caches() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), QUICKSTART).unwrap();
    let first = ragcap(&["pipeline", "--config", "cfg.json", "--out", "out"], dir.path());
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    let log = String::from_utf8_lossy(&first.stderr);
    assert!(log.contains("resolved config"));
    assert_eq!(log.matches(" ran ").count(), 6);
    let report = fs::read(dir.path().join("out/report.json")).unwrap();

    let second = ragcap(&["pipeline", "--config", "cfg.json", "--out", "out"], dir.path());
    assert_eq!(code(&second), 0);
    let log = String::from_utf8_lossy(&second.stderr);
    assert_eq!(log.matches("stage ").count(), 6);
    assert_eq!(log.matches(" cached ").count(), 6);
    assert_eq!(fs::read(dir.path().join("out/report.json")).unwrap(), report);
}

#[test]
fn ablation_writes_four_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = QUICKSTART.replacen("\"scenes\": 40", "\"scenes\": 40, \"ablation\": true", 1);
    fs::write(dir.path().join("cfg.json"), cfg).unwrap();
    let out = ragcap(&["pipeline", "--config", "cfg.json", "--out", "out"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("out/report.json")).unwrap()).unwrap();
    let labels: Vec<&str> = report["cells"].as_array().unwrap().iter().map(|c| c["label"].as_str().unwrap()).collect();
    assert_eq!(labels, vec!["baseline", "text", "cond", "text+cond"]);
    assert_eq!(fs::read_dir(dir.path().join("out/evaluate")).unwrap().count(), 4);
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("bad.json"), r#"{"scenes": 10, "nope": true}"#).unwrap();
    assert_eq!(code(&ragcap(&["pipeline", "--config", "bad.json"], p)), 2);
    assert_eq!(code(&ragcap(&["pipeline", "--config", "missing.json"], p)), 3);
    assert_eq!(code(&ragcap(&["no-such-command"], p)), 2);
    fs::write(p.join("attrs.jsonl"), "{not json}\n").unwrap();
    fs::write(p.join("rels.jsonl"), "").unwrap();
    let args = ["build-db", "--attrs", "attrs.jsonl", "--rels", "rels.jsonl", "--out", "db.jsonl"];
    assert_eq!(code(&ragcap(&args, p)), 0);
    let mut strict = args.to_vec();
    strict.push("--strict");
    assert_eq!(code(&ragcap(&strict, p)), 3);
    fs::write(p.join("junk.xemb"), b"NOPE").unwrap();
    let retrieve = ["retrieve", "--db", "db.jsonl", "--store", "junk.xemb", "--image", "attrs.jsonl", "--width", "8", "--height", "8"];
    assert_eq!(code(&ragcap(&retrieve, p)), 3);
}

#[test]
fn stage_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&ragcap(&["synth-gen", "--n", "30", "--seed", "2", "--out", "data"], p)), 0);
    for f in ["descdb.jsonl", "keys.xemb", "scenes.jsonl", "gold.jsonl"] {
        assert!(p.join("data").join(f).is_file(), "{f}");
    }
    let build = ["build-db", "--attrs", "data/attributes.jsonl", "--rels", "data/relationships.jsonl", "--out", "db.jsonl"];
    assert_eq!(code(&ragcap(&build, p)), 0);
    assert_eq!(fs::read(p.join("db.jsonl")).unwrap(), fs::read(p.join("data/descdb.jsonl")).unwrap());
    assert_eq!(code(&ragcap(&["embed", "--db", "db.jsonl", "--out", "keys.xemb"], p)), 0);
    assert_eq!(fs::read(p.join("keys.xemb")).unwrap(), fs::read(p.join("data/keys.xemb")).unwrap());

    fs::write(p.join("img.txt"), "scene 90 90\nobj 0 0 red cube\nobj 2 1 blue cone\n").unwrap();
    let retrieve = ["retrieve", "--db", "db.jsonl", "--store", "keys.xemb", "--image", "img.txt", "--width", "90", "--height", "90", "--k", "500"];
    let out = ragcap(&retrieve, p);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let hits: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(hits.as_object().unwrap().len(), 15);

    fs::write(p.join("cfg.json"), QUICKSTART).unwrap();
    let train = ["train", "--data", "data", "--config", "cfg.json", "--out", "m.xckp", "--log", "log.csv", "--no-text"];
    let out = ragcap(&train, p);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(p.join("log.csv")).unwrap();
    assert!(log.starts_with("step,loss,reward\n"));
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(metrics["label"], "cond");
}

#[test]
fn evaluate_and_gradcheck() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("hyp.txt"), "a red cube\n").unwrap();
    fs::write(p.join("refs.jsonl"), "[\"a red cube\"]\n").unwrap();
    fs::write(p.join("corpus.txt"), "a red cube\nthe blue sphere\na green cone\n").unwrap();
    let out = ragcap(&["evaluate", "--hyp", "hyp.txt", "--refs", "refs.jsonl", "--corpus", "corpus.txt"], p);
    assert_eq!(code(&out), 0);
    let m: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(m["bleu1"], 1.0);
    assert!(m["bleu4"].as_f64().unwrap() == 0.0);
    fs::write(p.join("refs.jsonl"), "not json\n").unwrap();
    assert_eq!(code(&ragcap(&["evaluate", "--hyp", "hyp.txt", "--refs", "refs.jsonl"], p)), 3);
    let gc = ragcap(&["gradcheck", "--seeds", "2"], p);
    assert_eq!(code(&gc), 0, "{}", String::from_utf8_lossy(&gc.stdout));
}
