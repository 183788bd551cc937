//! End-to-end pipeline: synth -> build-db -> embed -> retrieve -> train ->
//! evaluate, with content-addressed stage outputs.
//!
//! Every stage writes into `<out>/<stage>/<key>/`, where `key` is a SHA-256
//! of the stage's configuration slice together with its input file bytes.
//! A stage whose directory already exists is reported as cached and skipped.
//! Outputs are built in a scratch directory and renamed into place only on
//! success.

use std::fs;
use std::path::{Path, PathBuf};

use ragcap_core::captioner::{Adam, AdamConfig, Trainer, Vocabulary};
use ragcap_core::descdb::CanonLexicon;
use ragcap_core::experiment::{
    assemble, build_example, embed_database, evaluate_cell, run_scst, train_cell, AblationRow, ExperimentConfig,
    Prepared, ABLATION_GRID,
};
use ragcap_core::embed::EmbeddingStore;
use ragcap_core::retrieval::{batch_retrieve, RetrievalSet};
use ragcap_core::synth::{generate_dataset, SynthDataset, IMAGE_PX};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::annotations::{parse_attributes, parse_relationships, ParseMode};
use crate::artifacts::{self, GoldRecord, RetrievalRecord, SceneRecord};
use crate::checkpoint::{self, Checkpoint};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};

pub const MODEL: &str = "model.xckp";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const METRICS: &str = "metrics.json";
pub const RETRIEVAL: &str = "retrieval.jsonl";
pub const REPORT: &str = "report.json";
pub const RESOLVED_CONFIG: &str = "config.resolved.json";

/// `(step, loss, reward)`; the reward is empty for cross-entropy steps.
pub type LogRow = (usize, f64, Option<f64>);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageOutcome {
    pub name: String,
    pub key: String,
    pub cached: bool,
    pub dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub stages: Vec<StageOutcome>,
    /// One metrics report per trained cell.
    pub reports: Vec<PathBuf>,
    pub report: PathBuf,
}

/// Metrics of one trained cell as written to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub label: String,
    pub use_text: bool,
    pub use_image: bool,
    pub test_scenes: usize,
    pub relation_accuracy: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub cider: f64,
    pub test_loss: f64,
}

impl MetricsReport {
    pub fn new(row: &AblationRow, test_scenes: usize) -> Self {
        Self {
            label: row.label().to_string(),
            use_text: row.use_text,
            use_image: row.use_image,
            test_scenes,
            relation_accuracy: row.relation_accuracy,
            bleu1: row.bleu1,
            bleu2: row.bleu2,
            bleu3: row.bleu3,
            bleu4: row.bleu4,
            cider: row.cider,
            test_loss: row.test_loss,
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content address of a stage run.
pub fn stage_key<C: Serialize>(name: &str, config: &C, inputs: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(b"ragcap-stage-v1\0");
    h.update(name.as_bytes());
    h.update(b"\0");
    h.update(serde_json::to_vec(config).map_err(|e| Error::Config(e.to_string()))?);
    for path in inputs {
        let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        h.update(b"\0");
        h.update(file_name.as_bytes());
        h.update(b"\0");
        h.update(sha256_hex(&artifacts::read_bytes(path)?).as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

struct Runner<'a> {
    out: &'a Path,
    stages: Vec<StageOutcome>,
    log: &'a mut dyn FnMut(&str),
}

impl Runner<'_> {
    fn stage<C, F>(&mut self, name: &'static str, config: &C, inputs: &[&Path], build: F) -> Result<PathBuf>
    where
        C: Serialize,
        F: FnOnce(&Path) -> Result<()>,
    {
        let key = stage_key(name, config, inputs).map_err(|e| Error::Stage { stage: name, source: Box::new(e) })?;
        let dir = self.out.join(name).join(&key[..16]);
        let cached = dir.is_dir();
        if !cached {
            let tmp = self.out.join(name).join(format!(".{}.partial", &key[..16]));
            let _ = fs::remove_dir_all(&tmp);
            let result = fs::create_dir_all(&tmp)
                .map_err(|e| Error::io(&tmp, e))
                .and_then(|_| build(&tmp))
                .and_then(|_| fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e)));
            if let Err(e) = result {
                let _ = fs::remove_dir_all(&tmp);
                return Err(Error::Stage { stage: name, source: Box::new(e) });
            }
        }
        (self.log)(&format!("stage {name:<16} {} {}", if cached { "cached" } else { "ran   " }, &key[..16]));
        self.stages.push(StageOutcome { name: name.to_string(), key, cached, dir: dir.clone() });
        Ok(dir)
    }
}

/// Rebuilds model-ready examples from stage artifacts.
pub fn load_prepared(
    scenes_dir: &Path,
    keys: &Path,
    retrieval: &Path,
    cfg: &ExperimentConfig,
) -> Result<Prepared> {
    let (scenes, gold) = artifacts::read_scenes(scenes_dir)?;
    let store = artifacts::read_store(keys)?;
    let sets: Vec<RetrievalRecord> = artifacts::read_jsonl(retrieval)?;
    let sets = sets.into_iter().map(|r| artifacts::retrieval_from_json(r.crops)).collect::<Result<Vec<_>>>()?;
    prepare_records(&scenes, &gold, &store, sets, cfg)
}

/// Retrieves for every scene record with the experiment's embedder.
pub fn retrieve_records(scenes: &[SceneRecord], store: &EmbeddingStore, cfg: &ExperimentConfig) -> Result<Vec<RetrievalSet>> {
    scenes
        .iter()
        .map(|s| {
            let payload = s.scene().payload();
            Ok(batch_retrieve(&payload, IMAGE_PX, IMAGE_PX, &cfg.embedder, store, cfg.k, &cfg.crops)?)
        })
        .collect()
}

pub fn prepare_records(
    scenes: &[SceneRecord],
    gold: &[GoldRecord],
    store: &EmbeddingStore,
    sets: Vec<RetrievalSet>,
    cfg: &ExperimentConfig,
) -> Result<Prepared> {
    if sets.len() != scenes.len() || gold.len() != scenes.len() {
        return Err(Error::Data(format!(
            "{} scenes, {} gold captions, {} retrieval records",
            scenes.len(),
            gold.len(),
            sets.len()
        )));
    }
    let vocab = Vocabulary::new(SynthDataset::words());
    let mut examples = Vec::with_capacity(scenes.len());
    let mut references = Vec::with_capacity(scenes.len());
    for ((scene, gold), set) in scenes.iter().zip(gold).zip(&sets) {
        let caption: Vec<String> = gold.caption.split(' ').map(str::to_string).collect();
        let payload = scene.scene().payload();
        let objects = scene.feature_matrix()?;
        examples.push(build_example(objects, &payload, &caption, set, store, &cfg.embedder, &cfg.crops, &vocab)?);
        references.push(caption);
    }
    Ok(assemble(vocab, examples, references, sets, cfg)?)
}

/// Reads a checkpoint file back into a captioner.
pub fn load_checkpoint(path: &Path) -> Result<ragcap_core::captioner::Captioner> {
    let bytes = artifacts::read_bytes(path)?;
    let bad = |source| Error::Checkpoint { path: path.to_path_buf(), source };
    let ckpt = Checkpoint::from_bytes(&bytes).map_err(bad)?;
    checkpoint::load_model(&ckpt).map(|(m, _)| m).map_err(bad)
}

#[derive(Serialize)]
struct TrainStageConfig<'a> {
    experiment: &'a ExperimentConfig,
    scst: &'a crate::config::ScstConfig,
    use_text: bool,
    use_image: bool,
}

pub fn write_train_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(artifacts::create_file(path)?);
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(["step", "loss", "reward"]).map_err(csv_err)?;
    for (step, loss, reward) in rows {
        let reward = reward.map(|r| r.to_string()).unwrap_or_default();
        w.write_record([step.to_string(), loss.to_string(), reward]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Cross-entropy (and optionally self-critical) training of one cell.
pub fn train_model(
    cfg: &PipelineConfig,
    data: &Prepared,
    use_text: bool,
    use_image: bool,
) -> Result<(Trainer, Vec<LogRow>)> {
    let mut log = Vec::new();
    let mut trainer = train_cell(&cfg.experiment, data, use_text, use_image, |s, l| log.push((s, l, None)))?;
    if !trainer.model.params().values().iter().all(|m| m.is_finite()) {
        return Err(Error::Numeric("non-finite parameters after cross-entropy training".into()));
    }
    if cfg.scst.steps > 0 {
        let offset = log.len();
        trainer.adam = Adam::new(AdamConfig { lr: cfg.scst.lr, ..cfg.experiment.adam }, trainer.model.params());
        run_scst(&mut trainer, data, cfg.scst.steps, cfg.scst.batch_size, cfg.experiment.seed, |s, l, r| {
            log.push((offset + s, l, Some(r)))
        })?;
    }
    Ok((trainer, log))
}

/// Runs every stage in dependency order under `out`.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path, log: &mut dyn FnMut(&str)) -> Result<PipelineRun> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let resolved = cfg.resolved_json();
    artifacts::write_bytes(&out.join(RESOLVED_CONFIG), resolved.as_bytes())?;
    log(&format!("resolved config:\n{resolved}"));
    let mut r = Runner { out, stages: Vec::new(), log };
    let exp = &cfg.experiment;

    let synth_cfg = (cfg.scenes, cfg.seed, &cfg.synth);
    let synth = r.stage("synth", &synth_cfg, &[], |dir| {
        let data = generate_dataset(cfg.scenes, cfg.seed, cfg.synth)?;
        artifacts::write_scene_files(dir, &data)
    })?;
    let (attrs_path, rels_path) = (synth.join(artifacts::ATTRIBUTES), synth.join(artifacts::RELATIONSHIPS));
    let (scenes_path, gold_path) = (synth.join(artifacts::SCENES), synth.join(artifacts::GOLD));

    let db_cfg = (&cfg.aliases, cfg.strict);
    let db_dir = r.stage("build-db", &db_cfg, &[&attrs_path, &rels_path], |dir| {
        let mode = if cfg.strict { ParseMode::Strict } else { ParseMode::Lenient };
        let bad = |path: &Path| {
            let path = path.to_path_buf();
            move |source| Error::Annotation { path, source }
        };
        let attrs = parse_attributes(artifacts::open_file(&attrs_path)?, mode).map_err(bad(&attrs_path))?;
        let rels = parse_relationships(artifacts::open_file(&rels_path)?, mode).map_err(bad(&rels_path))?;
        let lex = CanonLexicon::new(cfg.aliases.clone());
        let db = ragcap_core::descdb::build_database(&attrs.records, &rels.records, &lex);
        artifacts::write_db(&dir.join(artifacts::DESCDB), &db)
    })?;
    let db_path = db_dir.join(artifacts::DESCDB);

    let keys_dir = r.stage("embed", &exp.embedder, &[&db_path], |dir| {
        let db = artifacts::read_db(&db_path)?;
        artifacts::write_store(&dir.join(artifacts::KEYS), &embed_database(&db, &exp.embedder)?)
    })?;
    let keys_path = keys_dir.join(artifacts::KEYS);

    let retrieve_cfg = (&exp.embedder, &exp.crops, exp.k);
    let ret_dir = r.stage("retrieve", &retrieve_cfg, &[&keys_path, &scenes_path], |dir| {
        let store = artifacts::read_store(&keys_path)?;
        let (scenes, _) = artifacts::read_scenes(&synth)?;
        let sets = retrieve_records(&scenes, &store, exp)?;
        let records: Vec<RetrievalRecord> = scenes
            .iter()
            .zip(&sets)
            .map(|(s, set)| RetrievalRecord { index: s.index, crops: artifacts::retrieval_json(set) })
            .collect();
        artifacts::write_jsonl(&dir.join(RETRIEVAL), &records)
    })?;
    let ret_path = ret_dir.join(RETRIEVAL);

    let data_inputs = [scenes_path.as_path(), gold_path.as_path(), keys_path.as_path(), ret_path.as_path()];
    let mut prepared: Option<Prepared> = None;
    let data = |slot: &mut Option<Prepared>| -> Result<Prepared> {
        match slot.take() {
            Some(p) => Ok(p),
            None => load_prepared(&synth, &keys_path, &ret_path, exp),
        }
    };
    let cells: Vec<(bool, bool)> = if cfg.ablation { ABLATION_GRID.to_vec() } else { vec![(true, true)] };
    let mut reports = Vec::new();
    let mut summary = Vec::new();
    for (use_text, use_image) in cells {
        let train_cfg = TrainStageConfig { experiment: exp, scst: &cfg.scst, use_text, use_image };
        let train_dir = r.stage("train", &train_cfg, &data_inputs, |dir| {
            let d = data(&mut prepared)?;
            let trained = train_model(cfg, &d, use_text, use_image)
                .map(|(t, rows)| (checkpoint::save_model(&t.model, &d.vocab), rows));
            prepared = Some(d);
            let (ckpt, rows) = trained?;
            artifacts::write_bytes(&dir.join(MODEL), &ckpt.to_bytes())?;
            write_train_log(&dir.join(TRAIN_LOG), &rows)
        })?;
        let model_path = train_dir.join(MODEL);
        let mut eval_inputs = data_inputs.to_vec();
        eval_inputs.push(&model_path);
        let eval_dir = r.stage("evaluate", exp, &eval_inputs, |dir| {
            let model = load_checkpoint(&model_path)?;
            let d = data(&mut prepared)?;
            let row = evaluate_cell(&model, &d);
            let test_scenes = d.test.len();
            prepared = Some(d);
            let report = MetricsReport::new(&row?, test_scenes);
            let json = serde_json::to_string_pretty(&report).map_err(|e| Error::json(dir, e))?;
            artifacts::write_bytes(&dir.join(METRICS), format!("{json}\n").as_bytes())
        })?;
        let metrics_path = eval_dir.join(METRICS);
        let metrics: serde_json::Value = serde_json::from_slice(&artifacts::read_bytes(&metrics_path)?)
            .map_err(|e| Error::json(&metrics_path, e))?;
        summary.push(metrics);
        reports.push(metrics_path);
    }
    let report = out.join(REPORT);
    let json = serde_json::to_string_pretty(&serde_json::json!({ "cells": summary })).map_err(|e| Error::json(&report, e))?;
    artifacts::write_bytes(&report, format!("{json}\n").as_bytes())?;
    Ok(PipelineRun { stages: r.stages, reports, report })
}
