use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ragcap_core::crops::CropConfig;
use ragcap_core::descdb::CanonLexicon;
use ragcap_core::embed::{Embedder, MockEmbedder};
use ragcap_core::experiment::{embed_database, ExperimentConfig};
use ragcap_core::gradcheck::{captioner_check, conditioning_check, CAPTIONER_TOLERANCE, CONDITIONING_TOLERANCE};
use ragcap_core::metrics::{build_idf_from_sentences, cider, corpus_bleu, tokenize, Smoothing};
use ragcap_core::retrieval::batch_retrieve;
use ragcap_core::synth::{generate_dataset, SynthConfig, SynthEmbedder};
use serde::Serialize;

use ragcap::annotations::{parse_attributes, parse_lexicon, parse_relationships, ParseMode};
use ragcap::artifacts::{self, RetrievalRecord};
use ragcap::checkpoint;
use ragcap::config::PipelineConfig;
use ragcap::pipeline::{self, retrieve_records, run_pipeline, RETRIEVAL};
use ragcap::{Error, Result};

#[derive(Parser)]
#[command(name = "ragcap", version, about = "Retrieval-augmented captioning at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbedderKind {
    Mock,
    Synth,
}

#[derive(clap::Args)]
struct EmbedderArgs {
    #[arg(long, value_enum, default_value = "synth")]
    embedder: EmbedderKind,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 0x5EED)]
    seed: u64,
}

impl EmbedderArgs {
    fn build(&self) -> Box<dyn Embedder> {
        match self.embedder {
            EmbedderKind::Mock => Box::new(MockEmbedder { dim: self.dim, seed: self.seed }),
            EmbedderKind::Synth => Box::new(SynthEmbedder { dim: self.dim, seed: self.seed, ..Default::default() }),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build the description database from attribute and relationship JSONL.
    BuildDb {
        #[arg(long)]
        attrs: PathBuf,
        #[arg(long)]
        rels: PathBuf,
        /// JSON file `{"aliases": {"from": "to"}}`.
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// Fail on the first malformed line instead of skipping it.
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed every description into an XEMB key file.
    Embed {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        embedder: EmbedderArgs,
    },
    /// Retrieve the top-k descriptions for all 15 crops of one image.
    Retrieve {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        width: u32,
        #[arg(long)]
        height: u32,
        #[arg(long, default_value_t = 12)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        embedder: EmbedderArgs,
    },
    /// Train the captioner on a synth-gen directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// CSV training log (step,loss,reward).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        no_text: bool,
        #[arg(long)]
        no_cond: bool,
    },
    /// Score hypotheses against references with BLEU-1..4 and CIDEr.
    Evaluate {
        /// One hypothesis caption per line.
        #[arg(long)]
        hyp: PathBuf,
        /// One JSON array of reference captions per line.
        #[arg(long)]
        refs: PathBuf,
        /// Reference sentences (one per line) for document frequencies;
        /// defaults to the references themselves.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Finite-difference gradient checks over several seeds.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Generate a synthetic corpus together with its database and keys.
    SynthGen {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the staged pipeline described by a JSON config.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::json("<stdout>", e))?;
    match writeln!(std::io::stdout().lock(), "{json}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn lines(path: &Path) -> Result<Vec<String>> {
    artifacts::open_file(path)?.lines().collect::<std::io::Result<_>>().map_err(|e| Error::io(path, e))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::BuildDb { attrs, rels, lexicon, strict, out } => {
            let mode = if strict { ParseMode::Strict } else { ParseMode::Lenient };
            let lex = match lexicon {
                Some(p) => parse_lexicon(&String::from_utf8_lossy(&artifacts::read_bytes(&p)?))
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
                None => CanonLexicon::empty(),
            };
            let a = parse_attributes(artifacts::open_file(&attrs)?, mode)
                .map_err(|source| Error::Annotation { path: attrs.clone(), source })?;
            let r = parse_relationships(artifacts::open_file(&rels)?, mode)
                .map_err(|source| Error::Annotation { path: rels.clone(), source })?;
            for (path, errors) in [(&attrs, &a.errors), (&rels, &r.errors)] {
                for e in errors {
                    eprintln!("warning: {}: skipped {e}", path.display());
                }
            }
            let db = ragcap_core::descdb::build_database(&a.records, &r.records, &lex);
            artifacts::write_db(&out, &db)?;
            eprintln!(
                "{} descriptions from {} attributes and {} relationships ({} lines skipped)",
                db.len(),
                a.records.len(),
                r.records.len(),
                a.errors.len() + r.errors.len()
            );
        }
        Command::Embed { db, out, embedder } => {
            let db = artifacts::read_db(&db)?;
            let store = embed_database(&db, embedder.build().as_ref())?;
            artifacts::write_store(&out, &store)?;
            eprintln!("{} keys of dimension {}", store.len(), store.dim());
        }
        Command::Retrieve { db, store, image, width, height, k, out, embedder } => {
            let db = artifacts::read_db(&db)?;
            let store = artifacts::read_store(&store)?;
            if k > store.len() {
                eprintln!("warning: k = {k} exceeds the {} stored keys; returning all of them", store.len());
            }
            let payload = artifacts::read_bytes(&image)?;
            let set = batch_retrieve(&payload, width, height, embedder.build().as_ref(), &store, k, &CropConfig::default())?;
            let mut result: BTreeMap<String, Vec<serde_json::Value>> = BTreeMap::new();
            for (crop, hits) in &set.per_crop {
                let rows = hits
                    .iter()
                    .map(|h| {
                        let text = db.get(h.description_id as u32).map(|d| d.text.clone()).unwrap_or_default();
                        serde_json::json!({ "id": h.description_id, "rank": h.rank, "score": h.score, "text": text })
                    })
                    .collect();
                result.insert(crop.to_string(), rows);
            }
            match out {
                Some(path) => {
                    let json = serde_json::to_vec_pretty(&result).map_err(|e| Error::json(&path, e))?;
                    artifacts::write_bytes(&path, &json)?;
                }
                None => print_json(&result)?,
            }
        }
        Command::Train { data, config, out, log, no_text, no_cond } => {
            let cfg = match config {
                Some(p) => PipelineConfig::load(&p)?,
                None => PipelineConfig::default(),
            };
            cfg.validate()?;
            let exp: &ExperimentConfig = &cfg.experiment;
            let (scenes, gold) = artifacts::read_scenes(&data)?;
            let store = artifacts::read_store(&data.join(artifacts::KEYS))?;
            let retrieval = data.join(RETRIEVAL);
            let sets = if retrieval.is_file() {
                let records: Vec<RetrievalRecord> = artifacts::read_jsonl(&retrieval)?;
                records.into_iter().map(|r| artifacts::retrieval_from_json(r.crops)).collect::<Result<_>>()?
            } else {
                retrieve_records(&scenes, &store, exp)?
            };
            let prepared = pipeline::prepare_records(&scenes, &gold, &store, sets, exp)?;
            let (trainer, rows) = pipeline::train_model(&cfg, &prepared, !no_text, !no_cond)?;
            let ckpt = checkpoint::save_model(&trainer.model, &prepared.vocab);
            artifacts::write_bytes(&out, &ckpt.to_bytes())?;
            if let Some(log) = log {
                pipeline::write_train_log(&log, &rows)?;
            }
            let row = ragcap_core::experiment::evaluate_cell(&trainer.model, &prepared)?;
            print_json(&pipeline::MetricsReport::new(&row, prepared.test.len()))?;
        }
        Command::Evaluate { hyp, refs, corpus } => {
            let hyps: Vec<Vec<String>> = lines(&hyp)?.iter().map(|l| tokenize(l)).collect();
            let mut references: Vec<Vec<Vec<String>>> = Vec::new();
            for (i, line) in lines(&refs)?.iter().enumerate() {
                let set: Vec<String> = serde_json::from_str(line)
                    .map_err(|e| Error::Data(format!("{}:{}: {e}", refs.display(), i + 1)))?;
                references.push(set.iter().map(|s| tokenize(s)).collect());
            }
            if hyps.len() != references.len() {
                return Err(Error::Data(format!("{} hypotheses but {} reference lines", hyps.len(), references.len())));
            }
            let sentences: Vec<Vec<String>> = match corpus {
                Some(p) => lines(&p)?.iter().map(|l| tokenize(l)).collect(),
                None => references.iter().flatten().cloned().collect(),
            };
            let stats = build_idf_from_sentences(&sentences)?;
            let mut report = BTreeMap::new();
            for n in 1..=4 {
                report.insert(format!("bleu{n}"), corpus_bleu(&hyps, &references, n, Smoothing::None)?);
            }
            let mut total = 0.0;
            for (h, r) in hyps.iter().zip(&references) {
                total += cider(h, r, &stats)?;
            }
            report.insert("cider".to_string(), total / hyps.len().max(1) as f64);
            print_json(&report)?;
        }
        Command::Gradcheck { seeds } => {
            let (mut cond, mut cap) = (0.0f64, 0.0f64);
            for seed in 0..seeds {
                cond = cond.max(conditioning_check(seed)?);
                cap = cap.max(captioner_check(seed)?);
            }
            println!("conditioning max relative error {cond:.3e} (limit {CONDITIONING_TOLERANCE:e})");
            println!("captioner    max relative error {cap:.3e} (limit {CAPTIONER_TOLERANCE:e})");
            if !(cond < CONDITIONING_TOLERANCE && cap < CAPTIONER_TOLERANCE) {
                return Err(Error::Numeric("gradient check exceeded tolerance".into()));
            }
        }
        Command::SynthGen { n, seed, out } => {
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let data = generate_dataset(n, seed, SynthConfig::default())?;
            artifacts::write_scene_files(&out, &data)?;
            artifacts::write_db(&out.join(artifacts::DESCDB), &data.db)?;
            let store = embed_database(&data.db, &SynthEmbedder::default())?;
            artifacts::write_store(&out.join(artifacts::KEYS), &store)?;
            eprintln!("{} scenes, {} descriptions written to {}", data.len(), data.db.len(), out.display());
        }
        Command::Pipeline { config, out, seed } => {
            let mut cfg = match config {
                Some(p) => PipelineConfig::load(&p)?,
                None => PipelineConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
                cfg.experiment.seed = seed;
            }
            let run = run_pipeline(&cfg, &out, &mut |line| eprintln!("{line}"))?;
            println!("{}", run.report.display());
        }
    }
    Ok(())
}
