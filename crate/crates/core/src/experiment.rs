//! End-to-end experiments on synthetic scenes: retrieval-augmented inputs,
//! the text/image-conditioning ablation grid and self-critical fine-tuning.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::captioner::{
    AdamConfig, CaptionInputs, Captioner, CaptionerConfig, Trainer, TrainExample, Vocabulary,
};
use crate::conditioning::{ConditioningConfig, Mode};
use crate::crops::{generate_crops, CropConfig, Granularity};
use crate::embed::{Embedder, EmbeddingStore};
use crate::metrics::{build_idf, cider, corpus_bleu, NGramStats, Smoothing};
use crate::retrieval::{batch_retrieve, RetrievalSet};
use crate::rng::{derive_seed, SplitMix64};
use crate::synth::{SynthDataset, SynthEmbedder, IMAGE_PX};
use crate::tensor::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub captioner: CaptionerConfig,
    pub conditioning: ConditioningConfig,
    pub adam: AdamConfig,
    pub embedder: SynthEmbedder,
    pub crops: CropConfig,
    pub k: usize,
    pub train_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            captioner: CaptionerConfig::default(),
            conditioning: ConditioningConfig::default(),
            adam: AdamConfig::default(),
            embedder: SynthEmbedder::default(),
            crops: CropConfig::default(),
            k: crate::retrieval::DEFAULT_K,
            train_fraction: 0.8,
            epochs: 4,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Embeds every database description into a store keyed by description id.
pub fn embed_database<E: Embedder + ?Sized>(db: &crate::descdb::DescriptionDb, embedder: &E) -> Result<EmbeddingStore> {
    let mut store = EmbeddingStore::new(embedder.dim());
    for d in db.iter() {
        store.push(u64::from(d.id), &embedder.embed_text(&d.text)?)?;
    }
    Ok(store)
}

/// Turns a retrieval set into per-granularity text token matrices.
pub fn text_inputs(set: &RetrievalSet, store: &EmbeddingStore) -> Result<[(Matrix, Vec<usize>); 3]> {
    let row_of: alloc::collections::BTreeMap<u64, usize> =
        store.ids().iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let dim = store.dim();
    let mut out: [(Vec<f64>, Vec<usize>); 3] = Default::default();
    for (crop, hits) in &set.per_crop {
        let g = Granularity::ALL.iter().position(|&g| g == crop.granularity).unwrap_or(0);
        for hit in hits {
            let row = *row_of.get(&hit.description_id).ok_or(Error::EmptyStore)?;
            out[g].0.extend(store.row(row).iter().map(|&x| f64::from(x)));
            out[g].1.push(crop.flat_index());
        }
    }
    let mk = |(data, crops): (Vec<f64>, Vec<usize>)| -> Result<(Matrix, Vec<usize>)> {
        Ok((Matrix::from_vec(crops.len(), dim, data)?, crops))
    };
    let [a, b, c] = out;
    Ok([mk(a)?, mk(b)?, mk(c)?])
}

/// Model-ready synthetic data.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocab: Vocabulary,
    pub examples: Vec<TrainExample>,
    pub references: Vec<Vec<String>>,
    pub retrievals: Vec<RetrievalSet>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// CIDEr document frequencies over the training references.
    pub stats: NGramStats,
}

/// One model-ready example from a scene's features, image payload and
/// retrieval set.
#[allow(clippy::too_many_arguments)]
pub fn build_example(
    objects: Matrix,
    image: &[u8],
    caption: &[String],
    set: &RetrievalSet,
    store: &EmbeddingStore,
    embedder: &SynthEmbedder,
    crops: &CropConfig,
    vocab: &Vocabulary,
) -> Result<TrainExample> {
    let text = text_inputs(set, store)?;
    let nine = generate_crops(IMAGE_PX, IMAGE_PX, Granularity::Nine, crops)?;
    let mut grid = Vec::with_capacity(nine.len() * embedder.dim);
    for (_, region) in &nine {
        grid.extend(embedder.embed_region(image, IMAGE_PX, IMAGE_PX, *region)?.to_f64());
    }
    let inputs = CaptionInputs {
        objects,
        f_x: embedder.global_feature(image)?,
        text,
        grid: Some(Matrix::from_vec(nine.len(), embedder.dim, grid)?),
    };
    Ok(TrainExample { inputs, caption: vocab.encode(caption)? })
}

/// Seeded train/test split; both halves are returned sorted.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::new(derive_seed(seed, 0x5B11)).shuffle(&mut order);
    let n_train = ((n as f64) * train_fraction) as usize;
    let n_train = n_train.clamp(1, n.saturating_sub(1).max(1)).min(n);
    let (mut train, mut test) = (order[..n_train].to_vec(), order[n_train..].to_vec());
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Splits examples and builds CIDEr statistics over the training references.
pub fn assemble(
    vocab: Vocabulary,
    examples: Vec<TrainExample>,
    references: Vec<Vec<String>>,
    retrievals: Vec<RetrievalSet>,
    cfg: &ExperimentConfig,
) -> Result<Prepared> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (train, test) = split_indices(examples.len(), cfg.train_fraction, cfg.seed);
    let corpus: Vec<Vec<Vec<String>>> = train.iter().map(|&i| alloc::vec![references[i].clone()]).collect();
    let stats = build_idf(&corpus)?;
    Ok(Prepared { vocab, examples, references, retrievals, train, test, stats })
}

/// Retrieves for every scene and assembles the experiment data.
pub fn prepare(data: &SynthDataset, cfg: &ExperimentConfig) -> Result<Prepared> {
    let embedder = &cfg.embedder;
    let store = embed_database(&data.db, embedder)?;
    let vocab = Vocabulary::new(SynthDataset::words());
    let mut examples = Vec::with_capacity(data.len());
    let mut retrievals = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let image = &data.payloads[i];
        let set = batch_retrieve(image, IMAGE_PX, IMAGE_PX, embedder, &store, cfg.k, &cfg.crops)?;
        let objects = data.object_features[i].clone();
        examples.push(build_example(objects, image, &data.captions[i], &set, &store, embedder, &cfg.crops, &vocab)?);
        retrievals.push(set);
    }
    assemble(vocab, examples, data.captions.clone(), retrievals, cfg)
}

/// Builds a fresh captioner for one ablation cell.
pub fn new_model(cfg: &ExperimentConfig, data: &Prepared, use_text: bool, use_image: bool, seed: u64) -> Result<Captioner> {
    let first = &data.examples[0].inputs;
    let captioner = CaptionerConfig { vocab_size: data.vocab.len(), ..cfg.captioner };
    let conditioning = ConditioningConfig {
        d_o: first.objects.cols(),
        d_t: cfg.embedder.dim,
        d_x: first.f_x.len(),
        use_image,
        ..cfg.conditioning
    };
    Captioner::new(captioner, conditioning, use_text, &mut SplitMix64::new(seed))
}

/// Shuffled minibatch cross-entropy training over the training split.
/// `log` receives `(step, loss)` after every update; the mean loss of each
/// epoch is returned.
pub fn train_xent(
    trainer: &mut Trainer,
    data: &Prepared,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    mut log: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    let mut rng = SplitMix64::new(seed);
    let mut order = data.train.clone();
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(batch_size.max(1)).enumerate() {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &data.examples[i]).collect();
            let loss = trainer.xent_step(&batch, derive_seed(seed, ((epoch as u64) << 32) | b as u64))?;
            log(trainer.adam.steps() as usize - 1, loss);
            total += loss;
            batches += 1;
        }
        curve.push(total / batches.max(1) as f64);
    }
    Ok(curve)
}

/// Teacher-forced argmax accuracy at the predicate word of the gold caption.
pub fn relation_accuracy(model: &Captioner, data: &Prepared, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let position = SynthDataset::RELATION_WORD;
    let mut correct = 0usize;
    for &i in indices {
        let ex = &data.examples[i];
        let predicted = model.teacher_forced_argmax(ex)?;
        if predicted[position] == ex.caption[position + 1] {
            correct += 1;
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Greedy-decoded captions (words) for `indices`.
pub fn greedy_captions(model: &Captioner, data: &Prepared, indices: &[usize]) -> Result<Vec<Vec<String>>> {
    let budget = model.config.max_len - 1;
    indices
        .iter()
        .map(|&i| Ok(data.vocab.decode(&model.greedy_decode(&data.examples[i].inputs, budget)?)))
        .collect()
}

/// Mean CIDEr of greedy captions; empty captions score 0.
pub fn mean_greedy_cider(model: &Captioner, data: &Prepared, indices: &[usize]) -> Result<f64> {
    let caps = greedy_captions(model, data, indices)?;
    let mut total = 0.0;
    for (cap, &i) in caps.iter().zip(indices) {
        total += caption_cider(cap, &data.references[i], &data.stats)?;
    }
    Ok(total / indices.len().max(1) as f64)
}

fn caption_cider(cap: &[String], reference: &[String], stats: &NGramStats) -> Result<f64> {
    if cap.is_empty() {
        return Ok(0.0);
    }
    cider(cap, core::slice::from_ref(&reference.to_vec()), stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub use_text: bool,
    pub use_image: bool,
    pub relation_accuracy: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub cider: f64,
    pub test_loss: f64,
}

impl AblationRow {
    pub fn label(&self) -> &'static str {
        match (self.use_text, self.use_image) {
            (false, false) => "baseline",
            (true, false) => "text",
            (false, true) => "cond",
            (true, true) => "text+cond",
        }
    }
}

/// The four ablation cells in the order baseline, text, cond, text+cond.
pub const ABLATION_GRID: [(bool, bool); 4] = [(false, false), (true, false), (false, true), (true, true)];

/// Trains and evaluates one ablation cell.
pub fn run_cell(cfg: &ExperimentConfig, data: &Prepared, use_text: bool, use_image: bool) -> Result<(Trainer, AblationRow)> {
    let mut trainer = train_cell(cfg, data, use_text, use_image, |_, _| {})?;
    let row = evaluate_cell(&trainer.model, data)?;
    trainer.adam = crate::captioner::Adam::new(trainer.adam.config, trainer.model.params());
    Ok((trainer, row))
}

/// Builds and cross-entropy trains the model of one ablation cell.
pub fn train_cell(
    cfg: &ExperimentConfig,
    data: &Prepared,
    use_text: bool,
    use_image: bool,
    log: impl FnMut(usize, f64),
) -> Result<Trainer> {
    let model = new_model(cfg, data, use_text, use_image, derive_seed(cfg.seed, 0x30DE1))?;
    let mut trainer = Trainer::new(model, cfg.adam);
    train_xent(&mut trainer, data, cfg.epochs, cfg.batch_size, derive_seed(cfg.seed, 0x7EA1), log)?;
    Ok(trainer)
}

/// Held-out metrics of a trained model.
pub fn evaluate_cell(model: &Captioner, data: &Prepared) -> Result<AblationRow> {
    let (use_text, use_image) = (model.use_text, model.cond_config.use_image);
    let relation_accuracy = relation_accuracy(model, data, &data.test)?;
    let caps = greedy_captions(model, data, &data.test)?;
    let refs: Vec<Vec<Vec<String>>> = data.test.iter().map(|&i| alloc::vec![data.references[i].clone()]).collect();
    let mut bleu = [0.0; 4];
    for (n, b) in bleu.iter_mut().enumerate() {
        *b = corpus_bleu(&caps, &refs, n + 1, Smoothing::None)?;
    }
    let mut cider_total = 0.0;
    for (cap, &i) in caps.iter().zip(&data.test) {
        cider_total += caption_cider(cap, &data.references[i], &data.stats)?;
    }
    let row = AblationRow {
        use_text,
        use_image,
        relation_accuracy,
        bleu1: bleu[0],
        bleu2: bleu[1],
        bleu3: bleu[2],
        bleu4: bleu[3],
        cider: cider_total / data.test.len().max(1) as f64,
        test_loss: eval_loss(model, data, &data.test)?,
    };
    Ok(row)
}

pub fn run_ablation(cfg: &ExperimentConfig, data: &Prepared) -> Result<Vec<AblationRow>> {
    ABLATION_GRID.iter().map(|&(t, i)| run_cell(cfg, data, t, i).map(|(_, row)| row)).collect()
}

/// Greedy CIDEr on the test split before and after self-critical training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScstReport {
    pub cider_before: f64,
    pub cider_after: f64,
    pub steps: usize,
}

/// Self-critical fine-tuning with CIDEr reward on random training batches.
/// `log` receives `(step, loss, mean sampled reward)` after every step.
pub fn run_scst(
    trainer: &mut Trainer,
    data: &Prepared,
    steps: usize,
    batch_size: usize,
    seed: u64,
    mut log: impl FnMut(usize, f64, f64),
) -> Result<ScstReport> {
    let cider_before = mean_greedy_cider(&trainer.model, data, &data.test)?;
    let budget = trainer.model.config.max_len - 1;
    let mut rng = SplitMix64::new(seed);
    let vocab = &data.vocab;
    let reward = |i: usize, ids: &[usize]| -> f64 {
        caption_cider(&vocab.decode(ids), &data.references[i], &data.stats).unwrap_or(0.0)
    };
    for step in 0..steps {
        let batch: Vec<(usize, &TrainExample)> = (0..batch_size.max(1))
            .map(|_| {
                let i = data.train[rng.below(data.train.len())];
                (i, &data.examples[i])
            })
            .collect();
        let stats = trainer.scst_step(&batch, budget, derive_seed(seed, step as u64), reward)?;
        log(step, stats.loss, stats.sample_reward);
    }
    let cider_after = mean_greedy_cider(&trainer.model, data, &data.test)?;
    Ok(ScstReport { cider_before, cider_after, steps })
}

/// Mean teacher-forced loss over `indices` in eval mode.
pub fn eval_loss(model: &Captioner, data: &Prepared, indices: &[usize]) -> Result<f64> {
    let batch: Vec<&TrainExample> = indices.iter().map(|&i| &data.examples[i]).collect();
    model.xent_loss_and_grad(&batch, Mode::Eval, 0).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SynthConfig};

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            captioner: CaptionerConfig { d: 16, layers: 1, heads: 2, d_ff: 32, max_len: 8, vocab_size: 0 },
            conditioning: ConditioningConfig { d: 16, ..Default::default() },
            embedder: SynthEmbedder { dim: 16, ..Default::default() },
            k: 2,
            epochs: 1,
            batch_size: 8,
            ..Default::default()
        }
    }

    #[test]
    fn prepared_shapes() {
        let cfg = small();
        let data = generate_dataset(20, 1, SynthConfig::default()).unwrap();
        let p = prepare(&data, &cfg).unwrap();
        assert_eq!(p.train.len() + p.test.len(), 20);
        assert_eq!(p.train.len(), 16);
        let ex = &p.examples[0].inputs;
        assert_eq!(ex.text[0].0.rows(), 2);
        assert_eq!(ex.text[1].0.rows(), 10);
        assert_eq!(ex.text[2].0.rows(), 18);
        assert_eq!(ex.text[2].1[0], 6);
        assert!(p.retrievals.iter().all(|r| r.total_hits() == 30));
    }

    #[test]
    fn ablation_runs_deterministically() {
        let cfg = small();
        let data = generate_dataset(24, 2, SynthConfig::default()).unwrap();
        let p = prepare(&data, &cfg).unwrap();
        let a = run_ablation(&cfg, &p).unwrap();
        assert_eq!(a, run_ablation(&cfg, &p).unwrap());
        assert_eq!(a.iter().map(AblationRow::label).collect::<Vec<_>>(), ["baseline", "text", "cond", "text+cond"]);
        assert!(a.iter().all(|r| (0.0..=1.0).contains(&r.relation_accuracy)));
    }
}
