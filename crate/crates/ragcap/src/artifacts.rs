//! On-disk artifacts of the synthetic world and of retrieval.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ragcap_core::crops::{CropId, Granularity};
use ragcap_core::descdb::DescriptionDb;
use ragcap_core::embed::EmbeddingStore;
use ragcap_core::retrieval::{RetrievalHit, RetrievalSet};
use ragcap_core::synth::{Scene, SceneObject, SynthDataset};
use ragcap_core::tensor::Matrix;
use serde::{Deserialize, Serialize};

use crate::annotations::{self, write_attributes, write_relationships};
use crate::error::{Error, Result};
use crate::xemb;

pub const ATTRIBUTES: &str = "attributes.jsonl";
pub const RELATIONSHIPS: &str = "relationships.jsonl";
pub const SCENES: &str = "scenes.jsonl";
pub const GOLD: &str = "gold.jsonl";
pub const DESCDB: &str = "descdb.jsonl";
pub const KEYS: &str = "keys.xemb";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub index: usize,
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    /// Object feature rows, one per object.
    pub features: Vec<Vec<f64>>,
}

impl SceneRecord {
    pub fn scene(&self) -> Scene {
        Scene { objects: self.objects.clone(), seed: self.seed }
    }

    pub fn feature_matrix(&self) -> Result<Matrix> {
        let cols = self.features.first().map_or(0, Vec::len);
        if self.features.iter().any(|r| r.len() != cols) {
            return Err(Error::Data(format!("scene {}: ragged feature rows", self.index)));
        }
        Ok(Matrix::from_vec(self.features.len(), cols, self.features.concat())?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldRecord {
    pub index: usize,
    pub caption: String,
}

pub fn create_file(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

pub fn open_file(path: &Path) -> Result<BufReader<fs::File>> {
    Ok(BufReader::new(fs::File::open(path).map_err(|e| Error::io(path, e))?))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = create_file(path)?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = create_file(path)?;
    for item in items {
        serde_json::to_writer(&mut f, item).map_err(|e| Error::json(path, e))?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in open_file(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_db(path: &Path, db: &DescriptionDb) -> Result<()> {
    write_bytes(path, &annotations::db_to_bytes(db))
}

pub fn read_db(path: &Path) -> Result<DescriptionDb> {
    annotations::read_db(open_file(path)?).map_err(|source| Error::Annotation { path: path.into(), source })
}

pub fn write_store(path: &Path, store: &EmbeddingStore) -> Result<()> {
    write_bytes(path, &xemb::to_bytes(store))
}

pub fn read_store(path: &Path) -> Result<EmbeddingStore> {
    xemb::from_bytes(&read_bytes(path)?).map_err(|source| Error::Xemb { path: path.into(), source })
}

pub fn scene_records(data: &SynthDataset) -> Vec<SceneRecord> {
    data.scenes
        .iter()
        .zip(&data.object_features)
        .enumerate()
        .map(|(index, (scene, f))| SceneRecord {
            index,
            seed: scene.seed,
            objects: scene.objects.clone(),
            features: (0..f.rows()).map(|r| f.row(r).to_vec()).collect(),
        })
        .collect()
}

pub fn gold_records(data: &SynthDataset) -> Vec<GoldRecord> {
    data.captions.iter().enumerate().map(|(index, c)| GoldRecord { index, caption: c.join(" ") }).collect()
}

/// Writes a dataset's annotation and scene files.
pub fn write_scene_files(dir: &Path, data: &SynthDataset) -> Result<()> {
    let path = dir.join(ATTRIBUTES);
    write_attributes(&data.attributes, create_file(&path)?).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(RELATIONSHIPS);
    write_relationships(&data.relationships, create_file(&path)?).map_err(|e| Error::io(&path, e))?;
    write_jsonl(&dir.join(SCENES), &scene_records(data))?;
    write_jsonl(&dir.join(GOLD), &gold_records(data))
}

pub fn read_scenes(dir: &Path) -> Result<(Vec<SceneRecord>, Vec<GoldRecord>)> {
    let scenes: Vec<SceneRecord> = read_jsonl(&dir.join(SCENES))?;
    let gold: Vec<GoldRecord> = read_jsonl(&dir.join(GOLD))?;
    if scenes.len() != gold.len() || scenes.iter().zip(&gold).enumerate().any(|(i, (s, g))| s.index != i || g.index != i) {
        return Err(Error::Data(format!("{}: scenes and gold captions are not aligned", dir.display())));
    }
    Ok((scenes, gold))
}

/// `"{granularity}/{position}" -> hits`, keys sorted.
pub fn retrieval_json(set: &RetrievalSet) -> BTreeMap<String, Vec<RetrievalHit>> {
    set.per_crop.iter().map(|(crop, hits)| (crop.to_string(), hits.clone())).collect()
}

pub fn retrieval_from_json(map: BTreeMap<String, Vec<RetrievalHit>>) -> Result<RetrievalSet> {
    let mut per_crop = Vec::with_capacity(map.len());
    let mut k = 0;
    for (key, hits) in map {
        let crop = key
            .split_once('/')
            .and_then(|(g, p)| CropId::new(Granularity::parse(g)?, p.parse().ok()?))
            .ok_or_else(|| Error::Data(format!("bad crop key {key:?}")))?;
        k = k.max(hits.len());
        per_crop.push((crop, hits));
    }
    per_crop.sort_by_key(|(c, _)| c.flat_index());
    Ok(RetrievalSet { k, per_crop })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalRecord {
    pub index: usize,
    pub crops: BTreeMap<String, Vec<RetrievalHit>>,
}
