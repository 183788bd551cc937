//! Synthetic scenes on a 3x3 grid.
//!
//! Each scene holds two objects with a shape and a color. Object feature
//! vectors carry shape and color only; where the objects sit (and so their
//! spatial relation) reaches the model solely through the image side: region
//! embeddings used as retrieval queries and the global image feature.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use serde::{Deserialize, Serialize};

use crate::crops::Region;
use crate::descdb::{build_database, CanonLexicon, DescriptionDb, RawAttribute, RawRelationship};
use crate::embed::{mock_embed, mock_gaussian, normalize_f64, Embedder, EmbeddingVector};
use crate::rng::{derive_seed, fnv1a64, SplitMix64};
use crate::tensor::Matrix;
use crate::{math, Error, Result};

pub const GRID: u8 = 3;
pub const CELL_PX: u32 = 30;
pub const IMAGE_PX: u32 = CELL_PX * GRID as u32;
pub const OBJECTS_PER_SCENE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Blue,
    Green,
    Red,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Cone,
    Cube,
    Cylinder,
    Sphere,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Blue, Color::Green, Color::Red, Color::Yellow];

    pub fn as_str(self) -> &'static str {
        match self {
            Color::Blue => "blue",
            Color::Green => "green",
            Color::Red => "red",
            Color::Yellow => "yellow",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Cone, Shape::Cube, Shape::Cylinder, Shape::Sphere];

    pub fn as_str(self) -> &'static str {
        match self {
            Shape::Cone => "cone",
            Shape::Cube => "cube",
            Shape::Cylinder => "cylinder",
            Shape::Sphere => "sphere",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Predicate {
    #[serde(rename = "left of")]
    LeftOf,
    #[serde(rename = "right of")]
    RightOf,
    #[serde(rename = "above")]
    Above,
    #[serde(rename = "below")]
    Below,
}

impl Predicate {
    pub const ALL: [Predicate; 4] = [Predicate::LeftOf, Predicate::RightOf, Predicate::Above, Predicate::Below];

    pub fn as_str(self) -> &'static str {
        match self {
            Predicate::LeftOf => "left of",
            Predicate::RightOf => "right of",
            Predicate::Above => "above",
            Predicate::Below => "below",
        }
    }

    /// The first caption word, which alone identifies the predicate.
    pub fn head_word(self) -> &'static str {
        self.as_str().split(' ').next().unwrap_or_default()
    }

    /// Horizontal offsets win; `above`/`below` only within one column.
    pub fn between(subject: (u8, u8), object: (u8, u8)) -> Self {
        let ((sr, sc), (or, oc)) = (subject, object);
        match sc.cmp(&oc) {
            core::cmp::Ordering::Less => Predicate::LeftOf,
            core::cmp::Ordering::Greater => Predicate::RightOf,
            core::cmp::Ordering::Equal if sr < or => Predicate::Above,
            core::cmp::Ordering::Equal => Predicate::Below,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub color: Color,
    pub shape: Shape,
    /// `(row, col)` in the grid.
    pub cell: (u8, u8),
}

impl SceneObject {
    pub fn name(&self) -> String {
        format!("{} {}", self.color.as_str(), self.shape.as_str())
    }

    fn cell_region(&self) -> Region {
        Region { x: u32::from(self.cell.1) * CELL_PX, y: u32::from(self.cell.0) * CELL_PX, w: CELL_PX, h: CELL_PX }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub subject: usize,
    pub predicate: Predicate,
    pub object: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    /// Sorted by `(color, shape)`; no two objects share both or a cell.
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

impl Scene {
    /// Relations derived from cells: one per ordered pair `i < j`, with the
    /// earlier object as subject.
    pub fn relations(&self) -> Vec<Relation> {
        let mut out = Vec::new();
        for i in 0..self.objects.len() {
            for j in i + 1..self.objects.len() {
                let predicate = Predicate::between(self.objects[i].cell, self.objects[j].cell);
                out.push(Relation { subject: i, predicate, object: j });
            }
        }
        out
    }

    pub fn relation_text(&self, r: &Relation) -> String {
        format!("{} {} {}", self.objects[r.subject].name(), r.predicate.as_str(), self.objects[r.object].name())
    }

    /// Text payload standing in for image bytes.
    pub fn payload(&self) -> Vec<u8> {
        let mut s = format!("scene {IMAGE_PX} {IMAGE_PX}\n");
        for o in &self.objects {
            s.push_str(&format!("obj {} {} {} {}\n", o.cell.0, o.cell.1, o.color.as_str(), o.shape.as_str()));
        }
        s.into_bytes()
    }

    pub fn parse_payload(bytes: &[u8]) -> Result<Self> {
        let text = core::str::from_utf8(bytes).map_err(|_| Error::Embedder("payload is not UTF-8".into()))?;
        let bad = |line: &str| Error::Embedder(format!("bad payload line {line:?}"));
        let mut lines = text.lines();
        match lines.next() {
            Some(l) if l.starts_with("scene ") => {}
            other => return Err(bad(other.unwrap_or(""))),
        }
        let mut objects = Vec::new();
        for line in lines {
            let parts: Vec<&str> = line.split(' ').collect();
            let [tag, row, col, color, shape] = parts.as_slice() else { return Err(bad(line)) };
            let row: u8 = row.parse().map_err(|_| bad(line))?;
            let col: u8 = col.parse().map_err(|_| bad(line))?;
            if *tag != "obj" || row >= GRID || col >= GRID {
                return Err(bad(line));
            }
            let color = Color::parse(color).ok_or_else(|| bad(line))?;
            let shape = Shape::parse(shape).ok_or_else(|| bad(line))?;
            objects.push(SceneObject { color, shape, cell: (row, col) });
        }
        Ok(Self { objects, seed: 0 })
    }
}

/// Samples a scene: distinct cells, distinct `(color, shape)` pairs.
pub fn sample_scene(seed: u64) -> Scene {
    let mut rng = SplitMix64::new(seed);
    let mut cells: Vec<u8> = (0..GRID * GRID).collect();
    rng.shuffle(&mut cells);
    let mut kinds: Vec<(Color, Shape)> =
        Color::ALL.iter().flat_map(|&c| Shape::ALL.iter().map(move |&s| (c, s))).collect();
    rng.shuffle(&mut kinds);
    let mut objects: Vec<SceneObject> = (0..OBJECTS_PER_SCENE)
        .map(|i| SceneObject { color: kinds[i].0, shape: kinds[i].1, cell: (cells[i] / GRID, cells[i] % GRID) })
        .collect();
    objects.sort_by_key(|o| (o.color, o.shape));
    Scene { objects, seed }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Extra noise dimensions appended to the one-hot object features.
    pub feature_noise_dims: usize,
    pub feature_noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { feature_noise_dims: 8, feature_noise_std: 0.1 }
    }
}

impl SynthConfig {
    pub fn feature_dim(&self) -> usize {
        Shape::ALL.len() + Color::ALL.len() + self.feature_noise_dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub seed: u64,
    pub scenes: Vec<Scene>,
    /// One `objects x feature_dim` matrix per scene.
    pub object_features: Vec<Matrix>,
    pub payloads: Vec<Vec<u8>>,
    /// Gold caption words, e.g. `["red", "cube", "left", "of", "blue", "cone"]`.
    pub captions: Vec<Vec<String>>,
    pub attributes: Vec<RawAttribute>,
    pub relationships: Vec<RawRelationship>,
    pub db: DescriptionDb,
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Caption vocabulary in a fixed order.
    pub fn words() -> Vec<&'static str> {
        let mut w: Vec<&str> = Color::ALL.iter().map(|c| c.as_str()).collect();
        w.extend(Shape::ALL.iter().map(|s| s.as_str()));
        for p in Predicate::ALL {
            for word in p.as_str().split(' ') {
                if !w.contains(&word) {
                    w.push(word);
                }
            }
        }
        w
    }

    /// Index of the predicate's first word within a gold caption.
    pub const RELATION_WORD: usize = 2;

    pub fn gold_predicate(&self, scene: usize) -> Predicate {
        self.scenes[scene].relations()[0].predicate
    }
}

pub fn object_features(scene: &Scene, config: &SynthConfig, seed: u64) -> Matrix {
    let mut m = Matrix::zeros(scene.objects.len(), config.feature_dim());
    let mut rng = SplitMix64::new(seed);
    for (i, o) in scene.objects.iter().enumerate() {
        let row = m.row_mut(i);
        row[o.shape.index()] = 1.0;
        row[Shape::ALL.len() + o.color.index()] = 1.0;
        for v in &mut row[Shape::ALL.len() + Color::ALL.len()..] {
            *v = config.feature_noise_std * rng.next_normal();
        }
    }
    m
}

/// Deterministic dataset of `n_scenes` scenes.
pub fn generate_dataset(n_scenes: usize, seed: u64, config: SynthConfig) -> Result<SynthDataset> {
    if n_scenes == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut data = SynthDataset {
        config,
        seed,
        scenes: Vec::with_capacity(n_scenes),
        object_features: Vec::with_capacity(n_scenes),
        payloads: Vec::with_capacity(n_scenes),
        captions: Vec::with_capacity(n_scenes),
        attributes: Vec::new(),
        relationships: Vec::new(),
        db: DescriptionDb::default(),
    };
    for i in 0..n_scenes {
        let scene_seed = derive_seed(seed, i as u64);
        let scene = sample_scene(scene_seed);
        let image_id = i as i64;
        for (r, o) in scene.objects.iter().enumerate() {
            data.attributes.push(RawAttribute {
                object_name: String::from(o.shape.as_str()),
                attributes: alloc::vec![String::from(o.color.as_str())],
                source_image_id: image_id,
                source_region_id: r as i64,
            });
        }
        let relations = scene.relations();
        for rel in &relations {
            data.relationships.push(RawRelationship {
                subject_name: scene.objects[rel.subject].name(),
                predicate: String::from(rel.predicate.as_str()),
                object_name: scene.objects[rel.object].name(),
                source_image_id: image_id,
            });
        }
        let gold = scene.relation_text(&relations[0]);
        data.captions.push(gold.split(' ').map(String::from).collect());
        data.object_features.push(object_features(&scene, &config, derive_seed(scene_seed, 0xFEA7)));
        data.payloads.push(scene.payload());
        data.scenes.push(scene);
    }
    data.db = build_database(&data.attributes, &data.relationships, &CanonLexicon::empty());
    Ok(data)
}

/// Mock dual encoder for the synthetic world.
///
/// Text embeds compositionally: the normalized sum of per-position word
/// vectors. A region embeds as the normalized sum of the embeddings of the
/// descriptions visible in it (each weighted by how much of the objects'
/// cells the region covers, relations by the product), plus seeded noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthEmbedder {
    pub dim: usize,
    pub seed: u64,
    /// Noise norm relative to the unit content direction in region queries.
    pub query_noise: f64,
    /// Same, for the global image feature.
    pub global_noise: f64,
    /// Weight of relation descriptions in region content.
    pub relation_weight: f64,
}

impl Default for SynthEmbedder {
    fn default() -> Self {
        Self { dim: 64, seed: 0x5EED, query_noise: 1.0, global_noise: 1.0, relation_weight: 1.0 }
    }
}

impl fmt::Display for SynthEmbedder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "synth(dim={}, seed={})", self.dim, self.seed)
    }
}

fn overlap_fraction(cell: Region, region: Region) -> f64 {
    let x0 = cell.x.max(region.x);
    let x1 = (cell.x + cell.w).min(region.x + region.w);
    let y0 = cell.y.max(region.y);
    let y1 = (cell.y + cell.h).min(region.y + region.h);
    if x1 <= x0 || y1 <= y0 {
        return 0.0;
    }
    f64::from((x1 - x0) * (y1 - y0)) / f64::from(cell.w * cell.h)
}

impl SynthEmbedder {
    fn text_raw(&self, text: &str) -> Vec<f64> {
        let mut acc = alloc::vec![0.0; self.dim];
        for (i, word) in text.split_whitespace().enumerate() {
            let e = mock_embed(format!("{i}:{word}").as_bytes(), self.dim, self.seed);
            for (a, &v) in acc.iter_mut().zip(e.as_slice()) {
                *a += f64::from(v);
            }
        }
        acc
    }

    fn text_unit(&self, text: &str) -> Result<Vec<f64>> {
        let raw = self.text_raw(text);
        let n = math::norm2(&raw);
        if n == 0.0 {
            return Err(Error::DegenerateEmbedding);
        }
        Ok(raw.into_iter().map(|x| x / n).collect())
    }

    /// Unit content direction of a region of a parsed scene.
    fn content(&self, scene: &Scene, region: Region) -> Result<Vec<f64>> {
        let mut acc = alloc::vec![0.0; self.dim];
        let weights: Vec<f64> = scene.objects.iter().map(|o| overlap_fraction(o.cell_region(), region)).collect();
        let mut add = |text: &str, w: f64| -> Result<()> {
            if w > 0.0 {
                for (a, e) in acc.iter_mut().zip(self.text_unit(text)?) {
                    *a += w * e;
                }
            }
            Ok(())
        };
        for (o, &w) in scene.objects.iter().zip(&weights) {
            add(&o.name(), w)?;
        }
        for r in scene.relations() {
            add(&scene.relation_text(&r), self.relation_weight * weights[r.subject] * weights[r.object])?;
        }
        let n = math::norm2(&acc);
        if n > 0.0 {
            acc.iter_mut().for_each(|x| *x /= n);
        }
        Ok(acc)
    }

    fn noisy(&self, content: Vec<f64>, noise: f64, key: &[u8]) -> Result<EmbeddingVector> {
        let mut n = mock_gaussian(key, self.dim, self.seed);
        let nn = math::norm2(&n);
        n.iter_mut().for_each(|x| *x /= nn);
        let v: Vec<f64> = content.iter().zip(&n).map(|(c, e)| c + noise * e).collect();
        normalize_f64(&v)
    }

    /// Global image feature `f_x`, with its own noise stream.
    pub fn global_feature(&self, image: &[u8]) -> Result<Vec<f64>> {
        let scene = Scene::parse_payload(image)?;
        let full = Region { x: 0, y: 0, w: IMAGE_PX, h: IMAGE_PX };
        let content = self.content(&scene, full)?;
        let mut key = Vec::from(image);
        key.extend_from_slice(b"#global");
        Ok(self.noisy(content, self.global_noise, &key)?.to_f64())
    }
}

impl Embedder for SynthEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        normalize_f64(&self.text_raw(text))
    }

    fn embed_region(&self, image: &[u8], _width: u32, _height: u32, region: Region) -> Result<EmbeddingVector> {
        let scene = Scene::parse_payload(image)?;
        let content = self.content(&scene, region)?;
        let mut key = Vec::from(image);
        for v in [region.x, region.y, region.w, region.h] {
            key.extend_from_slice(&v.to_le_bytes());
        }
        let key_hash = fnv1a64(&key);
        self.noisy(content, self.query_noise, &key_hash.to_le_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    #[test]
    fn predicates_follow_cells() {
        assert_eq!(Predicate::between((0, 0), (2, 1)), Predicate::LeftOf);
        assert_eq!(Predicate::between((0, 2), (0, 1)), Predicate::RightOf);
        assert_eq!(Predicate::between((0, 1), (2, 1)), Predicate::Above);
        assert_eq!(Predicate::between((2, 1), (1, 1)), Predicate::Below);
    }

    #[test]
    fn scenes_are_well_formed() {
        for s in 0..200 {
            let scene = sample_scene(s);
            assert_eq!(scene.objects.len(), 2);
            let (a, b) = (scene.objects[0], scene.objects[1]);
            assert!(a.cell != b.cell);
            assert!((a.color, a.shape) < (b.color, b.shape));
            assert_eq!(Scene::parse_payload(&scene.payload()).unwrap().objects, scene.objects);
        }
    }

    #[test]
    fn dataset_is_deterministic() {
        let a = generate_dataset(50, 7, SynthConfig::default()).unwrap();
        let b = generate_dataset(50, 7, SynthConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.scenes, generate_dataset(50, 8, SynthConfig::default()).unwrap().scenes);
        assert!(generate_dataset(0, 7, SynthConfig::default()).is_err());
    }

    #[test]
    fn captions_hold_one_relation() {
        let data = generate_dataset(100, 3, SynthConfig::default()).unwrap();
        let vocab = SynthDataset::words();
        for (i, cap) in data.captions.iter().enumerate() {
            let p = data.gold_predicate(i);
            assert_eq!(cap[SynthDataset::RELATION_WORD], p.head_word());
            assert!(cap.iter().all(|w| vocab.contains(&w.as_str())));
            assert_eq!(cap.len(), 5 + usize::from(p.as_str().contains(' ')));
        }
    }

    #[test]
    fn database_matches_enumeration() {
        let data = generate_dataset(300, 11, SynthConfig::default()).unwrap();
        let mut texts = BTreeSet::new();
        for scene in &data.scenes {
            for o in &scene.objects {
                texts.insert(o.name());
            }
            for r in scene.relations() {
                texts.insert(scene.relation_text(&r));
            }
        }
        assert_eq!(data.db.len(), texts.len());
        assert!(data.db.len() <= 16 + 16 * 16 * 4);
    }

    #[test]
    fn features_omit_position() {
        let mut a = sample_scene(1);
        let mut b = a.clone();
        a.objects[0].cell = (0, 0);
        a.objects[1].cell = (0, 2);
        b.objects[0].cell = (0, 2);
        b.objects[1].cell = (0, 0);
        let cfg = SynthConfig { feature_noise_std: 0.0, ..Default::default() };
        assert_eq!(object_features(&a, &cfg, 1), object_features(&b, &cfg, 2));
    }

    #[test]
    fn region_content_tracks_objects() {
        let e = SynthEmbedder { query_noise: 0.0, ..Default::default() };
        let scene = Scene {
            objects: alloc::vec![
                SceneObject { color: Color::Blue, shape: Shape::Cone, cell: (0, 0) },
                SceneObject { color: Color::Red, shape: Shape::Cube, cell: (2, 2) },
            ],
            seed: 0,
        };
        let img = scene.payload();
        let left = Region { x: 0, y: 0, w: 30, h: 30 };
        let q = e.embed_region(&img, 90, 90, left).unwrap().to_f64();
        let t = e.embed_text("blue cone").unwrap().to_f64();
        assert!(math::dot(&q, &t) > 0.999);
        let full = Region { x: 0, y: 0, w: 90, h: 90 };
        let q = e.embed_region(&img, 90, 90, full).unwrap().to_f64();
        let rel = e.embed_text("blue cone left of red cube").unwrap().to_f64();
        let wrong = e.embed_text("blue cone above red cube").unwrap().to_f64();
        assert!(math::dot(&q, &rel) > math::dot(&q, &wrong));
    }
}
