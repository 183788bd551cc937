//! Description database: canonicalized, deduplicated "attribute object" and
//! "subject predicate object" texts built from scene-graph annotations.
//!
//! Object names are mapped to a canonical form through a [`CanonLexicon`], a
//! user-supplied alias table plus one deterministic fallback rule (plural
//! stripping). Descriptions are rendered with plain space-joined templates
//! and assigned dense ids in ascending text order, so the database does not
//! depend on the order of its input records.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// One attribute annotation: an object and the attributes attached to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawAttribute {
    pub object_name: String,
    pub attributes: Vec<String>,
    pub source_image_id: i64,
    pub source_region_id: i64,
}

/// One relationship annotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRelationship {
    pub subject_name: String,
    pub predicate: String,
    pub object_name: String,
    pub source_image_id: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptionKind {
    Attribute,
    Relationship,
}

/// Where a description came from: `(image_id, record_id)`.
///
/// For attributes `record_id` is the region id; for relationships it is the
/// record's 0-based position in the relationship input.
pub type Provenance = (i64, i64);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Description {
    pub id: u32,
    pub text: String,
    pub kind: DescriptionKind,
    pub provenance: Vec<Provenance>,
}

/// Lowercases, maps every non-alphanumeric character (and any uppercase
/// character without a lowercase form) to a space, trims and collapses runs
/// of whitespace.
pub fn normalize_text(s: &str) -> String {
    let lowered = s.to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    let mut pending_space = false;
    for c in lowered.chars() {
        if c.is_alphanumeric() && !c.is_uppercase() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        } else {
            pending_space = true;
        }
    }
    out
}

/// Alias table standing in for synset lookup.
///
/// Keys and values are normalized on construction and every alias value is
/// resolved to a fixed point, which makes [`canonicalize`] idempotent.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CanonLexicon {
    aliases: BTreeMap<String, String>,
    known: BTreeSet<String>,
}

impl CanonLexicon {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new<I, K, V>(aliases: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut raw = BTreeMap::new();
        for (k, v) in aliases {
            let k = normalize_text(k.as_ref());
            let v = normalize_text(v.as_ref());
            if !k.is_empty() && !v.is_empty() {
                raw.insert(k, v);
            }
        }
        let known: BTreeSet<String> = raw.keys().chain(raw.values()).cloned().collect();
        let mut lex = Self { aliases: raw, known };

        // Resolve each alias chain to its terminal form. A chain that loops
        // back on itself settles on the smallest member of the loop, which
        // then maps to itself.
        let keys: Vec<String> = lex.aliases.keys().cloned().collect();
        for key in keys {
            let mut trail: Vec<String> = Vec::new();
            let mut cur = key.clone();
            let terminal = loop {
                if let Some(pos) = trail.iter().position(|t| *t == cur) {
                    let min = trail[pos..].iter().min().cloned().unwrap_or(cur);
                    lex.aliases.insert(min.clone(), min.clone());
                    break min;
                }
                trail.push(cur.clone());
                match lex.step(&cur) {
                    Some(next) if next != cur => cur = next,
                    _ => break cur,
                }
            };
            for t in trail {
                if lex.aliases.contains_key(&t) {
                    lex.aliases.insert(t, terminal.clone());
                }
            }
        }
        lex
    }

    pub fn aliases(&self) -> &BTreeMap<String, String> {
        &self.aliases
    }

    /// One rewriting step: alias lookup first, then plural stripping.
    fn step(&self, s: &str) -> Option<String> {
        if let Some(v) = self.aliases.get(s) {
            return Some(v.clone());
        }
        self.depluralize(s)
    }

    /// Strips a trailing "s" only when the singular form is a lexicon key or
    /// canonical value.
    fn depluralize(&self, s: &str) -> Option<String> {
        let stem = s.strip_suffix('s')?;
        if !stem.is_empty() && self.known.contains(stem) {
            Some(String::from(stem))
        } else {
            None
        }
    }

    fn resolve(&self, mut s: String) -> String {
        // Each step either hits a fixed-point alias or shortens the string,
        // so this terminates; the bound guards against malformed tables.
        for _ in 0..=s.len() + 1 {
            match self.step(&s) {
                Some(next) if next != s => s = next,
                _ => break,
            }
        }
        s
    }
}

/// Maps a surface name to its canonical form. Total and idempotent.
pub fn canonicalize(name: &str, lex: &CanonLexicon) -> String {
    lex.resolve(normalize_text(name))
}

/// Either kind of raw annotation record.
#[derive(Debug, Clone, Copy)]
pub enum RawRecord<'a> {
    Attribute(&'a RawAttribute),
    Relationship(&'a RawRelationship),
}

/// Renders a raw record into description texts.
///
/// Attributes produce `"{attribute} {object}"` per attribute; relationships
/// produce one `"{subject} {predicate} {object}"`. Object and subject names
/// are canonicalized, attributes and predicates are only normalized.
/// Attributes that normalize to nothing are dropped.
pub fn render(raw: RawRecord<'_>, lex: &CanonLexicon) -> Vec<String> {
    match raw {
        RawRecord::Attribute(a) => {
            let object = canonicalize(&a.object_name, lex);
            if object.is_empty() {
                return Vec::new();
            }
            a.attributes
                .iter()
                .map(|attr| normalize_text(attr))
                .filter(|attr| !attr.is_empty())
                .map(|attr| join_words(&[&attr, &object]))
                .collect()
        }
        RawRecord::Relationship(r) => {
            let subject = canonicalize(&r.subject_name, lex);
            let predicate = normalize_text(&r.predicate);
            let object = canonicalize(&r.object_name, lex);
            if subject.is_empty() || predicate.is_empty() || object.is_empty() {
                return Vec::new();
            }
            alloc::vec![join_words(&[&subject, &predicate, &object])]
        }
    }
}

fn join_words(parts: &[&str]) -> String {
    let mut out = String::new();
    for (i, p) in parts.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(p);
    }
    out
}

/// Immutable, id-ordered description database.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionDb {
    descriptions: Vec<Description>,
}

impl DescriptionDb {
    /// Wraps already-built descriptions, re-checking the id/order law.
    pub fn from_descriptions(descriptions: Vec<Description>) -> Result<Self, String> {
        for (i, d) in descriptions.iter().enumerate() {
            if d.id as usize != i {
                return Err(alloc::format!("description at position {i} has id {}", d.id));
            }
            if i > 0 {
                let prev = &descriptions[i - 1];
                if (prev.text.as_str(), prev.kind) >= (d.text.as_str(), d.kind) {
                    return Err(alloc::format!("descriptions {} and {} are out of order", i - 1, i));
                }
            }
        }
        Ok(Self { descriptions })
    }

    pub fn len(&self) -> usize {
        self.descriptions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptions.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&Description> {
        self.descriptions.get(id as usize)
    }

    pub fn iter(&self) -> core::slice::Iter<'_, Description> {
        self.descriptions.iter()
    }

    pub fn descriptions(&self) -> &[Description] {
        &self.descriptions
    }

    /// Looks up a description by exact text and kind.
    pub fn find(&self, text: &str, kind: DescriptionKind) -> Option<&Description> {
        self.descriptions
            .binary_search_by(|d| (d.text.as_str(), d.kind).cmp(&(text, kind)))
            .ok()
            .map(|i| &self.descriptions[i])
    }
}

/// Renders every record and merges exact duplicates; ids follow sorted
/// text. Identity is `(text, kind)`: an attribute and a relationship that
/// happen to render the same text stay separate entries.
pub fn build_database(
    attrs: &[RawAttribute],
    rels: &[RawRelationship],
    lex: &CanonLexicon,
) -> DescriptionDb {
    let mut merged: BTreeMap<(String, DescriptionKind), Vec<Provenance>> = BTreeMap::new();
    for a in attrs {
        for text in render(RawRecord::Attribute(a), lex) {
            merged
                .entry((text, DescriptionKind::Attribute))
                .or_default()
                .push((a.source_image_id, a.source_region_id));
        }
    }
    for (ordinal, r) in rels.iter().enumerate() {
        for text in render(RawRecord::Relationship(r), lex) {
            merged
                .entry((text, DescriptionKind::Relationship))
                .or_default()
                .push((r.source_image_id, ordinal as i64));
        }
    }
    let descriptions = merged
        .into_iter()
        .enumerate()
        .map(|(id, ((text, kind), mut provenance))| {
            provenance.sort_unstable();
            Description { id: id as u32, text, kind, provenance }
        })
        .collect();
    DescriptionDb { descriptions }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn attr(object: &str, attrs: &[&str], image: i64, region: i64) -> RawAttribute {
        RawAttribute {
            object_name: object.to_string(),
            attributes: attrs.iter().map(|s| s.to_string()).collect(),
            source_image_id: image,
            source_region_id: region,
        }
    }

    fn rel(s: &str, p: &str, o: &str, image: i64) -> RawRelationship {
        RawRelationship {
            subject_name: s.to_string(),
            predicate: p.to_string(),
            object_name: o.to_string(),
            source_image_id: image,
        }
    }

    #[test]
    fn canonicalize_alias_hit_after_normalization() {
        let lex = CanonLexicon::new([("cars", "car")]);
        assert_eq!(canonicalize("  Cars ", &lex), "car");
    }

    #[test]
    fn canonicalize_identity_on_empty_lexicon() {
        assert_eq!(canonicalize("blue", &CanonLexicon::empty()), "blue");
        // No singular form in the lexicon, so the plural survives.
        assert_eq!(canonicalize("glasses", &CanonLexicon::empty()), "glasses");
    }

    #[test]
    fn canonicalize_strips_plural_only_for_known_singular() {
        let lex = CanonLexicon::new([("stoplight", "traffic light")]);
        assert_eq!(canonicalize("Traffic   Lights", &lex), "traffic light");
        assert_eq!(canonicalize("stoplights", &lex), "traffic light");
        assert_eq!(canonicalize("bus", &lex), "bus");
    }

    #[test]
    fn canonicalize_resolves_chains_and_cycles() {
        let lex = CanonLexicon::new([("automobile", "auto"), ("auto", "car")]);
        assert_eq!(canonicalize("automobile", &lex), "car");
        let cyc = CanonLexicon::new([("a", "b"), ("b", "a")]);
        assert_eq!(canonicalize("a", &cyc), canonicalize("b", &cyc));
        let c = canonicalize("a", &cyc);
        assert_eq!(canonicalize(&c, &cyc), c);
    }

    #[test]
    fn normalize_drops_punctuation() {
        assert_eq!(normalize_text("  T-Shirt,  Blue!! "), "t shirt blue");
        assert_eq!(normalize_text(" \t\n"), "");
    }

    #[test]
    fn render_templates() {
        let lex = CanonLexicon::empty();
        let a = attr("car", &["red", "shiny"], 1, 1);
        assert_eq!(render(RawRecord::Attribute(&a), &lex), vec!["red car", "shiny car"]);
        let r = rel("man", "riding", "horse", 1);
        assert_eq!(render(RawRecord::Relationship(&r), &lex), vec!["man riding horse"]);
        let e = attr("car", &[], 1, 1);
        assert!(render(RawRecord::Attribute(&e), &lex).is_empty());
    }

    #[test]
    fn render_normalizes_predicate_but_does_not_alias_it() {
        let lex = CanonLexicon::new([("on", "upon"), ("men", "man")]);
        let r = rel("Men", "  Sitting   ON ", "bench", 3);
        assert_eq!(render(RawRecord::Relationship(&r), &lex), vec!["man sitting on bench"]);
    }

    #[test]
    fn build_merges_duplicates_and_orders_ids() {
        let lex = CanonLexicon::empty();
        let attrs = vec![attr("car", &["red"], 1, 7), attr("car", &["red", "old"], 2, 9)];
        let rels = vec![rel("man", "riding", "horse", 4)];
        let db = build_database(&attrs, &rels, &lex);
        let texts: Vec<&str> = db.iter().map(|d| d.text.as_str()).collect();
        assert_eq!(texts, vec!["man riding horse", "old car", "red car"]);
        let red = db.find("red car", DescriptionKind::Attribute).unwrap();
        assert_eq!(red.id, 2);
        assert_eq!(red.provenance, vec![(1, 7), (2, 9)]);
        assert_eq!(db.find("man riding horse", DescriptionKind::Relationship).unwrap().provenance, vec![(4, 0)]);
    }

    #[test]
    fn build_empty() {
        let db = build_database(&[], &[], &CanonLexicon::empty());
        assert_eq!(db.len(), 0);
    }

    #[test]
    fn same_text_different_kind_kept_apart() {
        let lex = CanonLexicon::empty();
        let attrs = vec![attr("horse", &["man riding"], 1, 1)];
        let rels = vec![rel("man", "riding", "horse", 1)];
        let db = build_database(&attrs, &rels, &lex);
        assert_eq!(db.len(), 2);
        assert_eq!(db.get(0).unwrap().kind, DescriptionKind::Attribute);
        assert_eq!(db.get(1).unwrap().kind, DescriptionKind::Relationship);
        assert!(DescriptionDb::from_descriptions(db.descriptions().to_vec()).is_ok());
    }
}
