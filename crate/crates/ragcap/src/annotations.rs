//! JSONL annotation streams and the serialized
//! description database.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use ragcap_core::descdb::{CanonLexicon, Description, DescriptionDb, RawAttribute, RawRelationship};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    Strict,
    #[default]
    Lenient,
}

/// A record that could not be parsed, with its 1-based line number.
#[derive(Debug, Error, PartialEq, Eq, Clone)]
#[error("line {line}: {message}")]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parsed<T> {
    pub records: Vec<T>,
    /// Lines skipped in lenient mode.
    pub errors: Vec<LineError>,
}

#[derive(Deserialize)]
struct AttributeLine {
    object: String,
    attributes: Vec<String>,
    image_id: i64,
    region_id: i64,
}

#[derive(Deserialize)]
struct RelationshipLine {
    subject: String,
    predicate: String,
    object: String,
    image_id: i64,
}

fn non_empty(field: &str, value: &str) -> Result<(), String> {
    if value.trim().is_empty() {
        Err(format!("field `{field}` is empty"))
    } else {
        Ok(())
    }
}

fn parse_lines<R, T, F>(reader: R, mode: ParseMode, mut convert: F) -> Result<Parsed<T>, LineError>
where
    R: BufRead,
    F: FnMut(&str) -> Result<T, String>,
{
    let mut parsed = Parsed { records: Vec::new(), errors: Vec::new() };
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let outcome = match line {
            Ok(text) if text.trim().is_empty() => continue,
            Ok(text) => convert(&text),
            Err(e) => Err(e.to_string()),
        };
        match outcome {
            Ok(record) => parsed.records.push(record),
            Err(message) => {
                let err = LineError { line: line_no, message };
                match mode {
                    ParseMode::Strict => return Err(err),
                    ParseMode::Lenient => parsed.errors.push(err),
                }
            }
        }
    }
    Ok(parsed)
}

pub fn parse_attributes<R: BufRead>(reader: R, mode: ParseMode) -> Result<Parsed<RawAttribute>, LineError> {
    parse_lines(reader, mode, |text| {
        let a: AttributeLine = serde_json::from_str(text).map_err(|e| e.to_string())?;
        non_empty("object", &a.object)?;
        Ok(RawAttribute {
            object_name: a.object,
            attributes: a.attributes,
            source_image_id: a.image_id,
            source_region_id: a.region_id,
        })
    })
}

pub fn parse_relationships<R: BufRead>(reader: R, mode: ParseMode) -> Result<Parsed<RawRelationship>, LineError> {
    parse_lines(reader, mode, |text| {
        let r: RelationshipLine = serde_json::from_str(text).map_err(|e| e.to_string())?;
        non_empty("subject", &r.subject)?;
        non_empty("predicate", &r.predicate)?;
        non_empty("object", &r.object)?;
        Ok(RawRelationship {
            subject_name: r.subject,
            predicate: r.predicate,
            object_name: r.object,
            source_image_id: r.image_id,
        })
    })
}

pub fn write_attributes<W: Write>(attrs: &[RawAttribute], mut w: W) -> std::io::Result<()> {
    for a in attrs {
        let line = serde_json::json!({
            "object": a.object_name,
            "attributes": a.attributes,
            "image_id": a.source_image_id,
            "region_id": a.source_region_id,
        });
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn write_relationships<W: Write>(rels: &[RawRelationship], mut w: W) -> std::io::Result<()> {
    for r in rels {
        let line = serde_json::json!({
            "subject": r.subject_name,
            "predicate": r.predicate,
            "object": r.object_name,
            "image_id": r.source_image_id,
        });
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexiconFile {
    pub aliases: BTreeMap<String, String>,
}

pub fn parse_lexicon(text: &str) -> Result<CanonLexicon, serde_json::Error> {
    let file: LexiconFile = serde_json::from_str(text)?;
    Ok(CanonLexicon::new(file.aliases))
}

/// One JSON object per description, in id order.
pub fn write_db<W: Write>(db: &DescriptionDb, mut w: W) -> std::io::Result<()> {
    for d in db.iter() {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn db_to_bytes(db: &DescriptionDb) -> Vec<u8> {
    let mut out = Vec::new();
    write_db(db, &mut out).expect("writing to a Vec cannot fail");
    out
}

pub fn read_db<R: BufRead>(reader: R) -> Result<DescriptionDb, LineError> {
    let parsed = parse_lines(reader, ParseMode::Strict, |text| {
        serde_json::from_str::<Description>(text).map_err(|e| e.to_string())
    })?;
    DescriptionDb::from_descriptions(parsed.records).map_err(|message| LineError { line: 0, message })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attribute_line_maps_fields() {
        let line = r#"{"object":"Cars","attributes":["red"],"image_id":1,"region_id":7}"#;
        let p = parse_attributes(line.as_bytes(), ParseMode::Strict).unwrap();
        assert_eq!(
            p.records,
            vec![RawAttribute {
                object_name: "Cars".into(),
                attributes: vec!["red".into()],
                source_image_id: 1,
                source_region_id: 7
            }]
        );
    }

    #[test]
    fn empty_stream() {
        assert!(parse_attributes(&b""[..], ParseMode::Strict).unwrap().records.is_empty());
        assert!(parse_relationships(&b"\n\n"[..], ParseMode::Strict).unwrap().records.is_empty());
    }

    #[test]
    fn strict_reports_line_number() {
        let text = "{\"subject\":\"man\",\"predicate\":\"on\",\"object\":\"horse\",\"image_id\":1}\n{oops}\n";
        let err = parse_relationships(text.as_bytes(), ParseMode::Strict).unwrap_err();
        assert_eq!(err.line, 2);
        let lenient = parse_relationships(text.as_bytes(), ParseMode::Lenient).unwrap();
        assert_eq!((lenient.records.len(), lenient.errors.len()), (1, 1));
    }

    #[test]
    fn blank_names_are_rejected() {
        let line = r#"{"subject":"  ","predicate":"on","object":"x","image_id":1}"#;
        assert!(parse_relationships(line.as_bytes(), ParseMode::Strict).is_err());
        let line = r#"{"object":"","attributes":[],"image_id":1,"region_id":1}"#;
        assert!(parse_attributes(line.as_bytes(), ParseMode::Strict).is_err());
    }

    #[test]
    fn lexicon_rejects_unknown_keys() {
        assert!(parse_lexicon(r#"{"aliases":{"cars":"car"}}"#).is_ok());
        assert!(parse_lexicon(r#"{"aliases":{},"rules":[]}"#).is_err());
    }
}
