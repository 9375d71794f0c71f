//! JSON-lines manifests: one object per line with `id`, `label`, `source`
//! and `vector`. An optional `ref` carries an opaque external reference
//! (file path or URL) for case stores.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catalog::LabelCatalog;
use crate::embedding::normalize;
use crate::error::{with_path, Error, Result};
use crate::library::{LibrarySnapshot, Provenance, ReferenceItem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    pub label: Option<String>,
    #[serde(default)]
    pub source: String,
    pub vector: Vec<f32>,
    #[serde(default, rename = "ref", skip_serializing_if = "Option::is_none")]
    pub external_ref: Option<String>,
}

impl ManifestRecord {
    pub fn new(id: u64, label: Option<&str>, source: &str, vector: Vec<f32>) -> Self {
        Self {
            id: Some(id),
            label: label.map(str::to_string),
            source: source.to_string(),
            vector,
            external_ref: None,
        }
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(rec) = parse_line(i + 1, line)? {
            out.push(rec);
        }
    }
    Ok(out)
}

fn parse_line(line_no: usize, line: &str) -> Result<Option<ManifestRecord>> {
    let line = line.trim();
    if line.is_empty() {
        return Ok(None);
    }
    serde_json::from_str(line)
        .map(Some)
        .map_err(|e| Error::Manifest { line: line_no, message: e.to_string() })
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path).map_err(with_path(path))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        if let Some(rec) = parse_line(i + 1, &line?)? {
            out.push(rec);
        }
    }
    Ok(out)
}

pub fn write_manifest(records: &[ManifestRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(fs::File::create(path).map_err(with_path(path))?);
    for rec in records {
        serde_json::to_writer(&mut w, rec).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Catalog made of the distinct labels in first-seen order.
pub fn catalog_from_records(records: &[ManifestRecord]) -> Result<LabelCatalog> {
    let mut names: Vec<String> = Vec::new();
    for rec in records {
        if let Some(label) = &rec.label {
            if !names.contains(label) {
                names.push(label.clone());
            }
        }
    }
    LabelCatalog::new(names)
}

/// Converts records to normalized library items.
///
/// Records without an `id` get sequential ids starting at `first_id`;
/// an empty `source` falls back to `default_source`.
pub fn records_to_items(
    records: &[ManifestRecord],
    catalog: &LabelCatalog,
    dim: usize,
    provenance: Provenance,
    default_source: &str,
    first_id: u64,
) -> Result<Vec<ReferenceItem>> {
    let mut next = first_id;
    records
        .iter()
        .map(|rec| {
            if rec.vector.len() != dim {
                return Err(Error::DimMismatch { expected: dim, found: rec.vector.len() });
            }
            let class_id = rec.label.as_deref().map(|l| catalog.resolve(l)).transpose()?;
            let item_id = rec.id.unwrap_or_else(|| {
                let id = next;
                next += 1;
                id
            });
            let source = if rec.source.is_empty() { default_source } else { &rec.source };
            Ok(ReferenceItem::new(item_id, normalize(&rec.vector)?, class_id, provenance, source))
        })
        .collect()
}

/// Builds a generation-0 BASE library from a manifest.
///
/// With no catalog given, one is derived from the labels in the manifest.
pub fn library_from_records(
    records: &[ManifestRecord],
    catalog: Option<LabelCatalog>,
) -> Result<LibrarySnapshot> {
    let first = records.first().ok_or(Error::EmptyManifest)?;
    let dim = first.vector.len();
    let catalog = match catalog {
        Some(c) => c,
        None => catalog_from_records(records)?,
    };
    let items = records_to_items(records, &catalog, dim, Provenance::Base, "base", 0)?;
    LibrarySnapshot::new(0, dim, catalog, items)
}

pub fn snapshot_to_records(snapshot: &LibrarySnapshot) -> Vec<ManifestRecord> {
    snapshot
        .items()
        .iter()
        .map(|item| ManifestRecord {
            id: Some(item.item_id),
            label: item.class_id.and_then(|c| snapshot.catalog().name(c)).map(str::to_string),
            source: item.source_tag.clone(),
            vector: item.embedding.values().to_vec(),
            external_ref: None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = r#"{"id": 1, "label": "dr", "source": "hq", "vector": [1, 0, 0]}
{"id": 2, "label": null, "source": "hq", "vector": [0, 3, 4]}

{"label": "normal", "vector": [0, 0, 2], "ref": "img/3.png"}
"#;

    #[test]
    fn parses_lines() {
        let recs = parse_manifest(TEXT).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[1].label, None);
        assert_eq!(recs[2].id, None);
        assert_eq!(recs[2].source, "");
        assert_eq!(recs[2].external_ref.as_deref(), Some("img/3.png"));
    }

    #[test]
    fn reports_bad_line_number() {
        let err = parse_manifest("{\"label\":null,\"vector\":[1,0]}\nnot json").unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 2, .. }));
    }

    #[test]
    fn builds_library_with_derived_catalog() {
        let recs = parse_manifest(TEXT).unwrap();
        let lib = library_from_records(&recs, None).unwrap();
        assert_eq!(lib.catalog().names(), &["dr".to_string(), "normal".to_string()]);
        assert_eq!(lib.len(), 3);
        // missing id gets the next sequential id
        assert_eq!(lib.items()[2].item_id, 0);
        assert_eq!(lib.items()[2].source_tag, "base");
        assert_eq!(lib.items()[1].embedding.values(), &[0.0, 0.6, 0.8]);
    }

    #[test]
    fn unknown_label_is_an_error() {
        let catalog = LabelCatalog::new(["normal"]).unwrap();
        let recs = parse_manifest(TEXT).unwrap();
        let err = records_to_items(&recs, &catalog, 3, Provenance::Base, "x", 0).unwrap_err();
        assert!(matches!(err, Error::UnknownLabel(l) if l == "dr"));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let recs = parse_manifest(TEXT).unwrap();
        write_manifest(&recs, &path).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), recs);
    }
}
