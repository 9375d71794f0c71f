//! Site-local augmentation of the reference library.
//!
//! A deployment site contributes labeled embeddings of its own images; these
//! are appended to the base library as `Local` items, producing a new
//! snapshot generation. The base snapshot is never modified.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catalog::ClassId;
use crate::diagnosis::{evaluate, predict, MetricsReport};
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::library::{LibrarySnapshot, Provenance, ReferenceItem};
use crate::manifest::{read_manifest, records_to_items, ManifestRecord};
use crate::index::VectorIndex;

/// Reads a site manifest and turns it into `Local` items for `base`.
pub fn ingest_local(
    manifest_path: impl AsRef<Path>,
    base: &LibrarySnapshot,
    site_id: &str,
) -> Result<Vec<ReferenceItem>> {
    let records = read_manifest(manifest_path)?;
    ingest_local_records(&records, base, site_id)
}

/// Converts site records into `Local` items tagged with `site_id`.
///
/// Manifest ids are ignored; new ids are allocated above every id in `base`.
pub fn ingest_local_records(
    records: &[ManifestRecord],
    base: &LibrarySnapshot,
    site_id: &str,
) -> Result<Vec<ReferenceItem>> {
    if records.is_empty() {
        return Err(Error::EmptyManifest);
    }
    if let Some(line) = records.iter().position(|r| r.label.is_none()) {
        return Err(Error::Manifest { line: line + 1, message: "local items must be labeled".into() });
    }
    let first_id = base.max_item_id().map_or(0, |m| m + 1);
    let renumbered: Vec<ManifestRecord> = records
        .iter()
        .map(|r| ManifestRecord { id: None, source: site_id.to_string(), ..r.clone() })
        .collect();
    records_to_items(&renumbered, base.catalog(), base.dim(), Provenance::Local, site_id, first_id)
}

/// Hybrid library: `base` items followed by `local`, at `base.generation + 1`.
pub fn merge(base: &LibrarySnapshot, local: Vec<ReferenceItem>) -> Result<LibrarySnapshot> {
    base.appended(local)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteEntry {
    pub item_count: usize,
    pub source_tag: String,
    pub last_merge_generation: u64,
}

/// Bookkeeping of which sites contributed how many local items.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SiteRegistry {
    pub sites: BTreeMap<String, SiteEntry>,
}

impl SiteRegistry {
    /// Registry reconstructed from the `Local` items of a snapshot.
    pub fn from_snapshot(snapshot: &LibrarySnapshot) -> Self {
        let mut sites: BTreeMap<String, SiteEntry> = BTreeMap::new();
        for item in snapshot.items().iter().filter(|i| i.provenance == Provenance::Local) {
            sites
                .entry(item.source_tag.clone())
                .or_insert_with(|| SiteEntry {
                    item_count: 0,
                    source_tag: item.source_tag.clone(),
                    last_merge_generation: snapshot.generation(),
                })
                .item_count += 1;
        }
        Self { sites }
    }

    pub fn record_merge(&mut self, site_id: &str, added: usize, generation: u64) {
        let entry = self.sites.entry(site_id.to_string()).or_insert_with(|| SiteEntry {
            item_count: 0,
            source_tag: site_id.to_string(),
            last_merge_generation: generation,
        });
        entry.item_count += added;
        entry.last_merge_generation = generation;
    }

    /// Whether every site's count matches the snapshot's local items.
    pub fn consistent_with(&self, snapshot: &LibrarySnapshot) -> bool {
        let actual = SiteRegistry::from_snapshot(snapshot);
        actual.sites.len() == self.sites.len()
            && actual
                .sites
                .iter()
                .all(|(k, v)| self.sites.get(k).is_some_and(|e| e.item_count == v.item_count))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeforeAfter {
    pub before: MetricsReport,
    pub after: MetricsReport,
}

/// Evaluates the same queries against the base and the merged index.
#[allow(clippy::too_many_arguments)]
pub fn compare_before_after(
    base_index: &VectorIndex,
    merged_index: &VectorIndex,
    queries: &[Embedding],
    truths: &[ClassId],
    ks: &[usize],
    k: usize,
    num_classes: usize,
) -> Result<BeforeAfter> {
    if base_index.dim() != merged_index.dim() {
        return Err(Error::DimMismatch { expected: base_index.dim(), found: merged_index.dim() });
    }
    if queries.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let n = ks.iter().copied().max().unwrap_or(1).max(1);
    let run = |index: &VectorIndex| -> Result<MetricsReport> {
        let preds = queries.iter().map(|q| predict(q, index, k, n)).collect::<Result<Vec<_>>>()?;
        evaluate(&preds, truths, ks, num_classes)
    };
    Ok(BeforeAfter { before: run(base_index)?, after: run(merged_index)? })
}
