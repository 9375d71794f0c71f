//! Similar-case lookup over large (usually unlabeled) stores and
//! reviewer-judged hit rates.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::index::{Hit, VectorIndex};
use crate::library::LibrarySnapshot;

pub const DEFAULT_CASES: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseMeta {
    /// Opaque pointer to the original case (path or URL).
    pub external_ref: String,
    pub source_tag: String,
}

#[derive(Debug, Clone)]
pub struct CaseStore {
    index: VectorIndex,
    metadata: HashMap<u64, CaseMeta>,
}

impl CaseStore {
    /// Builds a store; items without an entry in `refs` get
    /// `"<source_tag>/<item_id>"` as their external reference.
    pub fn new(snapshot: &LibrarySnapshot, refs: &HashMap<u64, String>) -> Result<Self> {
        let index = VectorIndex::build(snapshot)?;
        let metadata = snapshot
            .items()
            .iter()
            .map(|item| {
                let external_ref = refs
                    .get(&item.item_id)
                    .cloned()
                    .unwrap_or_else(|| format!("{}/{}", item.source_tag, item.item_id));
                (item.item_id, CaseMeta { external_ref, source_tag: item.source_tag.clone() })
            })
            .collect();
        Ok(Self { index, metadata })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.index.dim()
    }

    pub fn generation(&self) -> u64 {
        self.index.generation()
    }

    pub fn metadata(&self, item_id: u64) -> Option<&CaseMeta> {
        self.metadata.get(&item_id)
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedCase {
    #[serde(flatten)]
    pub hit: Hit,
    #[serde(flatten)]
    pub meta: CaseMeta,
}

pub fn retrieve_cases(store: &CaseStore, query: &Embedding, k: usize) -> Result<Vec<RetrievedCase>> {
    let hits = store.index.search(query, k)?;
    hits.entries
        .into_iter()
        .map(|hit| {
            let meta = store.metadata(hit.item_id).ok_or(Error::MissingMetadata(hit.item_id))?.clone();
            Ok(RetrievedCase { hit, meta })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewedQuery {
    pub query_id: String,
    /// Retrieved item ids in rank order.
    pub candidates: Vec<u64>,
    /// `verdicts[r][i]`: reviewer `r` judged candidate `i` relevant.
    pub verdicts: Vec<Vec<bool>>,
}

/// Relevance judgments of several reviewers over ranked candidate lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewSheet {
    pub reviewers: Vec<String>,
    pub queries: Vec<ReviewedQuery>,
}

impl ReviewSheet {
    pub fn validate(&self) -> Result<()> {
        if self.reviewers.is_empty() {
            return Err(Error::IncompleteSheet("no reviewers".into()));
        }
        if self.queries.is_empty() {
            return Err(Error::IncompleteSheet("no queries".into()));
        }
        for q in &self.queries {
            let unique: HashSet<u64> = q.candidates.iter().copied().collect();
            if unique.len() != q.candidates.len() {
                return Err(Error::IncompleteSheet(format!("query {} repeats a candidate", q.query_id)));
            }
            if q.verdicts.len() != self.reviewers.len() {
                return Err(Error::IncompleteSheet(format!(
                    "query {} has verdicts from {} of {} reviewers",
                    q.query_id,
                    q.verdicts.len(),
                    self.reviewers.len()
                )));
            }
            if let Some(r) = q.verdicts.iter().position(|v| v.len() != q.candidates.len()) {
                return Err(Error::IncompleteSheet(format!(
                    "reviewer {} judged {} of {} candidates for query {}",
                    self.reviewers[r],
                    q.verdicts[r].len(),
                    q.candidates.len(),
                    q.query_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitRates {
    pub per_reviewer: BTreeMap<String, BTreeMap<usize, f64>>,
    /// Mean over reviewers.
    pub average: BTreeMap<usize, f64>,
}

/// A query is a hit at k for a reviewer when any of its first k candidates
/// was judged relevant by that reviewer.
pub fn topk_hit_rate(sheet: &ReviewSheet, ks: &[usize]) -> Result<HitRates> {
    sheet.validate()?;
    let shortest = sheet.queries.iter().map(|q| q.candidates.len()).min().unwrap_or(0);
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k > shortest) {
        return Err(Error::InvalidCutoff(bad));
    }
    let n = sheet.queries.len() as f64;
    let mut per_reviewer = BTreeMap::new();
    let mut average: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
    for (r, name) in sheet.reviewers.iter().enumerate() {
        let rates: BTreeMap<usize, f64> = ks
            .iter()
            .map(|&k| {
                let hits = sheet.queries.iter().filter(|q| q.verdicts[r][..k].iter().any(|&v| v)).count();
                (k, hits as f64 / n)
            })
            .collect();
        for (k, rate) in &rates {
            *average.get_mut(k).unwrap() += rate / sheet.reviewers.len() as f64;
        }
        per_reviewer.insert(name.clone(), rates);
    }
    Ok(HitRates { per_reviewer, average })
}
