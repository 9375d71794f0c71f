//! Turning neighbor lists into ranked diagnoses, and top-k evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::catalog::ClassId;
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::index::{RankedHits, VectorIndex};

pub const DEFAULT_K: usize = 30;
pub const DEFAULT_TOP_N: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub class_id: ClassId,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Descending aggregate score, ties by ascending class id.
    pub ranked_labels: Vec<LabelScore>,
    pub neighbors_used: usize,
}

impl Prediction {
    pub fn top1(&self) -> ClassId {
        self.ranked_labels[0].class_id
    }

    /// Whether `class` is among the first `k` labels.
    pub fn hits_within(&self, class: ClassId, k: usize) -> bool {
        self.ranked_labels.iter().take(k).any(|l| l.class_id == class)
    }
}

/// Similarity-weighted vote: each class accrues the sum of its neighbors'
/// scores, with negative similarities counted as zero.
pub fn aggregate_labels(hits: &RankedHits, n: usize) -> Result<Prediction> {
    if hits.is_empty() {
        return Err(Error::EmptyHits);
    }
    if n == 0 {
        return Err(Error::InvalidCutoff(0));
    }
    let mut votes: Vec<(ClassId, u64, f64)> = hits
        .entries
        .iter()
        .map(|h| {
            let class = h.class_id.ok_or(Error::UnlabeledHit(h.item_id))?;
            Ok((class, h.item_id, h.score.max(0.0)))
        })
        .collect::<Result<_>>()?;
    // fixed summation order makes the result independent of input order
    votes.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut ranked: Vec<LabelScore> = Vec::new();
    for (class, _, score) in votes {
        match ranked.last_mut() {
            Some(last) if last.class_id == class => last.score += score,
            _ => ranked.push(LabelScore { class_id: class, score }),
        }
    }
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.class_id.cmp(&b.class_id)));
    ranked.truncate(n);
    Ok(Prediction { ranked_labels: ranked, neighbors_used: hits.len() })
}

pub fn predict(query: &Embedding, index: &VectorIndex, k: usize, n: usize) -> Result<Prediction> {
    let hits = index.search(query, k)?;
    aggregate_labels(&hits, n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "topk")]
    pub top_k_accuracy: BTreeMap<usize, f64>,
    /// k -> class -> recall, for classes with at least one sample.
    #[serde(rename = "recall")]
    pub per_class_recall: BTreeMap<usize, BTreeMap<ClassId, f64>>,
    pub macro_recall: BTreeMap<usize, f64>,
    /// Row = true class, column = top-1 prediction.
    #[serde(rename = "confusion")]
    pub confusion_top1: Vec<Vec<u64>>,
    #[serde(rename = "n")]
    pub n_samples: usize,
}

impl MetricsReport {
    pub fn accuracy(&self, k: usize) -> Option<f64> {
        self.top_k_accuracy.get(&k).copied()
    }
}

pub fn evaluate(
    predictions: &[Prediction],
    truths: &[ClassId],
    ks: &[usize],
    num_classes: usize,
) -> Result<MetricsReport> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch { predictions: predictions.len(), truths: truths.len() });
    }
    if predictions.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k > num_classes) {
        return Err(Error::InvalidCutoff(bad));
    }
    if let Some(&t) = truths.iter().find(|&&t| t as usize >= num_classes) {
        return Err(Error::UnknownClassId(t as i64));
    }

    let mut per_class_total = vec![0usize; num_classes];
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    for (p, &t) in predictions.iter().zip(truths) {
        per_class_total[t as usize] += 1;
        let top = p.top1() as usize;
        if top >= num_classes {
            return Err(Error::UnknownClassId(top as i64));
        }
        confusion[t as usize][top] += 1;
    }

    let n = predictions.len();
    let mut top_k_accuracy = BTreeMap::new();
    let mut per_class_recall = BTreeMap::new();
    let mut macro_recall = BTreeMap::new();
    for &k in ks {
        let mut per_class_hits = vec![0usize; num_classes];
        for (p, &t) in predictions.iter().zip(truths) {
            if p.hits_within(t, k) {
                per_class_hits[t as usize] += 1;
            }
        }
        let total_hits: usize = per_class_hits.iter().sum();
        top_k_accuracy.insert(k, total_hits as f64 / n as f64);
        let recalls: BTreeMap<ClassId, f64> = (0..num_classes)
            .filter(|&c| per_class_total[c] > 0)
            .map(|c| (c as ClassId, per_class_hits[c] as f64 / per_class_total[c] as f64))
            .collect();
        macro_recall.insert(k, recalls.values().sum::<f64>() / recalls.len() as f64);
        per_class_recall.insert(k, recalls);
    }
    Ok(MetricsReport { top_k_accuracy, per_class_recall, macro_recall, confusion_top1: confusion, n_samples: n })
}
