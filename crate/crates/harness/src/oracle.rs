//! Deliberately naive reference implementations used to check the engine.
//!
//! Nothing here calls into `refdx_core`: inputs are plain slices and every
//! result is computed by full sorts, exhaustive sweeps or direct counting.

use std::collections::BTreeMap;

use crate::{HarnessError, Result};

/// Ids of the `k` most similar vectors: full sort by descending dot
/// product (sequential `f64` sum), ties to the smaller id.
pub fn knn_oracle(reference: &[(u64, &[f32])], query: &[f32], k: usize) -> Vec<(u64, f64)> {
    let mut scored: Vec<(u64, f64)> = reference
        .iter()
        .map(|(id, v)| {
            let mut s = 0.0f64;
            for i in 0..query.len() {
                s += query[i] as f64 * v[i] as f64;
            }
            (*id, s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// Upper sentinel used by the sweep; must match the engine's.
pub const SWEEP_TOP: f64 = 1.0 + 1e-9;

/// Youden sweep by brute force: every candidate threshold is evaluated by
/// recounting all samples. Returns `(theta_star, j_star)` with the smallest
/// maximizing threshold.
pub fn sweep_oracle(scored: &[(f64, bool)]) -> Result<(f64, f64)> {
    let pos = scored.iter().filter(|s| s.1).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(HarnessError::OneClassOnly);
    }
    let mut values: Vec<f64> = scored.iter().map(|s| s.0).collect();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values.dedup();
    let mut candidates = vec![0.0];
    for w in values.windows(2) {
        candidates.push((w[0] + w[1]) / 2.0);
    }
    candidates.push(SWEEP_TOP);

    let mut best: Option<(f64, f64)> = None;
    for theta in candidates {
        let mut tp = 0usize;
        let mut tn = 0usize;
        for &(c, correct) in scored {
            if correct && c >= theta {
                tp += 1;
            }
            if !correct && c < theta {
                tn += 1;
            }
        }
        let j = tp as f64 / pos as f64 + tn as f64 / neg as f64 - 1.0;
        match best {
            Some((_, bj)) if j <= bj => {}
            _ => best = Some((theta, j)),
        }
    }
    Ok(best.unwrap())
}

/// Youden's J at one threshold, recounted from scratch.
pub fn youden_at(scored: &[(f64, bool)], theta: f64) -> f64 {
    let pos = scored.iter().filter(|s| s.1).count() as f64;
    let neg = scored.len() as f64 - pos;
    let tp = scored.iter().filter(|s| s.1 && s.0 >= theta).count() as f64;
    let tn = scored.iter().filter(|s| !s.1 && s.0 < theta).count() as f64;
    tp / pos + tn / neg - 1.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountedMetrics {
    pub top_k_accuracy: BTreeMap<usize, f64>,
    pub per_class_recall: BTreeMap<usize, BTreeMap<u16, f64>>,
    pub macro_recall: BTreeMap<usize, f64>,
}

/// Top-k accuracy and recall by direct counting. `ranked[i]` is the ranked
/// class list of sample `i`.
pub fn count_oracle(ranked: &[Vec<u16>], truths: &[u16], ks: &[usize]) -> CountedMetrics {
    let mut top_k_accuracy = BTreeMap::new();
    let mut per_class_recall = BTreeMap::new();
    let mut macro_recall = BTreeMap::new();
    let mut classes: Vec<u16> = truths.to_vec();
    classes.sort();
    classes.dedup();
    for &k in ks {
        let mut correct = 0usize;
        for i in 0..truths.len() {
            if ranked[i].iter().take(k).any(|&c| c == truths[i]) {
                correct += 1;
            }
        }
        top_k_accuracy.insert(k, correct as f64 / truths.len() as f64);

        let mut recalls = BTreeMap::new();
        for &c in &classes {
            let mut total = 0usize;
            let mut hit = 0usize;
            for i in 0..truths.len() {
                if truths[i] == c {
                    total += 1;
                    if ranked[i].iter().take(k).any(|&x| x == c) {
                        hit += 1;
                    }
                }
            }
            recalls.insert(c, hit as f64 / total as f64);
        }
        let mut sum = 0.0;
        for v in recalls.values() {
            sum += v;
        }
        macro_recall.insert(k, sum / recalls.len() as f64);
        per_class_recall.insert(k, recalls);
    }
    CountedMetrics { top_k_accuracy, per_class_recall, macro_recall }
}

/// Reviewer hit rates by direct counting: `verdicts[q][r][i]`.
pub fn hit_rate_oracle(verdicts: &[Vec<Vec<bool>>], ks: &[usize]) -> Vec<BTreeMap<usize, f64>> {
    let reviewers = verdicts[0].len();
    (0..reviewers)
        .map(|r| {
            ks.iter()
                .map(|&k| {
                    let mut hits = 0usize;
                    for q in verdicts {
                        if q[r].iter().take(k).any(|&v| v) {
                            hits += 1;
                        }
                    }
                    (k, hits as f64 / verdicts.len() as f64)
                })
                .collect()
        })
        .collect()
}
