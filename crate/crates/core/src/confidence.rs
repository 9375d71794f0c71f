//! Ensemble-consistency confidence, Youden threshold calibration, triage
//! and open-set flagging.
//!
//! Reference embeddings are perturbed once per pass by seeded coordinate
//! masking (a dropout analog applied in feature space). Each pass yields a
//! Top-1 diagnosis; the modal class is the final diagnosis and its vote
//! share is the confidence score. A diagnosis is reliable when its
//! confidence reaches the calibrated threshold.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::ClassId;
use crate::diagnosis::aggregate_labels;
use crate::embedding::{self, Embedding, ZERO_NORM};
use crate::error::{Error, Result};
use crate::index::{RowMeta, VectorIndex};
use crate::library::LibrarySnapshot;

pub const DEFAULT_PASSES: u32 = 100;
pub const DEFAULT_MASK_RATE: f64 = 0.1;

/// Upper sentinel threshold; above every possible confidence score.
pub const THETA_ABOVE_ALL: f64 = 1.0 + 1e-9;

/// Extra substreams tried when a mask zeroes every coordinate.
const MASK_RETRIES: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub passes: u32,
    pub mask_rate: f64,
    pub seed: u64,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self { passes: DEFAULT_PASSES, mask_rate: DEFAULT_MASK_RATE, seed: 0 }
    }
}

impl EnsembleSpec {
    pub fn new(passes: u32, mask_rate: f64, seed: u64) -> Result<Self> {
        let spec = Self { passes, mask_rate, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.passes == 0 {
            return Err(Error::EnsembleDegenerate);
        }
        if !(0.0..1.0).contains(&self.mask_rate) {
            return Err(Error::InvalidEnsemble(format!("mask rate {} outside [0, 1)", self.mask_rate)));
        }
        Ok(())
    }
}

/// Identifies the random stream used to perturb one item in one pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Substream {
    pub seed: u64,
    pub pass: u32,
    pub item_id: u64,
}

impl Substream {
    fn rng(&self, attempt: u32) -> ChaCha8Rng {
        let mut h = splitmix(self.seed);
        h = splitmix(h ^ self.pass as u64);
        h = splitmix(h ^ self.item_id);
        h = splitmix(h ^ attempt as u64);
        ChaCha8Rng::seed_from_u64(h)
    }
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Zeroes each coordinate with probability `mask_rate`, rescales survivors by
/// `1 / (1 - mask_rate)` and renormalizes. `mask_rate == 0` is the identity.
pub fn perturb(e: &Embedding, mask_rate: f64, stream: Substream) -> Result<Embedding> {
    let mut out = Vec::with_capacity(e.dim());
    perturb_into(e.values(), mask_rate, stream, &mut out)?;
    Embedding::from_unit(out)
}

fn perturb_into(values: &[f32], mask_rate: f64, stream: Substream, out: &mut Vec<f32>) -> Result<()> {
    if !(0.0..1.0).contains(&mask_rate) {
        return Err(Error::InvalidEnsemble(format!("mask rate {mask_rate} outside [0, 1)")));
    }
    out.clear();
    if mask_rate == 0.0 {
        out.extend_from_slice(values);
        return Ok(());
    }
    let scale = 1.0 / (1.0 - mask_rate);
    for attempt in 0..=MASK_RETRIES {
        let mut rng = stream.rng(attempt);
        out.clear();
        out.extend(values.iter().map(|&x| {
            if rng.random::<f64>() < mask_rate {
                0.0
            } else {
                (x as f64 * scale) as f32
            }
        }));
        let norm = embedding::l2_norm(out);
        if norm >= ZERO_NORM {
            for x in out.iter_mut() {
                *x = (*x as f64 / norm) as f32;
            }
            return Ok(());
        }
    }
    Err(Error::AllMasked(MASK_RETRIES + 1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReport {
    pub final_class: ClassId,
    /// Vote share of `final_class` across passes.
    pub cscore: f64,
    /// `cscore >= theta` once a threshold has been applied.
    pub reliable: Option<bool>,
    pub per_pass_votes: BTreeMap<ClassId, u32>,
    pub passes: u32,
}

impl ConfidenceReport {
    fn from_votes(votes: BTreeMap<ClassId, u32>) -> Result<Self> {
        let passes: u32 = votes.values().sum();
        // ascending class order; keeping the first maximum resolves ties to the smallest id
        let (final_class, top) = votes
            .iter()
            .fold(None, |best: Option<(ClassId, u32)>, (&c, &v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((c, v)),
            })
            .ok_or(Error::EnsembleDegenerate)?;
        Ok(Self {
            final_class,
            cscore: top as f64 / passes as f64,
            reliable: None,
            per_pass_votes: votes,
            passes,
        })
    }

    pub fn with_threshold(mut self, theta: f64) -> Self {
        self.reliable = Some(self.cscore >= theta);
        self
    }
}

/// The perturbed reference libraries of every pass, built once and reused
/// for any number of queries.
#[derive(Debug, Clone)]
pub struct Ensemble {
    passes: Vec<VectorIndex>,
    generation: u64,
}

impl Ensemble {
    /// Perturbs every reference embedding once per pass.
    ///
    /// Pass `t` (1-based) perturbs item `id` with substream `(seed, t, id)`.
    pub fn build(snapshot: &LibrarySnapshot, spec: &EnsembleSpec) -> Result<Self> {
        spec.validate()?;
        if snapshot.is_empty() {
            return Err(Error::EmptyLibrary);
        }
        let dim = snapshot.dim();
        let rows: Vec<RowMeta> = snapshot
            .items()
            .iter()
            .map(|i| RowMeta { item_id: i.item_id, class_id: i.class_id, provenance: i.provenance })
            .collect();
        let passes = (1..=spec.passes)
            .into_par_iter()
            .map(|pass| {
                let mut matrix = Vec::with_capacity(snapshot.len() * dim);
                let mut buf = Vec::with_capacity(dim);
                for item in snapshot.items() {
                    let stream = Substream { seed: spec.seed, pass, item_id: item.item_id };
                    perturb_into(item.embedding.values(), spec.mask_rate, stream, &mut buf)?;
                    matrix.extend_from_slice(&buf);
                }
                Ok(VectorIndex::from_trusted(snapshot.generation(), dim, matrix, rows.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { passes, generation: snapshot.generation() })
    }

    /// Uses externally produced per-pass libraries (e.g. from a stochastic
    /// encoder). All passes must describe the same items in the same order.
    pub fn from_pass_snapshots(passes: &[LibrarySnapshot]) -> Result<Self> {
        let first = passes.first().ok_or(Error::EnsembleDegenerate)?;
        let mut out = Vec::with_capacity(passes.len());
        for snap in passes {
            if snap.dim() != first.dim() {
                return Err(Error::DimMismatch { expected: first.dim(), found: snap.dim() });
            }
            let same_rows = snap.len() == first.len()
                && snap
                    .items()
                    .iter()
                    .zip(first.items())
                    .all(|(a, b)| a.item_id == b.item_id && a.class_id == b.class_id);
            if !same_rows {
                return Err(Error::InvalidEnsemble("passes disagree on items or labels".into()));
            }
            out.push(VectorIndex::build(snap)?);
        }
        Ok(Self { passes: out, generation: first.generation() })
    }

    pub fn len(&self) -> usize {
        self.passes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passes.is_empty()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn dim(&self) -> usize {
        self.passes[0].dim()
    }

    /// Top-1 diagnosis per pass, tallied into a confidence report.
    pub fn predict(&self, query: &Embedding, k: usize) -> Result<ConfidenceReport> {
        let tops = self
            .passes
            .par_iter()
            .map(|index| {
                let hits = index.search(query, k)?;
                Ok(aggregate_labels(&hits, 1)?.top1())
            })
            .collect::<Result<Vec<ClassId>>>()?;
        let mut votes = BTreeMap::new();
        for c in tops {
            *votes.entry(c).or_insert(0u32) += 1;
        }
        ConfidenceReport::from_votes(votes)
    }
}

/// One-shot ensemble prediction. Prefer [`Ensemble`] when scoring many
/// queries against the same library.
pub fn mc_predict(
    query: &Embedding,
    snapshot: &LibrarySnapshot,
    spec: &EnsembleSpec,
    k: usize,
) -> Result<ConfidenceReport> {
    Ensemble::build(snapshot, spec)?.predict(query, k)
}

/// A confidence score paired with whether the diagnosis was correct.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub cscore: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub theta: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub theta_star: f64,
    pub j_star: f64,
    pub curve: Vec<CurvePoint>,
    /// Number of correct predictions.
    pub positives: usize,
    /// Number of incorrect predictions.
    pub negatives: usize,
}

/// Picks the threshold maximizing Youden's J = sensitivity + specificity - 1.
///
/// Sensitivity is the share of correct predictions kept (`cscore >= theta`),
/// specificity the share of incorrect ones flagged. Candidates are 0, the
/// midpoints between consecutive distinct scores, and [`THETA_ABOVE_ALL`];
/// ties resolve to the smallest threshold.
pub fn calibrate_threshold(scored: &[ScoredPrediction]) -> Result<CalibrationResult> {
    let positives = scored.iter().filter(|s| s.correct).count();
    let negatives = scored.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::OneClassOnly);
    }
    if scored.iter().any(|s| !s.cscore.is_finite()) {
        return Err(Error::NonFinite);
    }

    let mut sorted: Vec<ScoredPrediction> = scored.to_vec();
    sorted.sort_by(|a, b| a.cscore.total_cmp(&b.cscore));

    let point = |theta: f64, flagged_correct: usize, flagged_incorrect: usize| {
        let sensitivity = (positives - flagged_correct) as f64 / positives as f64;
        let specificity = flagged_incorrect as f64 / negatives as f64;
        CurvePoint { theta, sensitivity, specificity, j: sensitivity + specificity - 1.0 }
    };

    let mut curve = vec![point(0.0, 0, 0)];
    let (mut flagged_correct, mut flagged_incorrect) = (0, 0);
    let mut i = 0;
    while i < sorted.len() {
        let value = sorted[i].cscore;
        while i < sorted.len() && sorted[i].cscore == value {
            if sorted[i].correct {
                flagged_correct += 1;
            } else {
                flagged_incorrect += 1;
            }
            i += 1;
        }
        let theta = if i < sorted.len() { (value + sorted[i].cscore) / 2.0 } else { THETA_ABOVE_ALL };
        // a score of exactly 0 is retained by the 0 sentinel and flagged by
        // the next candidate, so it needs no special case
        curve.push(point(theta, flagged_correct, flagged_incorrect));
    }

    let mut best = curve[0];
    for p in &curve[1..] {
        if p.j > best.j {
            best = *p;
        }
    }
    Ok(CalibrationResult { theta_star: best.theta, j_star: best.j, curve, positives, negatives })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriageResult {
    /// Indices of reports with `cscore >= theta`.
    pub retained: Vec<usize>,
    /// Indices of the remaining reports, routed to human review.
    pub flagged: Vec<usize>,
}

pub fn apply_threshold(reports: &[ConfidenceReport], theta: f64) -> TriageResult {
    let mut out = TriageResult::default();
    for (i, r) in reports.iter().enumerate() {
        if r.cscore >= theta {
            out.retained.push(i);
        } else {
            out.flagged.push(i);
        }
    }
    out
}

/// Flagged fraction per category.
pub fn ood_detection_rate(
    reports_by_category: &BTreeMap<String, Vec<ConfidenceReport>>,
    theta: f64,
) -> Result<BTreeMap<String, f64>> {
    reports_by_category
        .iter()
        .map(|(cat, reports)| {
            if reports.is_empty() {
                return Err(Error::EmptyCategory(cat.clone()));
            }
            let flagged = reports.iter().filter(|r| r.cscore < theta).count();
            Ok((cat.clone(), flagged as f64 / reports.len() as f64))
        })
        .collect()
}
