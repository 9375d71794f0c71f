//! Scripted experiments with declared acceptance bounds.
//!
//! Every experiment is a pure function of its config (which carries the
//! seed). Timings are wall-clock and the only non-reproducible field.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refdx_core::confidence::{
    apply_threshold, calibrate_threshold, ood_detection_rate, ConfidenceReport, Ensemble, EnsembleSpec,
    ScoredPrediction,
};
use refdx_core::diagnosis::{aggregate_labels, evaluate, MetricsReport, Prediction};
use refdx_core::manifest::{library_from_records, ManifestRecord};
use refdx_core::retrieval::{retrieve_cases, topk_hit_rate, CaseStore, ReviewSheet, ReviewedQuery};
use refdx_core::{augment, ClassId, Embedding, LabelCatalog, LibrarySnapshot, RankedHits, VectorIndex};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::oracle::{count_oracle, hit_rate_oracle};
use crate::synth::{gen_clusters, place_centroids, sample_point, shifted, ClusterData, ClusterSpec};
use crate::{HarnessError, Result};

pub const EXPERIMENTS: [&str; 5] = ["topk_curve", "shift_recovery", "triage", "ood", "retrieval_hitrate"];

// rng streams derived from the experiment seed; stream 0 belongs to gen_clusters
const STREAM_SHIFT: u64 = 1;
const STREAM_LOCAL: u64 = 2;
const STREAM_HOLDOUT: u64 = 3;
const STREAM_LABEL_NOISE: u64 = 4;
const STREAM_OOD: u64 = 5;
const STREAM_REVIEWERS: u64 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// Human-readable bound, e.g. `">= 0.95"`.
    pub bound: String,
    pub observed: f64,
    pub passed: bool,
}

/// `1e-12` rather than `0.000000000001`.
fn show(bound: f64) -> String {
    if bound != 0.0 && bound.abs() < 1e-3 {
        format!("{bound:e}")
    } else {
        bound.to_string()
    }
}

impl Check {
    fn at_least(name: &str, bound: f64, observed: f64) -> Self {
        Self { name: name.into(), bound: format!(">= {}", show(bound)), observed, passed: observed >= bound }
    }

    fn at_most(name: &str, bound: f64, observed: f64) -> Self {
        Self { name: name.into(), bound: format!("<= {}", show(bound)), observed, passed: observed <= bound }
    }

    fn below(name: &str, bound: f64, observed: f64) -> Self {
        Self { name: name.into(), bound: format!("< {}", show(bound)), observed, passed: observed < bound }
    }
}

/// One cell of a metric table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub table: String,
    pub row: String,
    pub column: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    /// The fully resolved config, defaults included.
    pub config: Value,
    pub seed: u64,
    pub metrics: Vec<Metric>,
    pub checks: Vec<Check>,
    pub timings_ms: BTreeMap<String, f64>,
    pub passed: bool,
}

impl ExperimentReport {
    pub fn metric(&self, table: &str, row: &str, column: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.table == table && m.row == row && m.column == column)
            .map(|m| m.value)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// `table,row,column,value` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("table,row,column,value\n");
        for m in &self.metrics {
            out.push_str(&format!("{},{},{},{}\n", m.table, m.row, m.column, m.value));
        }
        out
    }

    /// The report with timings cleared, for reproducibility comparisons.
    pub fn without_timings(&self) -> Self {
        Self { timings_ms: BTreeMap::new(), ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Replaces the seed in the config.
    pub seed: Option<u64>,
    /// Use every available core. Reported numbers do not change.
    pub parallel: bool,
}

/// Runs experiment `name`. `config` may be `null` or a partial object;
/// missing fields take their defaults and unknown fields are rejected.
pub fn run_experiment(name: &str, config: &Value, opts: &RunOptions) -> Result<ExperimentReport> {
    let threads = if opts.parallel { 0 } else { 1 };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    pool.install(|| match name {
        "topk_curve" => run::<TopkConfig>(name, config, opts, topk_curve),
        "shift_recovery" => run::<ShiftConfig>(name, config, opts, shift_recovery),
        "triage" => run::<TriageConfig>(name, config, opts, triage),
        "ood" => run::<OodConfig>(name, config, opts, ood),
        "retrieval_hitrate" => run::<RetrievalConfig>(name, config, opts, retrieval_hitrate),
        other => Err(HarnessError::UnknownExperiment(other.to_string())),
    })
}

trait Seeded {
    fn clusters_mut(&mut self) -> &mut ClusterSpec;
}

struct Outcome {
    metrics: Vec<Metric>,
    checks: Vec<Check>,
    timings_ms: BTreeMap<String, f64>,
}

impl Outcome {
    fn new() -> Self {
        Self { metrics: Vec::new(), checks: Vec::new(), timings_ms: BTreeMap::new() }
    }

    fn metric(&mut self, table: &str, row: impl Into<String>, column: &str, value: f64) {
        self.metrics.push(Metric { table: table.into(), row: row.into(), column: column.into(), value });
    }

    fn timed<T>(&mut self, label: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings_ms.insert(label.to_string(), start.elapsed().as_secs_f64() * 1e3);
        out
    }
}

fn run<C>(name: &str, config: &Value, opts: &RunOptions, f: fn(&C) -> Result<Outcome>) -> Result<ExperimentReport>
where
    C: Seeded + Serialize + DeserializeOwned + Default,
{
    let mut cfg: C = if config.is_null() {
        C::default()
    } else {
        serde_json::from_value(config.clone()).map_err(|e| HarnessError::Config(e.to_string()))?
    };
    if let Some(seed) = opts.seed {
        cfg.clusters_mut().seed = seed;
    }
    let seed = cfg.clusters_mut().seed;
    let start = Instant::now();
    let mut outcome = f(&cfg)?;
    outcome.timings_ms.insert("total".into(), start.elapsed().as_secs_f64() * 1e3);
    let passed = outcome.checks.iter().all(|c| c.passed);
    Ok(ExperimentReport {
        name: name.to_string(),
        config: serde_json::to_value(&cfg).expect("configs serialize"),
        seed,
        metrics: outcome.metrics,
        checks: outcome.checks,
        timings_ms: outcome.timings_ms,
        passed,
    })
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Prepared library, queries and truths for one synthetic dataset.
struct Bench {
    catalog: LabelCatalog,
    snapshot: LibrarySnapshot,
    queries: Vec<Embedding>,
    truths: Vec<ClassId>,
}

fn bench(data: &ClusterData) -> Result<Bench> {
    let catalog = LabelCatalog::new(data.class_names.clone())?;
    let snapshot = library_from_records(&data.reference, Some(catalog.clone()))?;
    let (queries, truths) = labeled_queries(&data.queries, &catalog)?;
    Ok(Bench { catalog, snapshot, queries, truths })
}

fn labeled_queries(records: &[ManifestRecord], catalog: &LabelCatalog) -> Result<(Vec<Embedding>, Vec<ClassId>)> {
    let mut queries = Vec::with_capacity(records.len());
    let mut truths = Vec::with_capacity(records.len());
    for r in records {
        queries.push(refdx_core::normalize(&r.vector)?);
        let label = r.label.as_deref().ok_or_else(|| HarnessError::Config("query without truth".into()))?;
        truths.push(catalog.resolve(label)?);
    }
    Ok((queries, truths))
}

fn search_all(index: &VectorIndex, queries: &[Embedding], k: usize) -> Result<Vec<RankedHits>> {
    Ok(index.batch_search(queries, k).into_iter().collect::<refdx_core::Result<Vec<_>>>()?)
}

/// Predictions from the first `k` of each precomputed hit list. Exact
/// because hit lists are sorted and ties are broken by id.
fn predictions_at(hits: &[RankedHits], k: usize, n: usize) -> Result<Vec<Prediction>> {
    hits.iter()
        .map(|h| {
            let top = RankedHits { entries: h.entries.iter().take(k).cloned().collect() };
            Ok(aggregate_labels(&top, n)?)
        })
        .collect()
}

fn accuracy(correct: impl Iterator<Item = bool>) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for c in correct {
        n += 1;
        hit += c as usize;
    }
    if n == 0 {
        f64::NAN
    } else {
        hit as f64 / n as f64
    }
}

// ---------------------------------------------------------------- topk_curve

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopkConfig {
    pub clusters: ClusterSpec,
    /// Neighbors retrieved per query.
    pub k: usize,
    pub cutoffs: Vec<usize>,
    pub min_top1: f64,
}

impl Default for TopkConfig {
    fn default() -> Self {
        Self { clusters: ClusterSpec::default(), k: 30, cutoffs: vec![1, 3, 5], min_top1: 0.99 }
    }
}

impl Seeded for TopkConfig {
    fn clusters_mut(&mut self) -> &mut ClusterSpec {
        &mut self.clusters
    }
}

fn topk_curve(cfg: &TopkConfig) -> Result<Outcome> {
    let mut out = Outcome::new();
    let data = out.timed("generate", || gen_clusters(&cfg.clusters))?;
    let b = bench(&data)?;
    let index = out.timed("index", || VectorIndex::build(&b.snapshot))?;
    let n = cfg.cutoffs.iter().copied().max().unwrap_or(1);
    let preds = out.timed("diagnose", || -> Result<Vec<Prediction>> {
        predictions_at(&search_all(&index, &b.queries, cfg.k)?, cfg.k, n)
    })?;
    let report = evaluate(&preds, &b.truths, &cfg.cutoffs, b.catalog.len())?;

    let ranked: Vec<Vec<u16>> = preds.iter().map(|p| p.ranked_labels.iter().map(|l| l.class_id).collect()).collect();
    let counted = count_oracle(&ranked, &b.truths, &cfg.cutoffs);
    let deviation = metrics_deviation(&report, &counted);

    record_metrics(&mut out, &report, &b.catalog);
    let top1 = report.accuracy(1).unwrap_or(f64::NAN);
    out.checks.push(Check::at_least("top1_accuracy", cfg.min_top1, top1));
    let accs: Vec<f64> = report.top_k_accuracy.values().copied().collect();
    let min_step = accs.windows(2).map(|w| w[1] - w[0]).fold(0.0f64, f64::min);
    out.checks.push(Check::at_least("topk_monotone_min_step", 0.0, min_step));
    out.checks.push(Check::at_most("oracle_max_deviation", 1e-12, deviation));
    Ok(out)
}

/// Largest absolute difference between engine metrics and the counted ones.
pub fn metrics_deviation(report: &MetricsReport, counted: &crate::oracle::CountedMetrics) -> f64 {
    let mut worst = 0.0f64;
    let mut cmp = |a: Option<&f64>, b: Option<&f64>| match (a, b) {
        (Some(x), Some(y)) => worst = worst.max((x - y).abs()),
        _ => worst = f64::INFINITY,
    };
    for (k, v) in &counted.top_k_accuracy {
        cmp(report.top_k_accuracy.get(k), Some(v));
    }
    for (k, v) in &counted.macro_recall {
        cmp(report.macro_recall.get(k), Some(v));
    }
    for (k, per_class) in &counted.per_class_recall {
        let engine = report.per_class_recall.get(k);
        if engine.map(|e| e.len()) != Some(per_class.len()) {
            return f64::INFINITY;
        }
        for (c, v) in per_class {
            cmp(engine.and_then(|e| e.get(c)), Some(v));
        }
    }
    worst
}

fn record_metrics(out: &mut Outcome, report: &MetricsReport, catalog: &LabelCatalog) {
    for (k, acc) in &report.top_k_accuracy {
        out.metric("topk", format!("top{k}"), "accuracy", *acc);
        out.metric("topk", format!("top{k}"), "macro_recall", report.macro_recall[k]);
    }
    if let Some(recall) = report.per_class_recall.get(&1) {
        for (c, r) in recall {
            out.metric("recall_top1", catalog.name(*c).unwrap_or("?"), "recall", *r);
        }
    }
}

// ------------------------------------------------------------ shift_recovery

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftConfig {
    pub clusters: ClusterSpec,
    /// Local (site) items drawn per class from the shifted distribution.
    pub local_per_class: usize,
    /// Norm of the offset added before renormalization; 0 disables the shift.
    pub offset_norm: f64,
    /// Neighbor counts evaluated.
    pub neighbor_ks: Vec<usize>,
    /// Also run the same pipeline with a zero offset.
    pub control: bool,
    pub max_before: f64,
    pub min_after: f64,
    pub min_gain: f64,
    pub control_tolerance: f64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            clusters: ClusterSpec::default(),
            local_per_class: 50,
            offset_norm: 0.8,
            neighbor_ks: vec![1, 3, 5, 10, 30],
            control: true,
            max_before: 0.70,
            min_after: 0.95,
            min_gain: 0.2,
            control_tolerance: 0.02,
        }
    }
}

impl Seeded for ShiftConfig {
    fn clusters_mut(&mut self) -> &mut ClusterSpec {
        &mut self.clusters
    }
}

/// Top-1 accuracy before and after augmentation, one entry per neighbor k.
struct ArmResult {
    before: Vec<f64>,
    after: Vec<f64>,
}

fn shift_recovery(cfg: &ShiftConfig) -> Result<Outcome> {
    let mut out = Outcome::new();
    let spec = &cfg.clusters;
    let data = out.timed("generate", || gen_clusters(spec))?;

    // the offset points at one seeded class, so shifted queries drift
    // toward it and away from their own base references
    let mut rng = stream_rng(spec.seed, STREAM_SHIFT);
    let attractor = rng.random_range(0..spec.n_classes);
    let offset: Vec<f32> = data.centroids[attractor].iter().map(|&x| x * cfg.offset_norm as f32).collect();
    out.metric("setup", "offset", "attractor_class", attractor as f64);

    let mut rng = stream_rng(spec.seed, STREAM_LOCAL);
    let mut local_raw = Vec::with_capacity(spec.n_classes * cfg.local_per_class);
    for (c, centroid) in data.centroids.iter().enumerate() {
        for _ in 0..cfg.local_per_class {
            local_raw.push((c, sample_point(&mut rng, centroid, spec.sigma)));
        }
    }

    let shifted_arm = out.timed("shifted_arm", || shift_arm(cfg, &data, &local_raw, &offset))?;
    for (i, k) in cfg.neighbor_ks.iter().enumerate() {
        out.metric("shift", format!("k{k}"), "top1_before", shifted_arm.before[i]);
        out.metric("shift", format!("k{k}"), "top1_after", shifted_arm.after[i]);
    }
    let max_before = shifted_arm.before.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_after = shifted_arm.after.iter().copied().fold(f64::INFINITY, f64::min);
    let min_gain = gains(&shifted_arm).fold(f64::INFINITY, f64::min);
    out.checks.push(Check::below("top1_before_max", cfg.max_before, max_before));
    out.checks.push(Check::at_least("top1_after_min", cfg.min_after, min_after));
    out.checks.push(Check::at_least("gain_min", cfg.min_gain, min_gain));
    out.checks.push(Check::at_least("after_minus_before_every_k", 0.0, min_gain));

    if cfg.control {
        let zero = vec![0.0f32; spec.dim];
        let control = out.timed("control_arm", || shift_arm(cfg, &data, &local_raw, &zero))?;
        for (i, k) in cfg.neighbor_ks.iter().enumerate() {
            out.metric("control", format!("k{k}"), "top1_before", control.before[i]);
            out.metric("control", format!("k{k}"), "top1_after", control.after[i]);
        }
        let drift = gains(&control).map(f64::abs).fold(0.0, f64::max);
        out.checks.push(Check::at_most("control_max_abs_change", cfg.control_tolerance, drift));
    }
    Ok(out)
}

fn gains(arm: &ArmResult) -> impl Iterator<Item = f64> + '_ {
    arm.after.iter().zip(&arm.before).map(|(a, b)| a - b)
}

fn shift_arm(cfg: &ShiftConfig, data: &ClusterData, local_raw: &[(usize, Vec<f32>)], offset: &[f32]) -> Result<ArmResult> {
    let b = bench(data)?;
    let queries: Vec<Embedding> = b
        .queries
        .iter()
        .map(|q| refdx_core::normalize(&shifted(q.values(), offset)))
        .collect::<refdx_core::Result<_>>()?;
    let local_records: Vec<ManifestRecord> = local_raw
        .iter()
        .enumerate()
        .map(|(i, (c, v))| ManifestRecord::new(i as u64, Some(&data.class_names[*c]), "site", shifted(v, offset)))
        .collect();
    let local = augment::ingest_local_records(&local_records, &b.snapshot, "site-a")?;
    let merged = augment::merge(&b.snapshot, local)?;

    let k_max = cfg.neighbor_ks.iter().copied().max().unwrap_or(1);
    let top1_by_k = |index: &VectorIndex| -> Result<Vec<f64>> {
        let hits = search_all(index, &queries, k_max)?;
        cfg.neighbor_ks
            .iter()
            .map(|&k| {
                let preds = predictions_at(&hits, k, 1)?;
                let report = evaluate(&preds, &b.truths, &[1], b.catalog.len())?;
                Ok(report.accuracy(1).unwrap_or(f64::NAN))
            })
            .collect()
    };
    Ok(ArmResult {
        before: top1_by_k(&VectorIndex::build(&b.snapshot)?)?,
        after: top1_by_k(&VectorIndex::build(&merged)?)?,
    })
}

// -------------------------------------------------------------------- triage

/// Low-dimensional, noisy clusters: with k = 1 a single mislabeled
/// neighbor decides the diagnosis, which the ensemble exposes as low
/// agreement.
fn noisy_clusters(sigma: f64) -> ClusterSpec {
    ClusterSpec { ref_per_class: 100, query_per_class: 50, dim: 64, sigma, ..ClusterSpec::default() }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriageConfig {
    /// `query_per_class` sets the test split size.
    pub clusters: ClusterSpec,
    pub calibration_per_class: usize,
    /// Fraction of reference labels replaced by a different class.
    pub label_noise: f64,
    pub passes: u32,
    pub mask_rate: f64,
    pub k: usize,
    pub min_gain: f64,
}

impl Default for TriageConfig {
    fn default() -> Self {
        Self {
            clusters: noisy_clusters(0.2),
            calibration_per_class: 30,
            label_noise: 0.1,
            passes: 100,
            mask_rate: 0.1,
            k: 1,
            min_gain: 0.03,
        }
    }
}

impl Seeded for TriageConfig {
    fn clusters_mut(&mut self) -> &mut ClusterSpec {
        &mut self.clusters
    }
}

/// Fresh labeled queries from the same clusters on a separate stream.
fn holdout(data: &ClusterData, per_class: usize, sigma: f64, seed: u64, stream: u64) -> Vec<ManifestRecord> {
    let mut rng = stream_rng(seed, stream);
    let mut out = Vec::with_capacity(data.centroids.len() * per_class);
    for (c, centroid) in data.centroids.iter().enumerate() {
        for _ in 0..per_class {
            let id = out.len() as u64;
            out.push(ManifestRecord::new(id, Some(&data.class_names[c]), "holdout", sample_point(&mut rng, centroid, sigma)));
        }
    }
    out
}

/// Replaces the label of `round(rate * N)` seeded references with a
/// uniformly drawn different class.
fn flip_labels(records: &mut [ManifestRecord], names: &[String], rate: f64, seed: u64) -> Result<usize> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(HarnessError::Config(format!("label_noise must be in [0, 1], got {rate}")));
    }
    if names.len() < 2 {
        return Ok(0);
    }
    let mut rng = stream_rng(seed, STREAM_LABEL_NOISE);
    let count = (rate * records.len() as f64).round() as usize;
    let chosen = sample(&mut rng, records.len(), count);
    for i in chosen.iter() {
        let current = names.iter().position(|n| Some(n.as_str()) == records[i].label.as_deref()).unwrap_or(0);
        let other = (current + 1 + rng.random_range(0..names.len() - 1)) % names.len();
        records[i].label = Some(names[other].clone());
    }
    Ok(count)
}

fn ensemble_reports(ensemble: &Ensemble, queries: &[Embedding], k: usize) -> Result<Vec<ConfidenceReport>> {
    Ok(queries.iter().map(|q| ensemble.predict(q, k)).collect::<refdx_core::Result<Vec<_>>>()?)
}

fn triage(cfg: &TriageConfig) -> Result<Outcome> {
    let mut out = Outcome::new();
    let spec = &cfg.clusters;
    let mut data = out.timed("generate", || gen_clusters(spec))?;
    let flipped = flip_labels(&mut data.reference, &data.class_names, cfg.label_noise, spec.seed)?;
    out.metric("setup", "reference", "flipped_labels", flipped as f64);
    let b = bench(&data)?;
    let (cal_queries, cal_truths) =
        labeled_queries(&holdout(&data, cfg.calibration_per_class, spec.sigma, spec.seed, STREAM_HOLDOUT), &b.catalog)?;

    let ens_spec = EnsembleSpec::new(cfg.passes, cfg.mask_rate, spec.seed)?;
    let ensemble = out.timed("ensemble_build", || Ensemble::build(&b.snapshot, &ens_spec))?;

    let cal_reports = out.timed("calibrate", || ensemble_reports(&ensemble, &cal_queries, cfg.k))?;
    let scored: Vec<ScoredPrediction> = cal_reports
        .iter()
        .zip(&cal_truths)
        .map(|(r, &t)| ScoredPrediction { cscore: r.cscore, correct: r.final_class == t })
        .collect();
    let calibration = calibrate_threshold(&scored)?;
    let theta = calibration.theta_star;

    let reports = out.timed("test", || ensemble_reports(&ensemble, &b.queries, cfg.k))?;
    let triage = apply_threshold(&reports, theta);
    let correct: Vec<bool> = reports.iter().zip(&b.truths).map(|(r, &t)| r.final_class == t).collect();
    let acc_all = accuracy(correct.iter().copied());
    let acc_retained = accuracy(triage.retained.iter().map(|&i| correct[i]));
    let acc_flagged = accuracy(triage.flagged.iter().map(|&i| correct[i]));

    let single = predictions_at(&search_all(&VectorIndex::build(&b.snapshot)?, &b.queries, cfg.k)?, cfg.k, 1)?;
    let acc_single = accuracy(single.iter().zip(&b.truths).map(|(p, &t)| p.top1() == t));

    out.metric("calibration", "theta_star", "value", theta);
    out.metric("calibration", "j_star", "value", calibration.j_star);
    out.metric("calibration", "samples", "positives", calibration.positives as f64);
    out.metric("calibration", "samples", "negatives", calibration.negatives as f64);
    out.metric("test", "single_pass", "accuracy", acc_single);
    out.metric("test", "all", "accuracy", acc_all);
    out.metric("test", "retained", "accuracy", acc_retained);
    out.metric("test", "flagged", "accuracy", acc_flagged);
    out.metric("test", "retained", "fraction", triage.retained.len() as f64 / reports.len() as f64);

    let gain = acc_retained - acc_all;
    out.checks.push(Check::at_least("retained_minus_all", cfg.min_gain, gain));
    out.checks.push(Check::at_least("retained_not_worse", 0.0, gain));
    Ok(out)
}

// ----------------------------------------------------------------------- ood

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodConfig {
    /// In-distribution classes; `query_per_class` sets the test holdout.
    pub clusters: ClusterSpec,
    /// In-distribution validation queries per class, used for calibration.
    pub validation_per_class: usize,
    /// Out-of-distribution categories seen during calibration only.
    pub validation_categories: usize,
    /// Out-of-distribution categories used for the detection rate.
    pub test_categories: usize,
    pub per_category: usize,
    /// Minimum distance from every in-distribution centroid, in units of sigma.
    pub min_sigma_distance: f64,
    pub passes: u32,
    pub mask_rate: f64,
    pub k: usize,
    pub min_ood_rate: f64,
    pub max_id_rate: f64,
}

impl Default for OodConfig {
    fn default() -> Self {
        Self {
            clusters: noisy_clusters(0.15),
            validation_per_class: 30,
            validation_categories: 6,
            test_categories: 5,
            per_category: 50,
            min_sigma_distance: 6.0,
            passes: 100,
            mask_rate: 0.1,
            k: 1,
            min_ood_rate: 0.90,
            max_id_rate: 0.15,
        }
    }
}

impl Seeded for OodConfig {
    fn clusters_mut(&mut self) -> &mut ClusterSpec {
        &mut self.clusters
    }
}

fn ood(cfg: &OodConfig) -> Result<Outcome> {
    let mut out = Outcome::new();
    let spec = &cfg.clusters;
    let data = out.timed("generate", || gen_clusters(spec))?;
    let b = bench(&data)?;
    let (val_queries, val_truths) =
        labeled_queries(&holdout(&data, cfg.validation_per_class, spec.sigma, spec.seed, STREAM_HOLDOUT), &b.catalog)?;

    let mut rng = stream_rng(spec.seed, STREAM_OOD);
    let n_ood = cfg.validation_categories + cfg.test_categories;
    let ood_centroids = place_centroids(
        &mut rng,
        n_ood,
        spec.dim,
        spec.min_angle_deg,
        &data.centroids,
        cfg.min_sigma_distance * spec.sigma,
    )?;
    let ood_points: Vec<Vec<Embedding>> = ood_centroids
        .iter()
        .map(|c| {
            (0..cfg.per_category)
                .map(|_| refdx_core::normalize(&sample_point(&mut rng, c, spec.sigma)))
                .collect::<refdx_core::Result<Vec<_>>>()
        })
        .collect::<refdx_core::Result<_>>()?;

    let ens_spec = EnsembleSpec::new(cfg.passes, cfg.mask_rate, spec.seed)?;
    let ensemble = out.timed("ensemble_build", || Ensemble::build(&b.snapshot, &ens_spec))?;

    // calibration: in-distribution validation plus held-out OOD categories,
    // the latter always counted as incorrect
    let scored = out.timed("calibrate", || -> Result<Vec<ScoredPrediction>> {
        let mut scored: Vec<ScoredPrediction> = ensemble_reports(&ensemble, &val_queries, cfg.k)?
            .iter()
            .zip(&val_truths)
            .map(|(r, &t)| ScoredPrediction { cscore: r.cscore, correct: r.final_class == t })
            .collect();
        for points in &ood_points[..cfg.validation_categories] {
            for r in ensemble_reports(&ensemble, points, cfg.k)? {
                scored.push(ScoredPrediction { cscore: r.cscore, correct: false });
            }
        }
        Ok(scored)
    })?;
    let calibration = calibrate_threshold(&scored)?;
    let theta = calibration.theta_star;

    let (id_reports, by_category) = out.timed("test", || -> Result<_> {
        let id_reports = ensemble_reports(&ensemble, &b.queries, cfg.k)?;
        let mut by_category = BTreeMap::new();
        for (i, points) in ood_points[cfg.validation_categories..].iter().enumerate() {
            by_category.insert(format!("ood-{i:02}"), ensemble_reports(&ensemble, points, cfg.k)?);
        }
        Ok((id_reports, by_category))
    })?;
    let rates = ood_detection_rate(&by_category, theta)?;
    let pooled_flagged: usize = by_category.values().flatten().filter(|r| r.cscore < theta).count();
    let pooled_total: usize = by_category.values().map(Vec::len).sum();
    let ood_rate = pooled_flagged as f64 / pooled_total as f64;
    let id_rate = apply_threshold(&id_reports, theta).flagged.len() as f64 / id_reports.len() as f64;
    let id_accuracy = accuracy(id_reports.iter().zip(&b.truths).map(|(r, &t)| r.final_class == t));

    out.metric("calibration", "theta_star", "value", theta);
    out.metric("calibration", "j_star", "value", calibration.j_star);
    for (cat, rate) in &rates {
        out.metric("ood", cat.as_str(), "flag_rate", *rate);
    }
    let mean_cscore = |rs: &mut dyn Iterator<Item = &ConfidenceReport>| accuracy_mean(rs.map(|r| r.cscore));
    out.metric("ood", "pooled", "flag_rate", ood_rate);
    out.metric("ood", "pooled", "mean_cscore", mean_cscore(&mut by_category.values().flatten()));
    out.metric("in_distribution", "holdout", "flag_rate", id_rate);
    out.metric("in_distribution", "holdout", "accuracy", id_accuracy);
    out.metric("in_distribution", "holdout", "mean_cscore", mean_cscore(&mut id_reports.iter()));

    out.checks.push(Check::at_least("ood_flag_rate", cfg.min_ood_rate, ood_rate));
    out.checks.push(Check::at_most("id_flag_rate", cfg.max_id_rate, id_rate));
    Ok(out)
}

fn accuracy_mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    sum / n as f64
}

// --------------------------------------------------------- retrieval_hitrate

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// `ref_per_class` sets the store size, `query_per_class` the queries.
    pub clusters: ClusterSpec,
    pub reviewers: usize,
    /// Probability that a reviewer flips a same-class relevance judgment.
    pub reviewer_error: f64,
    pub retrieved: usize,
    pub cutoffs: Vec<usize>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            clusters: ClusterSpec { ref_per_class: 200, query_per_class: 10, dim: 64, sigma: 0.3, ..ClusterSpec::default() },
            reviewers: 3,
            reviewer_error: 0.1,
            retrieved: 10,
            cutoffs: vec![1, 3, 5, 10],
        }
    }
}

impl Seeded for RetrievalConfig {
    fn clusters_mut(&mut self) -> &mut ClusterSpec {
        &mut self.clusters
    }
}

fn retrieval_hitrate(cfg: &RetrievalConfig) -> Result<Outcome> {
    let mut out = Outcome::new();
    let spec = &cfg.clusters;
    if !(0.0..=1.0).contains(&cfg.reviewer_error) {
        return Err(HarnessError::Config(format!("reviewer_error must be in [0, 1], got {}", cfg.reviewer_error)));
    }
    let data = out.timed("generate", || gen_clusters(spec))?;
    let b = bench(&data)?;
    let hidden: HashMap<u64, ClassId> =
        b.snapshot.items().iter().filter_map(|i| i.class_id.map(|c| (i.item_id, c))).collect();
    let store = out.timed("index", || CaseStore::new(&b.snapshot.unlabeled(), &HashMap::new()))?;

    let mut rng = stream_rng(spec.seed, STREAM_REVIEWERS);
    let reviewers: Vec<String> = (0..cfg.reviewers).map(|r| format!("reviewer-{r}")).collect();
    let mut queries = Vec::with_capacity(b.queries.len());
    let mut precision = vec![0.0; cfg.retrieved];
    out.timed("retrieve", || -> Result<()> {
        for (qi, (q, &truth)) in b.queries.iter().zip(&b.truths).enumerate() {
            let cases = retrieve_cases(&store, q, cfg.retrieved)?;
            let candidates: Vec<u64> = cases.iter().map(|c| c.hit.item_id).collect();
            let relevant: Vec<bool> = candidates.iter().map(|id| hidden.get(id) == Some(&truth)).collect();
            for (i, rel) in relevant.iter().enumerate() {
                precision[i] += *rel as u8 as f64;
            }
            let verdicts = (0..cfg.reviewers)
                .map(|_| relevant.iter().map(|&rel| rel ^ (rng.random::<f64>() < cfg.reviewer_error)).collect())
                .collect();
            queries.push(ReviewedQuery { query_id: format!("q{qi}"), candidates, verdicts });
        }
        Ok(())
    })?;

    let sheet = ReviewSheet { reviewers, queries };
    let rates = topk_hit_rate(&sheet, &cfg.cutoffs)?;
    let verdicts: Vec<Vec<Vec<bool>>> = sheet.queries.iter().map(|q| q.verdicts.clone()).collect();
    let counted = hit_rate_oracle(&verdicts, &cfg.cutoffs);
    let mut deviation = 0.0f64;
    for (r, name) in sheet.reviewers.iter().enumerate() {
        for (k, v) in &counted[r] {
            deviation = deviation.max((rates.per_reviewer[name][k] - v).abs());
        }
    }

    for (k, v) in &rates.average {
        out.metric("hit_rate", format!("top{k}"), "average", *v);
        for (name, per) in &rates.per_reviewer {
            out.metric("hit_rate", format!("top{k}"), name, per[k]);
        }
    }
    for (i, p) in precision.iter().enumerate() {
        out.metric("same_class", format!("rank{}", i + 1), "fraction", p / b.queries.len() as f64);
    }
    let avgs: Vec<f64> = rates.average.values().copied().collect();
    let min_step = avgs.windows(2).map(|w| w[1] - w[0]).fold(0.0f64, f64::min);
    out.checks.push(Check::at_least("hit_rate_monotone_min_step", 0.0, min_step));
    out.checks.push(Check::at_most("oracle_max_deviation", 1e-12, deviation));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn small(name: &str) -> Value {
        let clusters = json!({"n_classes": 6, "ref_per_class": 20, "query_per_class": 5, "dim": 16, "sigma": 0.1});
        match name {
            "triage" => json!({"clusters": {"n_classes": 6, "ref_per_class": 20, "dim": 16, "sigma": 0.4}, "passes": 10}),
            "ood" => json!({"clusters": clusters, "passes": 10}),
            _ => json!({"clusters": clusters}),
        }
    }

    #[test]
    fn unknown_experiment() {
        let err = run_experiment("nope", &Value::Null, &RunOptions::default()).unwrap_err();
        assert!(matches!(err, HarnessError::UnknownExperiment(_)));
    }

    #[test]
    fn unknown_config_field_is_rejected() {
        let err = run_experiment("topk_curve", &json!({"sigmaa": 1}), &RunOptions::default()).unwrap_err();
        assert!(matches!(err, HarnessError::Config(_)));
    }

    #[test]
    fn every_experiment_runs_and_reproduces() {
        for name in EXPERIMENTS {
            let opts = RunOptions { seed: Some(3), parallel: false };
            let a = run_experiment(name, &small(name), &opts).unwrap();
            let b = run_experiment(name, &small(name), &opts).unwrap();
            assert_eq!(a.without_timings(), b.without_timings(), "{name}");
            assert_eq!(a.seed, 3);
            assert_eq!(a.config["clusters"]["seed"], 3);
            assert!(!a.checks.is_empty() && !a.metrics.is_empty());
            assert!(a.to_csv().lines().count() == a.metrics.len() + 1);
        }
    }

    #[test]
    fn flip_count_and_targets() {
        let names: Vec<String> = (0..3).map(crate::synth::class_name).collect();
        let mut recs: Vec<ManifestRecord> =
            (0..100).map(|i| ManifestRecord::new(i, Some(&names[0]), "b", vec![1.0, 0.0])).collect();
        assert_eq!(flip_labels(&mut recs, &names, 0.1, 1).unwrap(), 10);
        assert_eq!(recs.iter().filter(|r| r.label.as_deref() != Some("class-00")).count(), 10);
        assert!(flip_labels(&mut recs, &names, 1.5, 1).is_err());
    }
}
