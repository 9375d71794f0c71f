//! Serving state shared by the HTTP API and the CLI.
//!
//! Readers clone an `Arc` to the current [`Serving`] generation and work on
//! it without further locking, so a request sees exactly one generation.
//! Writers (augment, calibrate) serialize on a mutex, build the next
//! generation off to the side and publish it with a single pointer swap.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock, RwLock};
use std::time::Instant;

use refdx_core::augment::{self, SiteRegistry};
use refdx_core::confidence::{calibrate_threshold, CalibrationResult, Ensemble, EnsembleSpec, ScoredPrediction};
use refdx_core::diagnosis::{evaluate, predict, MetricsReport};
use refdx_core::format::{load_library_with, LoadOptions};
use refdx_core::manifest::{read_manifest, ManifestRecord};
use refdx_core::retrieval::{retrieve_cases, CaseStore, RetrievedCase};
use refdx_core::{ClassId, Embedding, LibrarySnapshot, Provenance, VectorIndex};
use serde::{Deserialize, Serialize};

use crate::config::{check_theta, EngineConfig, EngineState};
use crate::error::{Result, ServiceError};
use crate::featurize::Featurizer;

/// Cutoffs reported by the metrics endpoint and `eval` by default.
pub const DEFAULT_CUTOFFS: [usize; 3] = [1, 3, 5];

/// One library generation with everything derived from it.
pub struct Serving {
    pub snapshot: Arc<LibrarySnapshot>,
    pub index: VectorIndex,
    pub registry: SiteRegistry,
    ensemble: OnceLock<Arc<Ensemble>>,
    cases: OnceLock<Arc<CaseStore>>,
}

impl Serving {
    fn new(snapshot: LibrarySnapshot, registry: SiteRegistry) -> Result<Self> {
        let index = VectorIndex::build(&snapshot)?;
        Ok(Self { snapshot: Arc::new(snapshot), index, registry, ensemble: OnceLock::new(), cases: OnceLock::new() })
    }

    pub fn generation(&self) -> u64 {
        self.snapshot.generation()
    }
}

/// A query as posted: exactly one of a raw vector or a base64 image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryInput {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

impl QueryInput {
    pub fn vector(v: Vec<f32>) -> Self {
        Self { vector: Some(v), image: None }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseOptions {
    pub k: Option<usize>,
    pub n: Option<usize>,
    pub theta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedLabel {
    pub label: String,
    pub class_id: ClassId,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisResponse {
    pub ranked_labels: Vec<RankedLabel>,
    pub neighbors_used: usize,
    /// Ensemble decision; may differ from the first ranked label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cscore: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reliable: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_pass_votes: Option<BTreeMap<String, u32>>,
    pub generation: u64,
    pub timing_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieveResponse {
    pub cases: Vec<RetrievedCase>,
    pub generation: u64,
    pub timing_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentResponse {
    pub site_id: String,
    pub added: usize,
    pub old_generation: u64,
    pub new_generation: u64,
    pub items: usize,
}

/// Calibration input: precomputed scores, or labeled validation records
/// scored by the ensemble. A validation record with a null label is an
/// out-of-distribution sample and always counts as incorrect.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateRequest {
    #[serde(default)]
    pub scored: Option<Vec<ScoredPrediction>>,
    #[serde(default)]
    pub validation: Option<Vec<ManifestRecord>>,
    #[serde(default)]
    pub validation_manifest: Option<std::path::PathBuf>,
    /// Publish θ* to the engine and its state file (default true).
    #[serde(default)]
    pub apply: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrateResponse {
    #[serde(flatten)]
    pub calibration: CalibrationResult,
    pub generation: u64,
    pub applied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceCounts {
    pub base: usize,
    pub local: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub generation: u64,
    pub dim: usize,
    pub items: usize,
    pub by_provenance: ProvenanceCounts,
    pub by_source: BTreeMap<String, usize>,
    pub classes: Vec<String>,
    pub sites: SiteRegistry,
    pub theta_star: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsResponse {
    pub generation: u64,
    /// Evaluation of the configured manifest against this generation.
    pub evaluation: Option<MetricsReport>,
    pub requests: BTreeMap<String, u64>,
}

struct Evaluation {
    queries: Vec<Embedding>,
    truths: Vec<ClassId>,
}

pub struct Engine {
    config: EngineConfig,
    current: RwLock<Arc<Serving>>,
    writer: Mutex<()>,
    theta: RwLock<Option<f64>>,
    featurizer: Featurizer,
    case_store: Option<Arc<CaseStore>>,
    evaluation: Option<Evaluation>,
    eval_cache: Mutex<Option<(u64, MetricsReport)>>,
    requests: Mutex<BTreeMap<String, u64>>,
    /// Write calibrated thresholds to the state file.
    persist_state: bool,
}

impl Engine {
    /// Loads the library, optional case store, evaluation manifest and
    /// calibrated threshold named by `config`.
    pub fn open(config: EngineConfig) -> Result<Self> {
        config.validate()?;
        let opts = LoadOptions { expected_dim: config.dim, ..LoadOptions::default() };
        let snapshot = load_library_with(&config.library_path, opts)?;
        let mut engine = Self::from_snapshot(config, snapshot)?;
        if let Some(path) = engine.config.case_store_path.clone() {
            engine.case_store = Some(Arc::new(load_case_store(&path, engine.dim())?));
        }
        if let Some(path) = engine.config.eval_manifest_path.clone() {
            let records = read_manifest(&path)?;
            let (queries, truths) = engine.labeled(&records)?;
            let truths = truths.into_iter().collect::<Option<Vec<_>>>().ok_or_else(|| {
                ServiceError::BadRequest(format!("{}: evaluation records need labels", path.display()))
            })?;
            engine.evaluation = Some(Evaluation { queries, truths });
        }
        let state = EngineState::load(&engine.config.state_file())?;
        if let Some(t) = state.theta_star {
            *engine.theta.write().unwrap() = Some(t);
        }
        engine.persist_state = true;
        Ok(engine)
    }

    /// An engine over an in-memory snapshot. The threshold comes from
    /// `config.theta_star`; no files are read.
    pub fn from_snapshot(config: EngineConfig, snapshot: LibrarySnapshot) -> Result<Self> {
        config.validate()?;
        if let Some(d) = config.dim {
            if d != snapshot.dim() {
                return Err(refdx_core::Error::DimMismatch { expected: d, found: snapshot.dim() }.into());
            }
        }
        let featurizer = Featurizer::new(snapshot.dim(), config.featurizer_seed);
        let registry = SiteRegistry::from_snapshot(&snapshot);
        let serving = Serving::new(snapshot, registry)?;
        Ok(Self {
            theta: RwLock::new(config.theta_star),
            config,
            current: RwLock::new(Arc::new(serving)),
            writer: Mutex::new(()),
            featurizer,
            case_store: None,
            evaluation: None,
            eval_cache: Mutex::new(None),
            requests: Mutex::new(BTreeMap::new()),
            persist_state: false,
        })
    }

    pub fn with_case_store(mut self, store: CaseStore) -> Self {
        self.case_store = Some(Arc::new(store));
        self
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// The generation new requests will see.
    pub fn current(&self) -> Arc<Serving> {
        self.current.read().unwrap().clone()
    }

    pub fn dim(&self) -> usize {
        self.current().index.dim()
    }

    pub fn theta(&self) -> Option<f64> {
        *self.theta.read().unwrap()
    }

    pub fn count_request(&self, endpoint: &str) {
        *self.requests.lock().unwrap().entry(endpoint.to_string()).or_insert(0) += 1;
    }

    pub fn embed(&self, query: &QueryInput) -> Result<Embedding> {
        match (&query.vector, &query.image) {
            (Some(v), None) => Ok(refdx_core::normalize(v)?),
            (None, Some(img)) => self.featurizer.featurize_base64(img),
            _ => Err(ServiceError::BadRequest("provide exactly one of `vector` or `image`".into())),
        }
    }

    /// Ranked labels from one k-NN pass.
    pub fn diagnose(&self, query: &QueryInput, opts: &DiagnoseOptions) -> Result<DiagnosisResponse> {
        let start = Instant::now();
        let serving = self.current();
        let e = self.embed(query)?;
        let mut resp = self.plain(&serving, &e, opts)?;
        resp.timing_ms = elapsed_ms(start);
        Ok(resp)
    }

    /// [`diagnose`](Self::diagnose) plus the ensemble confidence score and
    /// the reliability flag at θ (request value, else the engine's).
    pub fn diagnose_confident(&self, query: &QueryInput, opts: &DiagnoseOptions) -> Result<DiagnosisResponse> {
        let start = Instant::now();
        let theta = match opts.theta.or_else(|| self.theta()) {
            Some(t) => {
                check_theta(t)?;
                t
            }
            None => return Err(ServiceError::ThetaUnset),
        };
        let serving = self.current();
        let e = self.embed(query)?;
        let mut resp = self.plain(&serving, &e, opts)?;
        let k = opts.k.unwrap_or(self.config.k_neighbors);
        let report = self.ensemble(&serving)?.predict(&e, k)?.with_threshold(theta);
        let catalog = serving.snapshot.catalog();
        resp.final_label = Some(class_name(catalog, report.final_class));
        resp.cscore = Some(report.cscore);
        resp.reliable = report.reliable;
        resp.theta = Some(theta);
        resp.per_pass_votes =
            Some(report.per_pass_votes.iter().map(|(c, v)| (class_name(catalog, *c), *v)).collect());
        resp.timing_ms = elapsed_ms(start);
        Ok(resp)
    }

    fn plain(&self, serving: &Serving, e: &Embedding, opts: &DiagnoseOptions) -> Result<DiagnosisResponse> {
        let k = opts.k.unwrap_or(self.config.k_neighbors);
        let n = opts.n.unwrap_or(self.config.top_n);
        let pred = predict(e, &serving.index, k, n)?;
        let catalog = serving.snapshot.catalog();
        Ok(DiagnosisResponse {
            ranked_labels: pred
                .ranked_labels
                .iter()
                .map(|l| RankedLabel { label: class_name(catalog, l.class_id), class_id: l.class_id, score: l.score })
                .collect(),
            neighbors_used: pred.neighbors_used,
            final_label: None,
            cscore: None,
            reliable: None,
            theta: None,
            per_pass_votes: None,
            generation: serving.generation(),
            timing_ms: 0.0,
        })
    }

    /// The generation's perturbed libraries, built on first use.
    fn ensemble(&self, serving: &Serving) -> Result<Arc<Ensemble>> {
        if let Some(e) = serving.ensemble.get() {
            return Ok(e.clone());
        }
        let ens = &self.config.ensemble;
        let spec = EnsembleSpec::new(ens.passes, ens.mask_rate, ens.seed)?;
        let built = Arc::new(Ensemble::build(&serving.snapshot, &spec)?);
        // a concurrent builder may have won; both results are identical
        Ok(serving.ensemble.get_or_init(|| built).clone())
    }

    /// Similar cases from the configured store, or from the serving
    /// library when none is configured.
    pub fn retrieve(&self, query: &QueryInput, k: Option<usize>) -> Result<RetrieveResponse> {
        let start = Instant::now();
        let k = k.unwrap_or(refdx_core::retrieval::DEFAULT_CASES);
        let e = self.embed(query)?;
        let store = match &self.case_store {
            Some(s) => s.clone(),
            None => {
                let serving = self.current();
                let store = match serving.cases.get() {
                    Some(s) => s.clone(),
                    None => {
                        let built = Arc::new(CaseStore::new(&serving.snapshot, &HashMap::new())?);
                        serving.cases.get_or_init(|| built).clone()
                    }
                };
                store
            }
        };
        let cases = retrieve_cases(&store, &e, k)?;
        Ok(RetrieveResponse { cases, generation: store.generation(), timing_ms: elapsed_ms(start) })
    }

    /// Merges site records into the library and publishes the next generation.
    pub fn augment(&self, site_id: &str, records: &[ManifestRecord]) -> Result<AugmentResponse> {
        if site_id.trim().is_empty() {
            return Err(ServiceError::BadRequest("site_id must not be empty".into()));
        }
        let _guard = self.writer.lock().unwrap();
        let cur = self.current();
        let local = augment::ingest_local_records(records, &cur.snapshot, site_id)?;
        let added = local.len();
        let merged = augment::merge(&cur.snapshot, local)?;
        let mut registry = cur.registry.clone();
        registry.record_merge(site_id, added, merged.generation());
        let next = Arc::new(Serving::new(merged, registry)?);
        let resp = AugmentResponse {
            site_id: site_id.to_string(),
            added,
            old_generation: cur.generation(),
            new_generation: next.generation(),
            items: next.snapshot.len(),
        };
        *self.current.write().unwrap() = next;
        Ok(resp)
    }

    pub fn augment_from_manifest(&self, site_id: &str, path: &Path) -> Result<AugmentResponse> {
        self.augment(site_id, &read_manifest(path)?)
    }

    /// Computes θ* and, unless `apply` is false, publishes it. Engines
    /// opened from files also write it to the state file.
    pub fn calibrate(&self, req: &CalibrateRequest) -> Result<CalibrateResponse> {
        let _guard = self.writer.lock().unwrap();
        let serving = self.current();
        let scored = match (&req.scored, &req.validation, &req.validation_manifest) {
            (Some(s), None, None) => s.clone(),
            (None, Some(records), None) => self.score_validation(&serving, records)?,
            (None, None, Some(path)) => self.score_validation(&serving, &read_manifest(path)?)?,
            _ => {
                return Err(ServiceError::BadRequest(
                    "provide exactly one of `scored`, `validation` or `validation_manifest`".into(),
                ))
            }
        };
        let calibration = calibrate_threshold(&scored)?;
        let applied = req.apply.unwrap_or(true);
        if applied {
            if self.persist_state {
                let state =
                    EngineState { theta_star: Some(calibration.theta_star), calibrated_generation: Some(serving.generation()) };
                state.save(&self.config.state_file())?;
            }
            *self.theta.write().unwrap() = Some(calibration.theta_star);
        }
        Ok(CalibrateResponse { calibration, generation: serving.generation(), applied })
    }

    fn score_validation(&self, serving: &Serving, records: &[ManifestRecord]) -> Result<Vec<ScoredPrediction>> {
        let (queries, truths) = self.labeled(records)?;
        let ensemble = self.ensemble(serving)?;
        queries
            .iter()
            .zip(truths)
            .map(|(q, truth)| {
                let r = ensemble.predict(q, self.config.k_neighbors)?;
                Ok(ScoredPrediction { cscore: r.cscore, correct: truth == Some(r.final_class) })
            })
            .collect()
    }

    /// Normalized vectors and resolved labels (`None` for null labels).
    fn labeled(&self, records: &[ManifestRecord]) -> Result<(Vec<Embedding>, Vec<Option<ClassId>>)> {
        let serving = self.current();
        let catalog = serving.snapshot.catalog();
        let dim = serving.index.dim();
        let mut queries = Vec::with_capacity(records.len());
        let mut truths = Vec::with_capacity(records.len());
        for r in records {
            if r.vector.len() != dim {
                return Err(refdx_core::Error::DimMismatch { expected: dim, found: r.vector.len() }.into());
            }
            queries.push(refdx_core::normalize(&r.vector)?);
            truths.push(r.label.as_deref().map(|l| catalog.resolve(l)).transpose()?);
        }
        Ok((queries, truths))
    }

    /// Evaluates labeled records against the serving generation.
    pub fn evaluate_records(&self, records: &[ManifestRecord], cutoffs: &[usize]) -> Result<MetricsReport> {
        let (queries, truths) = self.labeled(records)?;
        let truths = truths
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| ServiceError::BadRequest("evaluation records need labels".into()))?;
        self.evaluate_embedded(&self.current(), &queries, &truths, cutoffs)
    }

    fn evaluate_embedded(
        &self,
        serving: &Serving,
        queries: &[Embedding],
        truths: &[ClassId],
        cutoffs: &[usize],
    ) -> Result<MetricsReport> {
        let n = cutoffs.iter().copied().max().unwrap_or(1);
        let preds = queries
            .iter()
            .map(|q| predict(q, &serving.index, self.config.k_neighbors, n))
            .collect::<refdx_core::Result<Vec<_>>>()?;
        Ok(evaluate(&preds, truths, cutoffs, serving.snapshot.catalog().len())?)
    }

    /// Default cutoffs limited to the number of classes.
    pub fn default_cutoffs(&self) -> Vec<usize> {
        let classes = self.current().snapshot.catalog().len();
        DEFAULT_CUTOFFS.iter().copied().filter(|&k| k <= classes.max(1)).collect()
    }

    pub fn metrics(&self) -> Result<MetricsResponse> {
        let serving = self.current();
        let evaluation = match &self.evaluation {
            None => None,
            Some(ev) => {
                let mut cache = self.eval_cache.lock().unwrap();
                match cache.as_ref() {
                    Some((g, report)) if *g == serving.generation() => Some(report.clone()),
                    _ => {
                        let report = self.evaluate_embedded(&serving, &ev.queries, &ev.truths, &self.default_cutoffs())?;
                        *cache = Some((serving.generation(), report.clone()));
                        Some(report)
                    }
                }
            }
        };
        Ok(MetricsResponse {
            generation: serving.generation(),
            evaluation,
            requests: self.requests.lock().unwrap().clone(),
        })
    }

    pub fn health(&self) -> HealthResponse {
        let serving = self.current();
        let snap = &serving.snapshot;
        HealthResponse {
            status: "ok".into(),
            generation: snap.generation(),
            dim: snap.dim(),
            items: snap.len(),
            by_provenance: ProvenanceCounts {
                base: snap.count_by_provenance(Provenance::Base),
                local: snap.count_by_provenance(Provenance::Local),
            },
            by_source: snap.count_by_source(),
            classes: snap.catalog().names().to_vec(),
            sites: serving.registry.clone(),
            theta_star: self.theta(),
        }
    }
}

fn class_name(catalog: &refdx_core::LabelCatalog, id: ClassId) -> String {
    catalog.name(id).map_or_else(|| format!("#{id}"), str::to_string)
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// A `.jsonl` path is read as a manifest whose `ref` fields become
/// external references; anything else as a binary library.
pub fn load_case_store(path: &Path, dim: usize) -> Result<CaseStore> {
    let is_manifest = path.extension().is_some_and(|e| e == "jsonl" || e == "json");
    if is_manifest {
        let records = read_manifest(path)?;
        let refs: HashMap<u64, String> = records
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.external_ref.clone().map(|x| (r.id.unwrap_or(i as u64), x)))
            .collect();
        let unlabeled: Vec<ManifestRecord> = records.into_iter().map(|r| ManifestRecord { label: None, ..r }).collect();
        let snapshot =
            refdx_core::manifest::library_from_records(&unlabeled, Some(refdx_core::LabelCatalog::empty()))?;
        if snapshot.dim() != dim {
            return Err(refdx_core::Error::DimMismatch { expected: dim, found: snapshot.dim() }.into());
        }
        Ok(CaseStore::new(&snapshot, &refs)?)
    } else {
        let opts = LoadOptions { expected_dim: Some(dim), ..LoadOptions::default() };
        Ok(CaseStore::new(&load_library_with(path, opts)?, &HashMap::new())?)
    }
}
