//! Command-line interface. Every subcommand is a thin layer over
//! [`Engine`] or the harness, so CLI and HTTP results agree.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use refdx_core::augment;
use refdx_core::confidence::ScoredPrediction;
use refdx_core::diagnosis::MetricsReport;
use refdx_core::format::{load_library, save_library};
use refdx_core::manifest::{library_from_records, read_manifest, ManifestRecord};
use refdx_core::retrieval::{topk_hit_rate, HitRates, ReviewSheet};
use refdx_harness::{run_experiment, ExperimentReport, RunOptions};
use serde::Serialize;
use serde_json::Value;

use crate::config::EngineConfig;
use crate::engine::{
    load_case_store, CalibrateRequest, CalibrateResponse, DiagnoseOptions, DiagnosisResponse, Engine, QueryInput,
    RetrieveResponse,
};
use crate::error::{Result, ServiceError};
use crate::review::DecisionLog;

#[derive(Debug, Parser)]
#[command(name = "refdx", version, about = "Retrieval-based diagnosis over embedding reference libraries")]
pub struct Cli {
    /// Engine config (TOML). For `harness run`, the experiment config (JSON or TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for the ensemble, experiments and generated data.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Neighbors retrieved per query.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Ranked labels reported per query.
    #[arg(long, global = true)]
    pub n: Option<usize>,
    /// Confidence threshold; overrides the calibrated one.
    #[arg(long, global = true)]
    pub theta: Option<f64>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
}

#[derive(Debug, Args)]
pub struct LibraryArg {
    /// Library file; defaults to `library_path` from the config.
    #[arg(long)]
    pub library: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a JSON-lines manifest into a binary library, or merge a site
    /// manifest into an existing library with --base and --site.
    Ingest {
        manifest: PathBuf,
        out: PathBuf,
        #[arg(long, requires = "site")]
        base: Option<PathBuf>,
        #[arg(long, requires = "base")]
        site: Option<String>,
    },
    /// Load a library, build its index and print a summary.
    Build {
        #[command(flatten)]
        lib: LibraryArg,
    },
    /// Diagnose the queries of a JSON-lines manifest, or one PNG/JPEG image.
    Diagnose {
        #[command(flatten)]
        lib: LibraryArg,
        queries: PathBuf,
        /// Add ensemble confidence and the reliability flag.
        #[arg(long)]
        confident: bool,
    },
    /// Pick θ* from a scored file or by scoring a validation manifest.
    Calibrate {
        #[command(flatten)]
        lib: LibraryArg,
        /// JSON array of {"cscore", "correct"}.
        #[arg(long, conflicts_with = "validation", required_unless_present = "validation")]
        scored: Option<PathBuf>,
        /// Labeled manifest; null labels count as out-of-distribution.
        #[arg(long)]
        validation: Option<PathBuf>,
        /// Print θ* without writing the state file.
        #[arg(long)]
        dry_run: bool,
    },
    /// Similar cases for each query.
    Retrieve {
        #[command(flatten)]
        lib: LibraryArg,
        /// Case store (library or manifest); defaults to the config's, then the library.
        #[arg(long)]
        store: Option<PathBuf>,
        queries: PathBuf,
        #[arg(long, default_value_t = refdx_core::retrieval::DEFAULT_CASES)]
        cases: usize,
    },
    /// Top-k accuracy, recall and confusion on a labeled manifest.
    Eval {
        #[command(flatten)]
        lib: LibraryArg,
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',')]
        cutoffs: Option<Vec<usize>>,
    },
    /// Serve the HTTP API.
    Serve {
        #[command(flatten)]
        lib: LibraryArg,
        #[arg(long)]
        listen: Option<String>,
    },
    /// Synthetic experiments.
    Harness {
        #[command(subcommand)]
        action: HarnessCommand,
    },
    /// Reviewer files.
    Review {
        #[command(subcommand)]
        action: ReviewCommand,
    },
    /// Write a self-contained demo bundle.
    DemoBundle { dir: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum HarnessCommand {
    /// Run one experiment and print its report.
    Run {
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the metric table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Use all cores; reported numbers do not change.
        #[arg(long)]
        parallel: bool,
        /// Exit with status 3 when any check fails.
        #[arg(long)]
        require_pass: bool,
    },
    /// List experiment names.
    List,
}

#[derive(Debug, Subcommand)]
pub enum ReviewCommand {
    /// Top-k hit rates of a review sheet.
    HitRate {
        sheet: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,10")]
        cutoffs: Vec<usize>,
    },
    /// Validate a review-queue decision log.
    CheckLog { log: PathBuf },
}

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CHECKS_FAILED: i32 = 3;

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut out = std::io::stdout().lock();
    match run(&cli, &mut out) {
        Ok(code) => code,
        // Output piped into `head` and closed early.
        Err(ServiceError::Io { source, .. }) if source.kind() == std::io::ErrorKind::BrokenPipe => 0,
        Err(e) => {
            let _ = out.flush();
            eprintln!("{}", serde_json::to_string(&e.body()).expect("error serializes"));
            EXIT_RUNTIME
        }
    }
}

/// Runs a parsed command, writing results to `out`.
pub fn run(cli: &Cli, out: &mut dyn std::io::Write) -> Result<i32> {
    let mut emit = |text: String| -> Result<()> {
        writeln!(out, "{}", text.trim_end()).map_err(|e| ServiceError::io("stdout", e))
    };
    match &cli.command {
        Command::Ingest { manifest, out: path, base, site } => {
            let records = read_manifest(manifest)?;
            let snapshot = match (base, site) {
                (Some(base), Some(site)) => {
                    let base = load_library(base)?;
                    let local = augment::ingest_local_records(&records, &base, site)?;
                    augment::merge(&base, local)?
                }
                _ => library_from_records(&records, None)?,
            };
            save_library(&snapshot, path)?;
            let summary = serde_json::json!({
                "library": path,
                "items": snapshot.len(),
                "dim": snapshot.dim(),
                "classes": snapshot.catalog().names(),
                "by_source": snapshot.count_by_source(),
            });
            emit(render(cli.format, &summary, |_| kv_table(&summary)))?;
        }
        Command::Build { lib } => {
            let engine = open_engine(cli, lib)?;
            let health = engine.health();
            emit(render(cli.format, &health, |h| {
                let v = serde_json::to_value(h).expect("json");
                kv_table(&v)
            }))?;
        }
        Command::Diagnose { lib, queries, confident } => {
            let engine = open_engine(cli, lib)?;
            let opts = DiagnoseOptions { k: cli.k, n: cli.n, theta: cli.theta };
            let mut results = Vec::new();
            for (id, query) in load_queries(queries)? {
                let resp =
                    if *confident { engine.diagnose_confident(&query, &opts)? } else { engine.diagnose(&query, &opts)? };
                results.push(QueryResult { query_id: id, response: resp });
            }
            emit(render(cli.format, &results, diagnosis_table))?;
        }
        Command::Calibrate { lib, scored, validation, dry_run } => {
            let engine = open_engine(cli, lib)?;
            let req = match (scored, validation) {
                (Some(path), _) => CalibrateRequest { scored: Some(read_scored(path)?), ..Default::default() },
                (None, Some(path)) => CalibrateRequest { validation_manifest: Some(path.clone()), ..Default::default() },
                (None, None) => unreachable!("clap requires one of --scored or --validation"),
            };
            let req = CalibrateRequest { apply: Some(!dry_run), ..req };
            let resp = engine.calibrate(&req)?;
            emit(render(cli.format, &resp, calibration_table))?;
        }
        Command::Retrieve { lib, store, queries, cases } => {
            let mut engine = open_engine(cli, lib)?;
            if let Some(store) = store {
                let dim = engine.dim();
                engine = engine.with_case_store(load_case_store(store, dim)?);
            }
            let mut results = Vec::new();
            for (id, query) in load_queries(queries)? {
                results.push(QueryResult { query_id: id, response: engine.retrieve(&query, Some(*cases))? });
            }
            emit(render(cli.format, &results, retrieval_table))?;
        }
        Command::Eval { lib, manifest, cutoffs } => {
            let engine = open_engine(cli, lib)?;
            let cutoffs = cutoffs.clone().unwrap_or_else(|| engine.default_cutoffs());
            let report = engine.evaluate_records(&read_manifest(manifest)?, &cutoffs)?;
            emit(render(cli.format, &report, metrics_table))?;
        }
        Command::Serve { lib, listen } => {
            let mut config = engine_config(cli, lib)?;
            if let Some(addr) = listen {
                config.listen_address = addr.clone();
            }
            let engine = Arc::new(Engine::open(config)?);
            let rt = tokio::runtime::Runtime::new().map_err(|e| ServiceError::io("runtime", e))?;
            rt.block_on(crate::api::serve(engine))?;
        }
        Command::Harness { action: HarnessCommand::List } => {
            let names = refdx_harness::EXPERIMENTS;
            emit(render(cli.format, &names, |n| n.join("\n")))?;
        }
        Command::Harness { action: HarnessCommand::Run { name, out: report_path, csv, parallel, require_pass } } => {
            let config = match &cli.config {
                Some(path) => read_experiment_config(path)?,
                None => Value::Null,
            };
            let report = run_experiment(name, &config, &RunOptions { seed: cli.seed, parallel: *parallel })?;
            if let Some(path) = report_path {
                let text = serde_json::to_string_pretty(&report).expect("report serializes");
                std::fs::write(path, text).map_err(|e| ServiceError::io(path.display().to_string(), e))?;
            }
            if let Some(path) = csv {
                std::fs::write(path, report.to_csv()).map_err(|e| ServiceError::io(path.display().to_string(), e))?;
            }
            emit(render(cli.format, &report, experiment_table))?;
            if *require_pass && !report.passed {
                return Ok(EXIT_CHECKS_FAILED);
            }
        }
        Command::Review { action: ReviewCommand::HitRate { sheet, cutoffs } } => {
            let sheet: ReviewSheet = read_json(sheet)?;
            let rates = topk_hit_rate(&sheet, cutoffs)?;
            emit(render(cli.format, &rates, hit_rate_table))?;
        }
        Command::Review { action: ReviewCommand::CheckLog { log } } => {
            let log: DecisionLog = read_json(log)?;
            log.validate()?;
            let summary = serde_json::json!({"valid": true, "entries": log.entries.len()});
            emit(render(cli.format, &summary, |_| kv_table(&summary)))?;
        }
        Command::DemoBundle { dir } => {
            let summary = crate::demo::write_demo_bundle(dir, cli.seed.unwrap_or(7))?;
            emit(render(cli.format, &summary, |s| {
                let v = serde_json::to_value(s).expect("json");
                kv_table(&v)
            }))?;
        }
    }
    Ok(0)
}

/// Config file (if any), then `ENGINE_*` variables, then flags.
pub fn engine_config(cli: &Cli, lib: &LibraryArg) -> Result<EngineConfig> {
    let mut config = match &cli.config {
        Some(path) => EngineConfig::load(path)?,
        None => EngineConfig::default(),
    };
    config.apply_env(std::env::vars())?;
    if let Some(path) = &lib.library {
        config.library_path = path.clone();
    }
    if let Some(seed) = cli.seed {
        config.ensemble.seed = seed;
    }
    if let Some(k) = cli.k {
        config.k_neighbors = k;
    }
    if let Some(n) = cli.n {
        config.top_n = n;
    }
    config.validate()?;
    Ok(config)
}

fn open_engine(cli: &Cli, lib: &LibraryArg) -> Result<Engine> {
    Engine::open(engine_config(cli, lib)?)
}

#[derive(Debug, Serialize)]
struct QueryResult<T> {
    query_id: Option<u64>,
    #[serde(flatten)]
    response: T,
}

/// A `.png`/`.jpg`/`.jpeg` file is one image query; anything else is read
/// as a JSON-lines manifest of vectors.
fn load_queries(path: &Path) -> Result<Vec<(Option<u64>, QueryInput)>> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
        use base64::Engine as _;
        let bytes = std::fs::read(path).map_err(|e| ServiceError::io(path.display().to_string(), e))?;
        let image = base64::engine::general_purpose::STANDARD.encode(bytes);
        return Ok(vec![(None, QueryInput { vector: None, image: Some(image) })]);
    }
    let records: Vec<ManifestRecord> = read_manifest(path)?;
    Ok(records.into_iter().map(|r| (r.id, QueryInput::vector(r.vector))).collect())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| ServiceError::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| ServiceError::BadRequest(format!("{}: {e}", path.display())))
}

fn read_scored(path: &Path) -> Result<Vec<ScoredPrediction>> {
    read_json(path)
}

fn read_experiment_config(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| ServiceError::io(path.display().to_string(), e))?;
    if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| ServiceError::Config(e.to_string()))
    } else {
        serde_json::from_str(&text).map_err(|e| ServiceError::Config(e.to_string()))
    }
}

fn render<T: Serialize>(format: Format, value: &T, table: impl FnOnce(&T) -> String) -> String {
    match format {
        Format::Json => serde_json::to_string_pretty(value).expect("output serializes"),
        Format::Table => table(value),
    }
}

fn kv_table(v: &Value) -> String {
    let mut s = String::new();
    if let Value::Object(map) = v {
        let width = map.keys().map(String::len).max().unwrap_or(0);
        for (k, v) in map {
            let shown = match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            let _ = writeln!(s, "{k:<width$}  {shown}");
        }
    }
    s
}

fn diagnosis_table(results: &Vec<QueryResult<DiagnosisResponse>>) -> String {
    let mut s = String::new();
    for r in results {
        let id = r.query_id.map_or_else(|| "-".to_string(), |i| i.to_string());
        let d = &r.response;
        let _ = write!(s, "query {id}  generation {}", d.generation);
        if let (Some(c), Some(label)) = (d.cscore, &d.final_label) {
            let _ = write!(s, "  final {label}  cscore {c:.3}  reliable {}", d.reliable.unwrap_or(false));
        }
        s.push('\n');
        for (rank, l) in d.ranked_labels.iter().enumerate() {
            let _ = writeln!(s, "  {:>2}  {:<24} {:.6}", rank + 1, l.label, l.score);
        }
    }
    s
}

fn retrieval_table(results: &Vec<QueryResult<RetrieveResponse>>) -> String {
    let mut s = String::new();
    for r in results {
        let id = r.query_id.map_or_else(|| "-".to_string(), |i| i.to_string());
        let _ = writeln!(s, "query {id}");
        for (rank, c) in r.response.cases.iter().enumerate() {
            let _ = writeln!(s, "  {:>2}  {:>8}  {:.6}  {}", rank + 1, c.hit.item_id, c.hit.score, c.meta.external_ref);
        }
    }
    s
}

fn calibration_table(r: &CalibrateResponse) -> String {
    let c = &r.calibration;
    let mut s = format!(
        "theta*  {}\nJ*      {}\ncorrect {}  incorrect {}  applied {}\n\n{:>10}  {:>11}  {:>11}  {:>8}\n",
        c.theta_star, c.j_star, c.positives, c.negatives, r.applied, "theta", "sensitivity", "specificity", "J"
    );
    for p in &c.curve {
        let _ = writeln!(s, "{:>10.6}  {:>11.4}  {:>11.4}  {:>8.4}", p.theta, p.sensitivity, p.specificity, p.j);
    }
    s
}

fn metrics_table(m: &MetricsReport) -> String {
    let mut s = format!("samples {}\n", m.n_samples);
    for (k, acc) in &m.top_k_accuracy {
        let _ = writeln!(s, "top-{k:<3} accuracy {acc:.4}  macro recall {:.4}", m.macro_recall[k]);
    }
    s
}

fn hit_rate_table(r: &HitRates) -> String {
    let mut s = String::new();
    for (k, v) in &r.average {
        let _ = writeln!(s, "top-{k:<3} {v:.4}");
    }
    s
}

fn experiment_table(r: &ExperimentReport) -> String {
    let mut s = format!("{} (seed {})  {}\n", r.name, r.seed, if r.passed { "PASS" } else { "FAIL" });
    for c in &r.checks {
        let _ = writeln!(s, "  [{}] {} = {} ({})", if c.passed { "pass" } else { "FAIL" }, c.name, c.observed, c.bound);
    }
    for m in &r.metrics {
        let _ = writeln!(s, "  {}.{}.{} = {}", m.table, m.row, m.column, m.value);
    }
    s
}
