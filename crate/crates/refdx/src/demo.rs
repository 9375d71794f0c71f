//! A small self-contained bundle for trying the CLI and the service.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refdx_core::format::save_library;
use refdx_core::manifest::{library_from_records, write_manifest, ManifestRecord};
use refdx_core::LabelCatalog;
use refdx_harness::synth::{gen_clusters, place_centroids, sample_point, ClusterSpec};
use serde::{Deserialize, Serialize};

use crate::config::EngineConfig;
use crate::error::{Result, ServiceError};

pub const LIBRARY: &str = "library.grdl";
pub const QUERIES: &str = "queries.jsonl";
pub const VALIDATION: &str = "validation.jsonl";
pub const SITE: &str = "site.jsonl";
pub const CASES: &str = "cases.jsonl";
pub const SCORED: &str = "scored.json";
pub const CONFIG: &str = "engine.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSummary {
    pub dir: PathBuf,
    pub files: Vec<String>,
    pub classes: usize,
    pub dim: usize,
    pub library_items: usize,
    pub seed: u64,
}

/// Writes library, queries, validation (with unlabeled outliers), a
/// site manifest, a case store with external references, a scored file
/// and an `engine.toml` pointing at them.
pub fn write_demo_bundle(dir: &Path, seed: u64) -> Result<BundleSummary> {
    std::fs::create_dir_all(dir).map_err(|e| ServiceError::io(dir.display().to_string(), e))?;
    let spec = ClusterSpec { n_classes: 6, ref_per_class: 40, query_per_class: 5, dim: 64, sigma: 0.12, seed, ..ClusterSpec::default() };
    let data = gen_clusters(&spec)?;
    let catalog = LabelCatalog::new(data.class_names.clone())?;
    let library = library_from_records(&data.reference, Some(catalog))?;
    save_library(&library, dir.join(LIBRARY))?;
    write_manifest(&data.queries, dir.join(QUERIES))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut validation = Vec::new();
    for (c, centroid) in data.centroids.iter().enumerate() {
        for _ in 0..8 {
            let v = sample_point(&mut rng, centroid, spec.sigma);
            validation.push(ManifestRecord::new(validation.len() as u64, Some(&data.class_names[c]), "validation", v));
        }
    }
    for centroid in place_centroids(&mut rng, 2, spec.dim, spec.min_angle_deg, &data.centroids, 6.0 * spec.sigma)? {
        for _ in 0..8 {
            let v = sample_point(&mut rng, &centroid, spec.sigma);
            validation.push(ManifestRecord::new(validation.len() as u64, None, "outlier", v));
        }
    }
    write_manifest(&validation, dir.join(VALIDATION))?;

    let site: Vec<ManifestRecord> = (0..25)
        .map(|i| {
            let c = i % data.centroids.len();
            ManifestRecord::new(i as u64, Some(&data.class_names[c]), "site-a", sample_point(&mut rng, &data.centroids[c], spec.sigma))
        })
        .collect();
    write_manifest(&site, dir.join(SITE))?;

    let cases: Vec<ManifestRecord> = (0..200u64)
        .map(|i| {
            let c = rng.random_range(0..data.centroids.len());
            let mut r = ManifestRecord::new(i, None, "archive", sample_point(&mut rng, &data.centroids[c], spec.sigma));
            r.external_ref = Some(format!("archive/case-{i:04}.png"));
            r
        })
        .collect();
    write_manifest(&cases, dir.join(CASES))?;

    let scored = serde_json::json!([
        {"cscore": 0.8, "correct": true},
        {"cscore": 0.6, "correct": true},
        {"cscore": 0.7, "correct": false},
        {"cscore": 0.3, "correct": false}
    ]);
    write(dir.join(SCORED), &serde_json::to_string_pretty(&scored).expect("json"))?;

    let config = EngineConfig {
        library_path: LIBRARY.into(),
        case_store_path: Some(CASES.into()),
        eval_manifest_path: Some(QUERIES.into()),
        dim: Some(spec.dim),
        ..EngineConfig::default()
    };
    write(dir.join(CONFIG), &config.to_toml())?;

    Ok(BundleSummary {
        dir: dir.to_path_buf(),
        files: [LIBRARY, QUERIES, VALIDATION, SITE, CASES, SCORED, CONFIG].map(String::from).to_vec(),
        classes: spec.n_classes,
        dim: spec.dim,
        library_items: library.len(),
        seed,
    })
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| ServiceError::io(path.display().to_string(), e))
}
