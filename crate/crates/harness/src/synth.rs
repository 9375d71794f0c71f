//! Seeded Gaussian clusters around well-separated unit centroids.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use refdx_core::manifest::ManifestRecord;
use refdx_core::normalize;
use serde::{Deserialize, Serialize};

use crate::{HarnessError, Result};

const MAX_PLACEMENT_ATTEMPTS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterSpec {
    pub n_classes: usize,
    pub ref_per_class: usize,
    pub query_per_class: usize,
    pub dim: usize,
    /// Minimum angle between any two centroids, in degrees.
    pub min_angle_deg: f64,
    /// Per-coordinate standard deviation of the Gaussian noise added to the
    /// centroid before normalization.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            n_classes: 11,
            ref_per_class: 200,
            query_per_class: 50,
            dim: 512,
            min_angle_deg: 60.0,
            sigma: 0.05,
            seed: 7,
        }
    }
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.dim < 2 {
            return Err(HarnessError::Config("need at least one class and dim >= 2".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(HarnessError::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_classes).map(class_name).collect()
    }
}

pub fn class_name(i: usize) -> String {
    format!("class-{i:02}")
}

/// Generated reference and query manifests; query labels are the truths.
#[derive(Debug, Clone)]
pub struct ClusterData {
    pub class_names: Vec<String>,
    pub centroids: Vec<Vec<f32>>,
    pub reference: Vec<ManifestRecord>,
    pub queries: Vec<ManifestRecord>,
}

pub fn gen_clusters(spec: &ClusterSpec) -> Result<ClusterData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centroids = place_centroids(&mut rng, spec.n_classes, spec.dim, spec.min_angle_deg, &[], 0.0)?;
    let names = spec.class_names();

    let mut reference = Vec::with_capacity(spec.n_classes * spec.ref_per_class);
    let mut queries = Vec::with_capacity(spec.n_classes * spec.query_per_class);
    for (c, centroid) in centroids.iter().enumerate() {
        for _ in 0..spec.ref_per_class {
            let id = reference.len() as u64;
            let v = sample_point(&mut rng, centroid, spec.sigma);
            reference.push(ManifestRecord::new(id, Some(&names[c]), "base", v));
        }
    }
    for (c, centroid) in centroids.iter().enumerate() {
        for _ in 0..spec.query_per_class {
            let id = queries.len() as u64;
            let v = sample_point(&mut rng, centroid, spec.sigma);
            queries.push(ManifestRecord::new(id, Some(&names[c]), "query", v));
        }
    }
    Ok(ClusterData { class_names: names, centroids, reference, queries })
}

pub fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
        if let Ok(e) = normalize(&v) {
            return e.into_values();
        }
    }
}

/// Rejection-samples `n` unit centroids at least `min_angle_deg` apart from
/// each other and from `existing`, and at Euclidean distance at least
/// `min_distance` from every vector in `existing`.
pub fn place_centroids<R: Rng>(
    rng: &mut R,
    n: usize,
    dim: usize,
    min_angle_deg: f64,
    existing: &[Vec<f32>],
    min_distance: f64,
) -> Result<Vec<Vec<f32>>> {
    let max_cos = min_angle_deg.to_radians().cos();
    let mut placed: Vec<Vec<f32>> = Vec::with_capacity(n);
    let mut attempts = 0;
    while placed.len() < n {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(HarnessError::CentroidPlacementFailed { placed: placed.len(), wanted: n, attempts });
        }
        let c = random_unit(rng, dim);
        let far_from_existing = existing.iter().all(|e| {
            let cos = cosine(&c, e);
            cos <= max_cos && (2.0 - 2.0 * cos).max(0.0).sqrt() >= min_distance
        });
        if far_from_existing && placed.iter().all(|p| cosine(&c, p) <= max_cos) {
            placed.push(c);
        }
    }
    Ok(placed)
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// `normalize(centroid + N(0, sigma^2 I))`.
pub fn sample_point<R: Rng>(rng: &mut R, centroid: &[f32], sigma: f64) -> Vec<f32> {
    loop {
        let v: Vec<f32> = centroid
            .iter()
            .map(|&c| (c as f64 + sigma * rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect();
        if let Ok(e) = normalize(&v) {
            return e.into_values();
        }
    }
}

/// `normalize(v + offset)`.
pub fn shifted(v: &[f32], offset: &[f32]) -> Vec<f32> {
    let s: Vec<f32> = v.iter().zip(offset).map(|(a, b)| a + b).collect();
    normalize(&s).map(|e| e.into_values()).unwrap_or_else(|_| v.to_vec())
}
