//! Samples from conditions absent from the library should fall below the
//! confidence threshold and be flagged.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refdx_core::confidence::{ood_detection_rate, Ensemble, EnsembleSpec};
use refdx_core::manifest::library_from_records;
use refdx_core::normalize;
use refdx_harness::synth::{place_centroids, sample_point};
use refdx_harness::{gen_clusters, ClusterSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = ClusterSpec { n_classes: 8, ref_per_class: 80, query_per_class: 40, dim: 64, sigma: 0.15, ..ClusterSpec::default() };
    let data = gen_clusters(&spec)?;
    let library = library_from_records(&data.reference, None)?;
    let ensemble = Ensemble::build(&library, &EnsembleSpec::new(100, 0.1, 2)?)?;

    let mut by_category = BTreeMap::new();
    by_category.insert(
        "in-distribution".to_string(),
        data.queries.iter().map(|q| ensemble.predict(&normalize(&q.vector)?, 1)).collect::<Result<Vec<_>, _>>()?,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for (i, c) in place_centroids(&mut rng, 3, spec.dim, 60.0, &data.centroids, 6.0 * spec.sigma)?.iter().enumerate() {
        let reports = (0..40)
            .map(|_| ensemble.predict(&normalize(&sample_point(&mut rng, c, spec.sigma))?, 1))
            .collect::<Result<Vec<_>, _>>()?;
        by_category.insert(format!("unseen-{i}"), reports);
    }
    // a higher threshold flags more unseen cases and more ordinary ones
    for theta in [0.9, 0.97, 1.0] {
        println!("theta {theta}");
        for (cat, rate) in ood_detection_rate(&by_category, theta)? {
            println!("  {cat:<16} flagged {:5.1}%", rate * 100.0);
        }
    }
    Ok(())
}
