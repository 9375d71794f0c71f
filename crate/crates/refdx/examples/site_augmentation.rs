//! A site whose images are shifted away from the reference data adds a
//! few labeled examples of its own and recovers accuracy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refdx_core::augment::{compare_before_after, ingest_local_records, merge};
use refdx_core::manifest::{library_from_records, ManifestRecord};
use refdx_core::{normalize, VectorIndex};
use refdx_harness::synth::{sample_point, shifted};
use refdx_harness::{gen_clusters, ClusterSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = ClusterSpec { n_classes: 6, dim: 64, sigma: 0.08, ..ClusterSpec::default() };
    let data = gen_clusters(&spec)?;
    let base = library_from_records(&data.reference, None)?;

    // every image at the site is pulled toward the look of class 3
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let offset: Vec<f32> = data.centroids[3].iter().map(|x| x * 0.9).collect();
    let site = |c: usize, rng: &mut ChaCha8Rng| shifted(&sample_point(rng, &data.centroids[c], spec.sigma), &offset);

    let local: Vec<ManifestRecord> = (0..6 * 30)
        .map(|i| ManifestRecord::new(i as u64, Some(&data.class_names[i % 6]), "clinic", site(i % 6, &mut rng)))
        .collect();
    let merged = merge(&base, ingest_local_records(&local, &base, "clinic")?)?;
    println!("base {} items (generation {}), merged {} items (generation {})", base.len(), base.generation(), merged.len(), merged.generation());

    let mut queries = Vec::new();
    let mut truths = Vec::new();
    for i in 0..300 {
        queries.push(normalize(&site(i % 6, &mut rng))?);
        truths.push((i % 6) as u16);
    }
    let ba = compare_before_after(&VectorIndex::build(&base)?, &VectorIndex::build(&merged)?, &queries, &truths, &[1, 3], 30, 6)?;
    for k in [1, 3] {
        println!("top-{k}: {:.3} -> {:.3}", ba.before.top_k_accuracy[&k], ba.after.top_k_accuracy[&k]);
    }
    Ok(())
}
