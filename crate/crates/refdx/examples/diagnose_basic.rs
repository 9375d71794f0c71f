//! Diagnose synthetic queries against a labeled reference library.

use refdx_core::diagnosis::{predict, DEFAULT_K, DEFAULT_TOP_N};
use refdx_core::manifest::library_from_records;
use refdx_core::{normalize, VectorIndex};
use refdx_harness::{gen_clusters, ClusterSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = gen_clusters(&ClusterSpec { dim: 128, sigma: 0.12, ..ClusterSpec::default() })?;
    let library = library_from_records(&data.reference, None)?;
    let index = VectorIndex::build(&library)?;
    println!("library: {} items, {} classes, dim {}", library.len(), library.catalog().len(), library.dim());

    let mut correct = 0;
    for q in &data.queries {
        let pred = predict(&normalize(&q.vector)?, &index, DEFAULT_K, DEFAULT_TOP_N)?;
        let top = library.catalog().name(pred.top1()).unwrap();
        correct += usize::from(Some(top) == q.label.as_deref());
    }
    println!("top-1 accuracy: {:.3}", correct as f64 / data.queries.len() as f64);

    let q = &data.queries[0];
    let pred = predict(&normalize(&q.vector)?, &index, DEFAULT_K, DEFAULT_TOP_N)?;
    println!("query 0 (truth {}):", q.label.as_deref().unwrap_or("?"));
    for l in &pred.ranked_labels {
        println!("  {:<10} {:.4}", library.catalog().name(l.class_id).unwrap(), l.score);
    }
    Ok(())
}
