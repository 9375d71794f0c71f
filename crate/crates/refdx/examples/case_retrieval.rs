//! Similar-case lookup in an unlabeled archive, with simulated reviewer
//! verdicts scored as top-k hit rates.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refdx_core::manifest::{library_from_records, ManifestRecord};
use refdx_core::retrieval::{retrieve_cases, topk_hit_rate, CaseStore, ReviewSheet, ReviewedQuery};
use refdx_core::{normalize, LabelCatalog};
use refdx_harness::{gen_clusters, ClusterSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = gen_clusters(&ClusterSpec { dim: 64, sigma: 0.3, query_per_class: 5, ..ClusterSpec::default() })?;
    let archive: Vec<ManifestRecord> = data.reference.iter().map(|r| ManifestRecord { label: None, ..r.clone() }).collect();
    let snapshot = library_from_records(&archive, Some(LabelCatalog::empty()))?;
    let refs: HashMap<u64, String> = snapshot.items().iter().map(|i| (i.item_id, format!("archive/{:05}.png", i.item_id))).collect();
    let store = CaseStore::new(&snapshot, &refs)?;
    // hidden truth, known only to the simulated reviewers
    let truth: HashMap<u64, &str> = data.reference.iter().map(|r| (r.id.unwrap(), r.label.as_deref().unwrap())).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let reviewers = ["reviewer-a", "reviewer-b", "reviewer-c"];
    let mut queries = Vec::new();
    for (qi, q) in data.queries.iter().enumerate() {
        let cases = retrieve_cases(&store, &normalize(&q.vector)?, 10)?;
        if qi == 0 {
            for c in &cases[..3] {
                println!("{}  {:.4}", c.meta.external_ref, c.hit.score);
            }
        }
        let verdicts = reviewers
            .iter()
            .map(|_| cases.iter().map(|c| (truth[&c.hit.item_id] == q.label.as_deref().unwrap()) != rng.random_bool(0.1)).collect())
            .collect();
        queries.push(ReviewedQuery { query_id: qi.to_string(), candidates: cases.iter().map(|c| c.hit.item_id).collect(), verdicts });
    }
    let sheet = ReviewSheet { reviewers: reviewers.map(String::from).to_vec(), queries };
    let rates = topk_hit_rate(&sheet, &[1, 3, 5, 10])?;
    for (k, v) in &rates.average {
        println!("top-{k:<2} hit rate {v:.3}");
    }
    println!("{}", serde_json::to_string(&sheet.queries[0])?);
    Ok(())
}
