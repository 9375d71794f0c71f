//! The engine against the harness's naive reimplementations.

use std::collections::{BTreeMap, HashMap};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refdx_core::confidence::{calibrate_threshold, ScoredPrediction};
use refdx_core::diagnosis::{aggregate_labels, evaluate, LabelScore, Prediction};
use refdx_core::manifest::{library_from_records, write_manifest, ManifestRecord};
use refdx_core::retrieval::{retrieve_cases, topk_hit_rate, CaseStore, ReviewSheet, ReviewedQuery};
use refdx_core::{normalize, Hit, LabelCatalog, LibrarySnapshot, Provenance, RankedHits, ReferenceItem, VectorIndex};
use refdx_harness::oracle::{count_oracle, hit_rate_oracle, knn_oracle, sweep_oracle};
use refdx_harness::synth::random_unit;
use refdx_harness::{gen_clusters, ClusterSpec};

fn unlabeled(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> LibrarySnapshot {
    let items = (0..n as u64)
        .map(|i| ReferenceItem::new(i * 2 + 5, normalize(&random_unit(rng, dim)).unwrap(), None, Provenance::Base, "store"))
        .collect();
    LibrarySnapshot::new(0, dim, LabelCatalog::empty(), items).unwrap()
}

fn assert_matches_oracle(hits: &[Hit], lib: &LibrarySnapshot, query: &[f32], k: usize) {
    let reference: Vec<(u64, &[f32])> = lib.items().iter().map(|i| (i.item_id, i.embedding.values())).collect();
    let expected = knn_oracle(&reference, query, k);
    let got: Vec<u64> = hits.iter().map(|h| h.item_id).collect();
    let want: Vec<u64> = expected.iter().map(|e| e.0).collect();
    assert_eq!(got, want);
    for (h, e) in hits.iter().zip(&expected) {
        assert!((h.score - e.1).abs() <= 1e-9, "{} vs {}", h.score, e.1);
    }
}

#[test]
fn knn_thousand_vectors_fifty_queries() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let lib = unlabeled(&mut rng, 1000, 48);
    let index = VectorIndex::build(&lib).unwrap();
    for _ in 0..50 {
        let q = normalize(&random_unit(&mut rng, 48)).unwrap();
        for k in [1, 3, 5, 10] {
            assert_matches_oracle(&index.search(&q, k).unwrap().entries, &lib, q.values(), k);
        }
    }
}

#[test]
fn knn_ties_follow_oracle_order() {
    // duplicated rows force exact score ties
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let base: Vec<Vec<f32>> = (0..20).map(|_| random_unit(&mut rng, 8)).collect();
    let items = (0..200u64)
        .map(|i| {
            let v = &base[rng.random_range(0..base.len())];
            ReferenceItem::new(1000 - i, normalize(v).unwrap(), None, Provenance::Base, "dup")
        })
        .collect();
    let lib = LibrarySnapshot::new(0, 8, LabelCatalog::empty(), items).unwrap();
    let index = VectorIndex::build(&lib).unwrap();
    for v in &base {
        let q = normalize(v).unwrap();
        assert_matches_oracle(&index.search(&q, 10).unwrap().entries, &lib, q.values(), 10);
    }
}

#[test]
fn retrieval_over_hundred_thousand_store() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let lib = unlabeled(&mut rng, 100_000, 32);
    let store = CaseStore::new(&lib, &HashMap::new()).unwrap();
    for _ in 0..5 {
        let q = normalize(&random_unit(&mut rng, 32)).unwrap();
        let cases = retrieve_cases(&store, &q, 10).unwrap();
        let hits: Vec<Hit> = cases.iter().map(|c| c.hit).collect();
        assert_matches_oracle(&hits, &lib, q.values(), 10);
        assert!(cases.iter().all(|c| c.meta.external_ref == format!("store/{}", c.hit.item_id)));
    }
}

/// Class totals by scanning the hit list once per class.
fn aggregation_oracle(hits: &[Hit], n: usize) -> Vec<(u16, f64)> {
    let mut classes: Vec<u16> = hits.iter().map(|h| h.class_id.unwrap()).collect();
    classes.sort();
    classes.dedup();
    let mut totals: Vec<(u16, f64)> = classes
        .iter()
        .map(|&c| {
            let mut members: Vec<&Hit> = hits.iter().filter(|h| h.class_id == Some(c)).collect();
            members.sort_by_key(|h| h.item_id);
            (c, members.iter().fold(0.0, |acc, h| acc + h.score.max(0.0)))
        })
        .collect();
    totals.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    totals.truncate(n);
    totals
}

#[test]
fn aggregation_two_hundred_lists() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..200 {
        let len = rng.random_range(1..40);
        let hits: Vec<Hit> = (0..len)
            .map(|i| Hit {
                item_id: i,
                class_id: Some(rng.random_range(0..6)),
                provenance: Provenance::Base,
                // coarse grid so class sums often tie
                score: (rng.random_range(-4..=10) as f64) / 10.0,
            })
            .collect();
        let n = rng.random_range(1..7);
        let got = aggregate_labels(&RankedHits { entries: hits.clone() }, n).unwrap();
        let got: Vec<(u16, f64)> = got.ranked_labels.iter().map(|l| (l.class_id, l.score)).collect();
        assert_eq!(got, aggregation_oracle(&hits, n));
    }
}

#[test]
fn counting_thousand_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let classes = 11usize;
    let mut ranked = Vec::new();
    let mut truths = Vec::new();
    for _ in 0..1000 {
        let mut order: Vec<u16> = (0..classes as u16).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        ranked.push(order);
        truths.push(rng.random_range(0..classes as u16));
    }
    let preds: Vec<Prediction> = ranked
        .iter()
        .map(|order| Prediction {
            ranked_labels: order.iter().map(|&c| LabelScore { class_id: c, score: 0.0 }).collect(),
            neighbors_used: classes,
        })
        .collect();
    let ks = [1, 3, 5, 10];
    let report = evaluate(&preds, &truths, &ks, classes).unwrap();
    let counted = count_oracle(&ranked, &truths, &ks);
    for k in ks {
        assert!((report.top_k_accuracy[&k] - counted.top_k_accuracy[&k]).abs() <= 1e-12);
        assert!((report.macro_recall[&k] - counted.macro_recall[&k]).abs() <= 1e-12);
        for (c, r) in &counted.per_class_recall[&k] {
            assert!((report.per_class_recall[&k][c] - r).abs() <= 1e-12);
        }
    }
}

#[test]
fn sweep_ten_thousand_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let pairs: Vec<(f64, bool)> =
        (0..10_000).map(|_| (rng.random_range(0..=100) as f64 / 100.0, rng.random_bool(0.7))).collect();
    let scored: Vec<ScoredPrediction> = pairs.iter().map(|&(cscore, correct)| ScoredPrediction { cscore, correct }).collect();
    let cal = calibrate_threshold(&scored).unwrap();
    let (theta, j) = sweep_oracle(&pairs).unwrap();
    assert_eq!(cal.theta_star, theta);
    assert!((cal.j_star - j).abs() <= 1e-12);
}

#[test]
fn hit_rates_random_sheet() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let verdicts: Vec<Vec<Vec<bool>>> =
        (0..40).map(|_| (0..3).map(|_| (0..10).map(|_| rng.random_bool(0.15)).collect()).collect()).collect();
    let sheet = ReviewSheet {
        reviewers: vec!["a".into(), "b".into(), "c".into()],
        queries: verdicts
            .iter()
            .enumerate()
            .map(|(i, v)| ReviewedQuery { query_id: i.to_string(), candidates: (0..10).collect(), verdicts: v.clone() })
            .collect(),
    };
    let ks = [1, 3, 5, 10];
    let rates = topk_hit_rate(&sheet, &ks).unwrap();
    let expected = hit_rate_oracle(&verdicts, &ks);
    for (r, name) in sheet.reviewers.iter().enumerate() {
        assert_eq!(rates.per_reviewer[name], expected[r]);
    }
}

#[test]
fn zero_noise_two_classes_retrieve_own_class() {
    let data = gen_clusters(&ClusterSpec { n_classes: 2, sigma: 1e-6, dim: 32, ..ClusterSpec::default() }).unwrap();
    let lib = library_from_records(&data.reference, None).unwrap();
    let index = VectorIndex::build(&lib).unwrap();
    for q in &data.queries {
        let hit = index.search(&normalize(&q.vector).unwrap(), 1).unwrap().entries[0];
        assert_eq!(lib.catalog().name(hit.class_id.unwrap()), q.label.as_deref());
    }
}

#[test]
fn same_spec_writes_identical_files() {
    let spec = ClusterSpec { n_classes: 4, ref_per_class: 20, query_per_class: 5, dim: 16, ..ClusterSpec::default() };
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str| {
        let data = gen_clusters(&spec).unwrap();
        let path = dir.path().join(name);
        let all: Vec<ManifestRecord> = data.reference.into_iter().chain(data.queries).collect();
        write_manifest(&all, &path).unwrap();
        std::fs::read(path).unwrap()
    };
    assert_eq!(write("a.jsonl"), write("b.jsonl"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn knn_matches_oracle(seed in any::<u64>(), n in 1usize..400, dim in prop::sample::select(vec![2usize, 8, 33]), k in 1usize..15) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lib = unlabeled(&mut rng, n, dim);
        let q = normalize(&random_unit(&mut rng, dim)).unwrap();
        let hits = VectorIndex::build(&lib).unwrap().search(&q, k).unwrap();
        assert_matches_oracle(&hits.entries, &lib, q.values(), k);
    }

    #[test]
    fn sweep_matches_oracle(pairs in prop::collection::vec((0u8..=20, any::<bool>()), 2..300)) {
        let pairs: Vec<(f64, bool)> = pairs.into_iter().map(|(s, c)| (s as f64 / 20.0, c)).collect();
        prop_assume!(pairs.iter().any(|p| p.1) && pairs.iter().any(|p| !p.1));
        let scored: Vec<ScoredPrediction> = pairs.iter().map(|&(cscore, correct)| ScoredPrediction { cscore, correct }).collect();
        let cal = calibrate_threshold(&scored).unwrap();
        let (theta, j) = sweep_oracle(&pairs).unwrap();
        prop_assert_eq!(cal.theta_star, theta);
        prop_assert!((cal.j_star - j).abs() <= 1e-12);
    }

    #[test]
    fn counting_matches_oracle(rows in prop::collection::vec((Just(()).prop_perturb(|_, mut r| {
        let mut order: Vec<u16> = (0..6).collect();
        for i in (1..6).rev() { order.swap(i, r.random_range(0..=i)); }
        order
    }), 0u16..6), 1..100)) {
        let ranked: Vec<Vec<u16>> = rows.iter().map(|r| r.0.clone()).collect();
        let truths: Vec<u16> = rows.iter().map(|r| r.1).collect();
        let preds: Vec<Prediction> = ranked
            .iter()
            .map(|o| Prediction { ranked_labels: o.iter().map(|&c| LabelScore { class_id: c, score: 0.0 }).collect(), neighbors_used: 6 })
            .collect();
        let ks = [1, 2, 3, 6];
        let report = evaluate(&preds, &truths, &ks, 6).unwrap();
        let counted = count_oracle(&ranked, &truths, &ks);
        let mut worst: BTreeMap<usize, f64> = BTreeMap::new();
        for k in ks {
            worst.insert(k, (report.top_k_accuracy[&k] - counted.top_k_accuracy[&k]).abs()
                .max((report.macro_recall[&k] - counted.macro_recall[&k]).abs()));
        }
        prop_assert!(worst.values().all(|&d| d <= 1e-12));
    }
}
