use std::collections::HashMap;

use proptest::collection::vec;
use proptest::prelude::*;
use refdx_core::augment::merge;
use refdx_core::confidence::{calibrate_threshold, Ensemble, EnsembleSpec, ScoredPrediction, THETA_ABOVE_ALL};
use refdx_core::diagnosis::{aggregate_labels, evaluate, predict, LabelScore, Prediction};
use refdx_core::format::{decode, encode, LoadOptions};
use refdx_core::retrieval::{retrieve_cases, topk_hit_rate, CaseStore, ReviewSheet, ReviewedQuery};
use refdx_core::{normalize, Hit, LabelCatalog, LibrarySnapshot, Provenance, RankedHits, ReferenceItem, VectorIndex};

const DIM: usize = 6;
const CLASSES: usize = 4;

fn nonzero(dim: usize) -> impl Strategy<Value = Vec<f32>> {
    vec(-1.0f32..1.0, dim).prop_filter("non-zero", |v| v.iter().map(|x| x * x).sum::<f32>() > 1e-3)
}

fn catalog() -> LabelCatalog {
    LabelCatalog::new((0..CLASSES).map(|c| format!("c{c}"))).unwrap()
}

/// Items with distinct ids, labels and provenance drawn at random.
fn library(max: usize) -> impl Strategy<Value = LibrarySnapshot> {
    vec((nonzero(DIM), 0..CLASSES as u16, any::<bool>()), 1..max).prop_map(|rows| {
        let items = rows
            .into_iter()
            .enumerate()
            .map(|(i, (v, c, local))| {
                let p = if local { Provenance::Local } else { Provenance::Base };
                ReferenceItem::new(i as u64 * 3 + 1, normalize(&v).unwrap(), Some(c), p, if local { "site" } else { "base" })
            })
            .collect();
        LibrarySnapshot::new(0, DIM, catalog(), items).unwrap()
    })
}

fn query() -> impl Strategy<Value = refdx_core::Embedding> {
    nonzero(DIM).prop_map(|v| normalize(&v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_is_field_for_field(lib in library(60)) {
        let bytes = encode(&lib);
        let back = decode(&bytes, LoadOptions { strict: true, expected_dim: None }).unwrap();
        prop_assert_eq!(&back, &lib);
        prop_assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn normalize_is_idempotent_and_scale_free(v in nonzero(17), c in 0.01f32..100.0) {
        let once = normalize(&v).unwrap();
        let twice = normalize(once.values()).unwrap();
        for (a, b) in once.values().iter().zip(twice.values()) {
            prop_assert!((a - b).abs() <= 1e-7);
        }
        let scaled: Vec<f32> = v.iter().map(|x| x * c).collect();
        for (a, b) in once.values().iter().zip(normalize(&scaled).unwrap().values()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn search_is_prefix_monotone_bounded_and_deterministic(lib in library(80), q in query(), k in 1usize..12) {
        let index = VectorIndex::build(&lib).unwrap();
        let hits = index.search(&q, k).unwrap();
        let longer = index.search(&q, k + 1).unwrap();
        prop_assert_eq!(&longer.entries[..hits.len()], &hits.entries[..]);
        for h in &hits.entries {
            prop_assert!(h.score >= -1.0 - 1e-9 && h.score <= 1.0 + 1e-9);
        }
        prop_assert_eq!(&index.par_search(&q, k).unwrap(), &hits);
        let batch = index.batch_search(&[q.clone()], k);
        prop_assert_eq!(batch[0].as_ref().unwrap(), &hits);
    }

    #[test]
    fn aggregation_ignores_hit_order(
        raw in vec((0u16..CLASSES as u16, -1.0f64..1.0), 1..40),
        n in 1usize..6,
        shuffle_seed in any::<u64>(),
    ) {
        let entries: Vec<Hit> = raw
            .iter()
            .enumerate()
            .map(|(i, &(c, s))| Hit { item_id: i as u64, class_id: Some(c), provenance: Provenance::Base, score: s })
            .collect();
        let mut shuffled = entries.clone();
        let len = shuffled.len();
        let mut x = shuffle_seed | 1;
        for i in (1..len).rev() {
            x ^= x << 13; x ^= x >> 7; x ^= x << 17;
            shuffled.swap(i, (x % (i as u64 + 1)) as usize);
        }
        let a = aggregate_labels(&RankedHits { entries }, n).unwrap();
        let b = aggregate_labels(&RankedHits { entries: shuffled }, n).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn one_neighbor_is_nearest_neighbor(lib in library(50), q in query()) {
        let index = VectorIndex::build(&lib).unwrap();
        let nearest = index.search(&q, 1).unwrap().entries[0];
        prop_assert_eq!(predict(&q, &index, 1, 5).unwrap().top1(), nearest.class_id.unwrap());
    }

    #[test]
    fn accuracy_grows_with_k_and_macro_recall_is_a_mean(
        rows in vec((vec(0.0f64..1.0, CLASSES), 0u16..CLASSES as u16), 1..60),
    ) {
        let preds: Vec<Prediction> = rows
            .iter()
            .map(|(scores, _)| {
                let mut ranked: Vec<LabelScore> =
                    scores.iter().enumerate().map(|(c, &s)| LabelScore { class_id: c as u16, score: s }).collect();
                ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.class_id.cmp(&b.class_id)));
                Prediction { ranked_labels: ranked, neighbors_used: CLASSES }
            })
            .collect();
        let truths: Vec<u16> = rows.iter().map(|r| r.1).collect();
        let ks: Vec<usize> = (1..=CLASSES).collect();
        let report = evaluate(&preds, &truths, &ks, CLASSES).unwrap();
        for w in ks.windows(2) {
            prop_assert!(report.top_k_accuracy[&w[0]] <= report.top_k_accuracy[&w[1]]);
        }
        for k in &ks {
            let recalls = &report.per_class_recall[k];
            let mean = recalls.values().sum::<f64>() / recalls.len() as f64;
            prop_assert!((report.macro_recall[k] - mean).abs() <= 1e-12);
        }
    }

    #[test]
    fn merge_keeps_base_and_unions_items(base in library(40), extra in vec((nonzero(DIM), 0..CLASSES as u16), 0..20), q in query()) {
        let before = encode(&base);
        let base_hits = VectorIndex::build(&base).unwrap().search(&q, 5).unwrap();
        let first = base.max_item_id().unwrap() + 1;
        let local: Vec<ReferenceItem> = extra
            .iter()
            .enumerate()
            .map(|(i, (v, c))| ReferenceItem::new(first + i as u64, normalize(v).unwrap(), Some(*c), Provenance::Local, "site-x"))
            .collect();
        let merged = merge(&base, local.clone()).unwrap();
        prop_assert_eq!(encode(&base), before);
        prop_assert_eq!(VectorIndex::build(&base).unwrap().search(&q, 5).unwrap(), base_hits);
        prop_assert_eq!(merged.len(), base.len() + local.len());
        prop_assert_eq!(merged.generation(), base.generation() + 1);
        prop_assert_eq!(&merged.items()[..base.len()], base.items());
        prop_assert_eq!(&merged.items()[base.len()..], &local[..]);

        let index = VectorIndex::build(&merged).unwrap();
        for item in &local {
            let top = index.search(&item.embedding, 1).unwrap().entries[0];
            prop_assert!((top.score - 1.0).abs() <= 1e-6);
            // an exact duplicate with a smaller id may win the tie
            let dup = merged.items().iter().any(|o| o.item_id < item.item_id && o.embedding == item.embedding);
            prop_assert!(top.item_id == item.item_id || dup);
        }
    }

    #[test]
    fn ensemble_votes_add_up_and_repeat(lib in library(30), q in query(), passes in 1u32..12, rate in 0.0f64..0.5, seed in any::<u64>()) {
        let spec = EnsembleSpec::new(passes, rate, seed).unwrap();
        let a = Ensemble::build(&lib, &spec).unwrap().predict(&q, 3).unwrap();
        let b = Ensemble::build(&lib, &spec).unwrap().predict(&q, 3).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.per_pass_votes.values().sum::<u32>(), passes);
        prop_assert_eq!(a.cscore, a.per_pass_votes[&a.final_class] as f64 / passes as f64);
    }

    #[test]
    fn zero_mask_rate_is_unanimous(lib in library(30), q in query(), passes in 1u32..8) {
        let spec = EnsembleSpec::new(passes, 0.0, 1).unwrap();
        prop_assert_eq!(Ensemble::build(&lib, &spec).unwrap().predict(&q, 5).unwrap().cscore, 1.0);
    }

    #[test]
    fn youden_is_bounded_with_zero_sentinels(scored in vec((0.0f64..1.0, any::<bool>()), 2..200)) {
        let scored: Vec<ScoredPrediction> = scored.into_iter().map(|(cscore, correct)| ScoredPrediction { cscore, correct }).collect();
        prop_assume!(scored.iter().any(|s| s.correct) && scored.iter().any(|s| !s.correct));
        let cal = calibrate_threshold(&scored).unwrap();
        let first = cal.curve.first().unwrap();
        let last = cal.curve.last().unwrap();
        prop_assert_eq!(first.theta, 0.0);
        prop_assert_eq!(last.theta, THETA_ABOVE_ALL);
        prop_assert!(first.j.abs() <= 1e-12 && last.j.abs() <= 1e-12);
        for p in &cal.curve {
            prop_assert!((-1.0..=1.0).contains(&p.j));
        }
        prop_assert!(cal.j_star >= 0.0);
    }

    #[test]
    fn hit_rates_grow_with_k(verdicts in vec(vec(vec(any::<bool>(), 10), 3), 1..20)) {
        let sheet = ReviewSheet {
            reviewers: vec!["r1".into(), "r2".into(), "r3".into()],
            queries: verdicts
                .into_iter()
                .enumerate()
                .map(|(i, v)| ReviewedQuery { query_id: format!("q{i}"), candidates: (0..10).collect(), verdicts: v })
                .collect(),
        };
        let ks: Vec<usize> = (1..=10).collect();
        let rates = topk_hit_rate(&sheet, &ks).unwrap();
        for per_k in rates.per_reviewer.values() {
            for w in ks.windows(2) {
                prop_assert!(per_k[&w[0]] <= per_k[&w[1]]);
            }
        }
    }

    #[test]
    fn retrieval_over_labeled_library_equals_search(lib in library(60), q in query(), k in 1usize..10) {
        let store = CaseStore::new(&lib, &HashMap::new()).unwrap();
        let cases = retrieve_cases(&store, &q, k).unwrap();
        let hits = VectorIndex::build(&lib).unwrap().search(&q, k).unwrap();
        prop_assert_eq!(cases.iter().map(|c| c.hit).collect::<Vec<_>>(), hits.entries);
    }
}
