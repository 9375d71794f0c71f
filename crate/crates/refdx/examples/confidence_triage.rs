//! Ensemble confidence, a Youden-calibrated threshold and the resulting
//! split into automatically accepted and human-reviewed cases.

use refdx_core::confidence::{apply_threshold, calibrate_threshold, Ensemble, EnsembleSpec, ScoredPrediction};
use refdx_core::manifest::library_from_records;
use refdx_core::normalize;
use refdx_harness::{gen_clusters, ClusterSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // heavy overlap between classes so that some diagnoses are wrong
    let spec = ClusterSpec { n_classes: 6, ref_per_class: 60, query_per_class: 40, dim: 32, sigma: 0.35, ..ClusterSpec::default() };
    let data = gen_clusters(&spec)?;
    let library = library_from_records(&data.reference, None)?;
    let ensemble = Ensemble::build(&library, &EnsembleSpec::new(100, 0.1, 1)?)?;

    let (calibration, test) = data.queries.split_at(data.queries.len() / 2);
    let score = |records: &[refdx_core::manifest::ManifestRecord]| -> Result<Vec<_>, refdx_core::Error> {
        records
            .iter()
            .map(|r| {
                let report = ensemble.predict(&normalize(&r.vector)?, 5)?;
                let truth = library.catalog().resolve(r.label.as_deref().unwrap())?;
                Ok((report, truth))
            })
            .collect()
    };

    let scored: Vec<ScoredPrediction> = score(calibration)?
        .iter()
        .map(|(r, t)| ScoredPrediction { cscore: r.cscore, correct: r.final_class == *t })
        .collect();
    let cal = calibrate_threshold(&scored)?;
    println!("theta* = {:.4} (J = {:.3}, {} correct / {} wrong)", cal.theta_star, cal.j_star, cal.positives, cal.negatives);

    let results = score(test)?;
    let reports: Vec<_> = results.iter().map(|(r, _)| r.clone()).collect();
    let triage = apply_threshold(&reports, cal.theta_star);
    let accuracy = |idx: &[usize]| idx.iter().filter(|&&i| results[i].0.final_class == results[i].1).count() as f64 / idx.len().max(1) as f64;
    let all: Vec<usize> = (0..results.len()).collect();
    println!("accuracy on all {}: {:.3}", all.len(), accuracy(&all));
    println!("accuracy on retained {}: {:.3}", triage.retained.len(), accuracy(&triage.retained));
    println!("sent to review: {}", triage.flagged.len());
    Ok(())
}
