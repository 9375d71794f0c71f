//! Runs a harness experiment with a config override and prints its checks.

use refdx_harness::{run_experiment, RunOptions, EXPERIMENTS};
use serde_json::json;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("experiments: {}", EXPERIMENTS.join(", "));
    let config = json!({"clusters": {"n_classes": 8, "dim": 128}, "cutoffs": [1, 3, 5]});
    let report = run_experiment("topk_curve", &config, &RunOptions { seed: Some(21), parallel: false })?;
    for c in &report.checks {
        println!("{:<24} {:>8.4}  {:<10} {}", c.name, c.observed, c.bound, if c.passed { "ok" } else { "FAILED" });
    }
    print!("{}", report.to_csv());
    Ok(())
}
