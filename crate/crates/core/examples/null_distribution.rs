//! Per-seed AUROC of one method on signal-free cohorts, for many seeds.
//!
//! cargo run --release -p contextfed --example null_distribution <cl|fl|ea|ee> <first_seed> <last_seed> [rounds]

use contextfed::call::EnsembleMode;
use contextfed::eval::{run_experiment, ExperimentConfig, Method};

fn main() -> contextfed::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let (method, mode) = match args.get(1).map(String::as_str) {
        Some("cl") => (Method::ClNonText, EnsembleMode::Weighted),
        Some("fl") => (Method::FlText, EnsembleMode::Weighted),
        Some("ea") => (Method::FedTherapist, EnsembleMode::Average),
        _ => (Method::FedTherapist, EnsembleMode::Weighted),
    };
    let first: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let last: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(30);
    let mut cfg = ExperimentConfig {
        method,
        ensemble_mode: mode,
        seeds: (first..=last).collect(),
        ..ExperimentConfig::default()
    };
    cfg.cohort.signal_strength = 0.0;
    if let Some(r) = args.get(4).and_then(|s| s.parse().ok()) {
        cfg.fl.rounds = r;
    }
    let report = run_experiment(&cfg)?;
    let values: Vec<f64> = report.per_seed.iter().filter_map(|s| s.metric).collect();
    for s in &report.per_seed {
        println!("{} {:.3}", s.seed, s.metric.unwrap_or(f64::NAN));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    println!("mean {mean:.3} sd {sd:.3} se {:.3} n {n}", sd / n.sqrt());
    Ok(())
}
