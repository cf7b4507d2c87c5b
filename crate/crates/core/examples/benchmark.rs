//! Runs the synthetic benchmark for each method and prints per-seed metrics.
//!
//! cargo run --release -p contextfed --example benchmark [signal_strength] [rounds] [methods]
//!
//! `methods` is a comma list of cl,fl,ea,ee (default all).

use contextfed::call::EnsembleMode;
use contextfed::eval::{run_experiment, ExperimentConfig, Method};

fn main() -> contextfed::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let strength: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.8);
    let rounds: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let wanted = args.get(3).map_or("cl,fl,ea,ee", String::as_str);
    let runs = [
        ("cl", Method::ClNonText, EnsembleMode::Weighted),
        ("fl", Method::FlText, EnsembleMode::Weighted),
        ("ea", Method::FedTherapist, EnsembleMode::Average),
        ("ee", Method::FedTherapist, EnsembleMode::Weighted),
    ];
    for (name, method, mode) in runs {
        if !wanted.split(',').any(|w| w == name) {
            continue;
        }
        let mut cfg = ExperimentConfig {
            method,
            ensemble_mode: mode,
            ..ExperimentConfig::default()
        };
        cfg.cohort.signal_strength = strength;
        cfg.fl.rounds = rounds;
        let t = std::time::Instant::now();
        let report = run_experiment(&cfg)?;
        let per_seed: Vec<String> = report
            .per_seed
            .iter()
            .map(|s| format!("{}={:.3}", s.seed, s.metric.unwrap_or(f64::NAN)))
            .collect();
        let label = if method == Method::FedTherapist { format!("{method}-{mode}") } else { method.to_string() };
        println!(
            "{label:<18} {} [{}] {:.1}s",
            report.summary.map_or("n/a".into(), |m| m.to_string()),
            per_seed.join(" "),
            t.elapsed().as_secs_f64()
        );
        for s in &report.per_seed {
            let mut members: Vec<(&String, f64)> = s
                .member_metrics
                .iter()
                .filter_map(|(k, v)| v.map(|v| (k, v)))
                .collect();
            members.sort_by(|a, b| b.1.total_cmp(&a.1));
            if !members.is_empty() {
                let top: Vec<String> = members.iter().take(4).map(|(k, v)| format!("{k}={v:.3}")).collect();
                println!("    seed {}: {}", s.seed, top.join(" "));
            }
        }
    }
    Ok(())
}
