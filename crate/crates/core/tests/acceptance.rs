//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use contextfed::call::{count_members, EnsembleMode, EnsembleModel, MemberInputs, MemberKey};
use contextfed::context::{ContextLabel, Source};
use contextfed::dutycycle::{simulate, timeline, Detectors, MinuteFlags};
use contextfed::eval::{auroc, louo_folds, run_experiment, ExperimentConfig, Method, Report};
use contextfed::fl::{aggregate, client_round_seed, run_rounds, FlConfig, LinearTrainer, RoundUpdate};
use contextfed::model::{sgd_epoch, LinearModel, Sample, Task, TrainConfig};
use contextfed::seed;
use contextfed::textprep::{clean_text, PrepConfig};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration, detail: String) -> Outcome {
    check(
        elapsed <= limit,
        format!("{detail}; {:.2}s (limit {:.0}s)", elapsed.as_secs_f64(), limit.as_secs_f64()),
    )
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Error-free product and Neumaier summation: the weighted sum is carried
/// to well below one ulp before the single final division.
fn compensated_weighted_mean(updates: &[RoundUpdate<f64>]) -> Vec<f64> {
    let dim = updates[0].params.len();
    let total: usize = updates.iter().map(|u| u.n_i).sum();
    (0..dim)
        .map(|j| {
            let (mut sum, mut comp) = (0.0f64, 0.0f64);
            let mut add = |x: f64| {
                let t = sum + x;
                if sum.abs() >= x.abs() {
                    comp += (sum - t) + x;
                } else {
                    comp += (x - t) + sum;
                }
                sum = t;
            };
            for u in updates {
                let n = u.n_i as f64;
                let p = n * u.params[j];
                add(p);
                add(n.mul_add(u.params[j], -p));
            }
            (sum + comp) / total as f64
        })
        .collect()
}

fn fedavg_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let clients = rng.random_range(2..=20);
        let dim = rng.random_range(1..=64);
        let mut updates: Vec<RoundUpdate<f64>> = (0..clients)
            .map(|id| RoundUpdate {
                client_id: id,
                n_i: rng.random_range(1..=500),
                params: (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect(),
            })
            .collect();
        updates.shuffle(&mut rng);
        let got = aggregate(&updates).map_err(|e| e.to_string())?;
        let want = compensated_weighted_mean(&updates);
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }
    let detail = format!("1000 update sets, max abs error {worst:.2e}");
    if worst > 1e-12 {
        return Err(detail);
    }
    within(start.elapsed(), Duration::from_secs(1), detail)
}

fn random_samples(rng: &mut ChaCha8Rng, n: usize, dim: usize, task: Task) -> Vec<Sample<f64>> {
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
            let y = match task {
                Task::Classification => f64::from(rng.random_range(0..2u8)),
                Task::Regression => rng.random_range(0.0..100.0),
            };
            Sample::new(x, y)
        })
        .collect()
}

fn fl_cl_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(2);
    for case in 0..10 {
        let task = if case % 2 == 0 { Task::Classification } else { Task::Regression };
        let dim = rng.random_range(1..=16);
        let n = rng.random_range(1..=40);
        let samples = random_samples(&mut rng, n, dim, task);
        let rounds = rng.random_range(1..=30);
        let epochs = rng.random_range(1..=3);
        let train = TrainConfig {
            learning_rate: rng.random_range(0.001..0.1),
            batch_size: rng.random_range(1..=12),
            l1_lambda: if task == Task::Regression { rng.random_range(0.0..0.5) } else { 0.0 },
            epochs: 1,
            rng_seed: 0,
        };
        let cfg = FlConfig {
            sampled_per_round: Some(1),
            local_epochs: epochs,
            rounds,
            train: train.clone(),
            rng_seed: rng.random(),
        };
        let trainer = LinearTrainer { task, dim };
        let init = LinearModel::<f64>::zeros(dim, task);
        let state = run_rounds(&cfg, &trainer, std::slice::from_ref(&samples), init.to_params(), |_, _| Vec::new())
            .map_err(|e| e.to_string())?;
        // centralized: R*E epochs, the round's derived seed for each block of E
        let mut central = init;
        for r in 0..rounds {
            let tc = TrainConfig {
                rng_seed: client_round_seed(cfg.rng_seed, r, 0),
                ..train.clone()
            };
            for e in 0..epochs {
                central = sgd_epoch(&central, &samples, &tc, e);
            }
        }
        let same = central
            .to_params()
            .iter()
            .zip(&state.global_params)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(format!("case {case}: FL and centralized parameters differ"));
        }
    }
    within(start.elapsed(), Duration::from_secs(5), "10 configurations bit-identical".into())
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(3);
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for case in 0..100 {
        let task = if case % 2 == 0 { Task::Classification } else { Task::Regression };
        let dim = rng.random_range(1..=20);
        let mut model = LinearModel::<f64>::zeros(dim, task);
        model.weights = (0..dim).map(|_| 0.5 * normal(&mut rng)).collect();
        model.bias = 0.5 * normal(&mut rng);
        let n = rng.random_range(1..=15);
        let batch = random_samples(&mut rng, n, dim, task);
        let (gw, gb) = model.grad(&batch).map_err(|e| e.to_string())?;
        let analytic: Vec<f64> = gw.iter().copied().chain([gb]).collect();
        let base = model.to_params();
        let numeric: Vec<f64> = (0..base.len())
            .map(|j| {
                let mut up = model.clone();
                let mut down = model.clone();
                let mut p = base.clone();
                p[j] += eps;
                up.read_params(&p);
                p[j] = base[j] - eps;
                down.read_params(&p);
                (up.loss(&batch).unwrap() - down.loss(&batch).unwrap()) / (2.0 * eps)
            })
            .collect();
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = norm(&analytic).max(norm(&numeric));
        let rel = if scale == 0.0 { diff } else { diff / scale };
        worst = worst.max(rel);
    }
    let detail = format!("100 cases, max relative error {worst:.2e}");
    if worst >= 1e-4 {
        return Err(detail);
    }
    within(start.elapsed(), Duration::from_secs(2), detail)
}

fn brute_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut twice = 0u64;
    let (mut pos, mut neg) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li == 1 {
            pos += 1;
        } else {
            neg += 1;
        }
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj == 0 {
                if scores[i] > scores[j] {
                    twice += 2;
                } else if scores[i] == scores[j] {
                    twice += 1;
                }
            }
        }
    }
    twice as f64 / (2 * pos * neg) as f64
}

fn auroc_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(4);
    for case in 0..200 {
        let n = rng.random_range(2..=100);
        let coarse = case % 2 == 0;
        let scores: Vec<f64> = (0..n)
            .map(|_| if coarse { f64::from(rng.random_range(0..5u8)) / 4.0 } else { rng.random() })
            .collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        labels[0] = 1;
        labels[1] = 0;
        let got = auroc(&scores, &labels).map_err(|e| e.to_string())?;
        let want = brute_auroc(&scores, &labels);
        if got != want {
            return Err(format!("case {case}: {got} vs brute force {want}"));
        }
    }
    within(start.elapsed(), Duration::from_secs(2), "200 cases exactly equal".into())
}

fn call_structure() -> Outcome {
    let set = |s: &[Source]| s.iter().copied().collect::<BTreeSet<_>>();
    let counts = [
        count_members(&set(&[Source::Speech])),
        count_members(&set(&[Source::Keyboard])),
        count_members(&set(&[Source::Speech, Source::Keyboard])),
    ];
    if counts != [6, 8, 14] {
        return Err(format!("member counts {counts:?}"));
    }
    let mut rng = seed::rng(5);
    let both = set(&Source::ALL);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let task = if case % 2 == 0 { Task::Classification } else { Task::Regression };
        let dim = rng.random_range(1..=12);
        let mut ens = EnsembleModel::<f64>::new(&both, dim, task, EnsembleMode::Average);
        for (_, m) in &mut ens.members {
            m.weights = (0..dim).map(|_| normal(&mut rng)).collect();
            m.bias = normal(&mut rng);
        }
        let mut inputs = MemberInputs::new();
        for key in ens.keys() {
            if rng.random_bool(0.6) || inputs.is_empty() {
                let chunks = rng.random_range(1..=3);
                inputs.insert(key, (0..chunks).map(|_| (0..dim).map(|_| normal(&mut rng)).collect()).collect());
            }
        }
        let scores = ens.member_scores(&inputs).map_err(|e| e.to_string())?;
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        worst = worst.max((ens.predict(&inputs).unwrap() - mean).abs());

        let k = rng.random_range(0..ens.len());
        ens.mode = EnsembleMode::Weighted;
        ens.weights = (0..ens.len()).map(|j| if j == k { 1.0 } else { 0.0 }).collect();
        let picked = ens.predict(&inputs).unwrap();
        if picked.to_bits() != scores[k].to_bits() {
            return Err(format!("case {case}: one-hot W gave {picked}, member score {}", scores[k]));
        }
    }
    check(
        worst <= 1e-12,
        format!("counts 6/8/14; E_A vs mean max error {worst:.2e}; one-hot E_E exact"),
    )
}

fn experiment(method: Method, strength: f64) -> Result<(Report, Duration), String> {
    let mut cfg = ExperimentConfig {
        method,
        ..ExperimentConfig::default()
    };
    cfg.cohort.signal_strength = strength;
    let start = Instant::now();
    let report = run_experiment(&cfg).map_err(|e| e.to_string())?;
    Ok((report, start.elapsed()))
}

fn mean_of(report: &Report) -> f64 {
    report.summary.map_or(f64::NAN, |s| s.mean)
}

fn synthetic_benchmark(fed: &Report, pooled: &Report, elapsed: Duration) -> Outcome {
    let signal = MemberKey::new(Source::Keyboard, ContextLabel::TimeNight).to_string();
    let mut top = 0;
    let mut tops = Vec::new();
    for s in &fed.per_seed {
        let best = s
            .member_metrics
            .iter()
            .filter_map(|(k, v)| v.map(|v| (k.clone(), v)))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((k, _)) = best {
            top += usize::from(k == signal);
            tops.push(k);
        }
    }
    let (a, b) = (mean_of(fed), mean_of(pooled));
    let detail = format!(
        "FedTherapist E_E AUROC {a:.3} vs FL+Text {b:.3} (margin {:.3}); top member per seed {tops:?}; {:.0}s",
        a - b,
        elapsed.as_secs_f64()
    );
    check(a >= b + 0.10 && top >= 2, detail)
}

fn null_control(reports: &[(Method, Report)]) -> Outcome {
    let means: Vec<String> = reports.iter().map(|(m, r)| format!("{m}={:.3}", mean_of(r))).collect();
    let ok = reports.iter().all(|(_, r)| (mean_of(r) - 0.5).abs() <= 0.1);
    check(ok, format!("mean AUROC {}", means.join(", ")))
}

fn lasso_sparsity() -> Outcome {
    let mut rng = seed::rng(8);
    for case in 0..20 {
        let dim = rng.random_range(1..=20);
        let n = rng.random_range(1..=30);
        let samples = random_samples(&mut rng, n, dim, Task::Regression);
        let mut start = LinearModel::<f64>::zeros(dim, Task::Regression);
        start.weights = (0..dim).map(|_| normal(&mut rng)).collect();
        let cfg = TrainConfig {
            learning_rate: 0.01,
            batch_size: rng.random_range(1..=10),
            l1_lambda: 1e6,
            epochs: 1,
            rng_seed: rng.random(),
        };
        let sparse = sgd_epoch(&start, &samples, &cfg, 0);
        if sparse.weights.iter().any(|&w| w != 0.0) {
            return Err(format!("case {case}: nonzero weight after lambda=1e6"));
        }
        let plain_cfg = TrainConfig { l1_lambda: 0.0, ..cfg };
        let got = sgd_epoch(&start, &samples, &plain_cfg, 0);
        let want = plain_sgd_epoch(&start, &samples, &plain_cfg, 0);
        let same = got
            .to_params()
            .iter()
            .zip(want.to_params())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(format!("case {case}: lambda=0 differs from plain SGD"));
        }
    }
    Ok("20 cases: all weights zero at lambda=1e6; lambda=0 bitwise equal to plain SGD".into())
}

/// Minibatch SGD on mean squared error against y/100, no regularizer.
fn plain_sgd_epoch(model: &LinearModel<f64>, samples: &[Sample<f64>], cfg: &TrainConfig, epoch: usize) -> LinearModel<f64> {
    let mut m = model.clone();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut seed::rng(seed::derive(&[cfg.rng_seed, epoch as u64])));
    for batch in order.chunks(cfg.batch_size) {
        let mut gw = vec![0.0; m.weights.len()];
        let mut gb = 0.0;
        for &i in batch {
            let s = &samples[i];
            let z = m.weights.iter().zip(&s.x).map(|(w, x)| w * x).sum::<f64>() + m.bias;
            let r = (z - s.y / 100.0) * 2.0;
            for (g, x) in gw.iter_mut().zip(&s.x) {
                *g += r * x;
            }
            gb += r;
        }
        let n = batch.len() as f64;
        for (w, g) in m.weights.iter_mut().zip(&gw) {
            *w -= cfg.learning_rate * (g / n);
        }
        m.bias -= cfg.learning_rate * (gb / n);
    }
    m
}

fn louo_shape(report: &Report) -> Outcome {
    let users: Vec<String> = (0..46).map(|i| format!("u{i}")).collect();
    let folds = louo_folds(&users).map_err(|e| e.to_string())?;
    let tests: BTreeSet<&String> = folds.iter().map(|f| &f.test_user).collect();
    let disjoint = folds.iter().all(|f| !f.train_users.contains(&f.test_user) && f.train_users.len() == 45);
    if folds.len() != 46 || tests.len() != 46 || !disjoint {
        return Err("fold construction is not one disjoint fold per user".into());
    }
    for &seed in &report.seeds {
        let seen: BTreeSet<&String> = report.folds_for_seed(seed).map(|f| &f.test_user).collect();
        if seen.len() != 46 || report.folds_for_seed(seed).count() != 46 {
            return Err(format!("seed {seed}: report folds do not cover 46 users once"));
        }
    }
    let summary = report.summary.ok_or("report has no mean/std")?;
    check(
        report.fold_count == 46 && report.per_seed.len() == 3 && summary.std.is_finite(),
        format!("46 folds per seed; 3 seeds; AUROC {summary}"),
    )
}

fn duty_cycle() -> Outcome {
    let quiet = timeline(60, &[], &[]);
    let trace = simulate(&quiet, &Detectors::from_timeline(&quiet, "en"), "en");
    if trace.probe_minutes != 15 || trace.recorded_minutes.len() != 15 {
        return Err(format!("{} probe minutes on a quiet hour", trace.probe_minutes));
    }
    let mut rng = seed::rng(10);
    let mut processed = 0;
    for _ in 0..200 {
        let len = rng.random_range(20..300u32);
        let tl: Vec<MinuteFlags> = (0..len)
            .map(|m| MinuteFlags {
                minute: m,
                conversation: rng.random_bool(0.3),
                idle: rng.random_bool(0.3),
                charging: rng.random_bool(0.3),
            })
            .collect();
        let trace = simulate(&tl, &Detectors::from_timeline(&tl, "en"), "en");
        for p in &trace.processed {
            let at = &tl[p.processed_at as usize];
            let first_ok = (p.buffered_at..=p.processed_at).find(|&m| tl[m as usize].idle && tl[m as usize].charging);
            if !(at.idle && at.charging) || first_ok != Some(p.processed_at) {
                return Err(format!("segment processed at minute {} without an idle, charging device", p.processed_at));
            }
            processed += 1;
        }
    }
    Ok(format!("15 probe minutes per quiet hour; {processed} segments processed only when idle and charging"))
}

fn golden_prep() -> Outcome {
    let input = include_str!("fixtures/prep_input.txt");
    let expected = include_str!("fixtures/prep_expected.txt");
    let cfg = PrepConfig::default();
    let got: String = input.lines().map(|l| clean_text(l, &cfg).join(" ") + "\n").collect();
    if got == expected {
        return Ok(format!("{} lines byte-exact", input.lines().count()));
    }
    let first = got
        .lines()
        .zip(expected.lines())
        .position(|(a, b)| a != b)
        .map_or("line count".to_string(), |i| format!("line {}", i + 1));
    Err(format!("mismatch at {first}"))
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("fedavg-oracle", fedavg_oracle()),
        ("fl-cl-equivalence", fl_cl_equivalence()),
        ("gradient-check", gradient_check()),
        ("auroc-exactness", auroc_exactness()),
        ("call-structure", call_structure()),
    ];

    let fed = experiment(Method::FedTherapist, 0.8);
    let pooled = experiment(Method::FlText, 0.8);
    match (&fed, &pooled) {
        (Ok((f, tf)), Ok((p, tp))) => {
            results.push(("synthetic-benchmark", synthetic_benchmark(f, p, *tf + *tp)));
        }
        (Err(e), _) | (_, Err(e)) => results.push(("synthetic-benchmark", Err(e.clone()))),
    }

    let mut null = Vec::new();
    let mut null_err = None;
    for method in [Method::ClNonText, Method::FlText, Method::FedTherapist] {
        match experiment(method, 0.0) {
            Ok((r, _)) => null.push((method, r)),
            Err(e) => null_err = Some(e),
        }
    }
    results.push(("null-signal-control", null_err.map_or_else(|| null_control(&null), Err)));
    results.push(("lasso-sparsity", lasso_sparsity()));
    results.push((
        "louo-shape",
        match &fed {
            Ok((r, _)) => louo_shape(r),
            Err(e) => Err(e.clone()),
        },
    ));
    results.push(("duty-cycle-schedule", duty_cycle()));
    results.push(("preprocessing-golden", golden_prep()));

    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    let by_status: BTreeMap<bool, usize> = results.iter().fold(BTreeMap::new(), |mut m, (_, o)| {
        *m.entry(o.is_ok()).or_default() += 1;
        m
    });
    println!(
        "acceptance: {} passed, {} failed",
        by_status.get(&true).copied().unwrap_or(0),
        failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
