//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fail.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use serde_json::{json, Value};

use fedcompass::compass::staleness_factor;
use fedcompass::datagen::{partition, synth_blobs, Dataset, PartitionSpec};
use fedcompass::learner::{Batch, ModelSpec, ParamVector};
use fedcompass::runner::scenarios::{replay_speed_change, replay_walkthrough};
use fedcompass::runner::{run_experiment, run_experiment_observed, run_seeds, ExperimentConfig, Observation};
use fedcompass::sim::{RngStream, SimTrace, TraceRecord};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, elapsed: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.2?}, limit {limit:?}"))
}

fn find<'a>(trace: &'a SimTrace, kind: &'a str, client: u64) -> Vec<&'a TraceRecord> {
    trace
        .of_kind(kind)
        .filter(|r| r.detail["client"].as_u64() == Some(client))
        .collect()
}

fn members(agg: &TraceRecord) -> Vec<u64> {
    let mut ids: Vec<u64> = agg.detail["clients"]
        .as_array()
        .map(|cs| cs.iter().filter_map(Value::as_u64).collect())
        .unwrap_or_default();
    ids.sort_unstable();
    ids
}

fn first<'a>(trace: &'a SimTrace, kind: &'a str, client: u64, what: &str) -> Result<&'a TraceRecord, String> {
    find(trace, kind, client)
        .into_iter()
        .next()
        .ok_or_else(|| format!("no {kind} record for client {client} ({what})"))
}

fn expect_f64(actual: &Value, expected: f64, what: &str) -> Result<(), String> {
    ensure(actual.as_f64() == Some(expected), || format!("{what}: expected {expected}, got {actual}"))
}

fn expect_u64(actual: &Value, expected: u64, what: &str) -> Result<(), String> {
    ensure(actual.as_u64() == Some(expected), || format!("{what}: expected {expected}, got {actual}"))
}

// ---------------------------------------------------------------- 1

fn walkthrough() -> Check {
    let start = Instant::now();
    let (_, trace) = replay_walkthrough().map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();

    let arrival = first(&trace, "client-arrival", 0, "first arrival")?;
    ensure(arrival.t == 2.0, || format!("first arrival at {}, expected 2.0", arrival.t))?;

    let create = first(&trace, "create", 0, "first group")?;
    expect_u64(&create.detail["group"], 1, "first group id")?;
    expect_f64(&create.detail["t_a"], 12.0, "first group T_a")?;

    for (client, q) in [(1, 40), (2, 28)] {
        let join = first(&trace, "join", client, "join")?;
        expect_u64(&join.detail["group"], 1, &format!("client {client} group"))?;
        expect_u64(&join.detail["q"], q, &format!("client {client} Q"))?;
    }

    let c3 = first(&trace, "create", 3, "second group")?;
    let rejected = c3.detail["candidates"]
        .as_array()
        .is_some_and(|cs| cs.iter().any(|c| c["group"] == 1 && c["q"] == 10));
    ensure(rejected, || format!("client 3 candidates {} lack q=10 for group 1", c3.detail["candidates"]))?;
    expect_u64(&c3.detail["group"], 2, "second group id")?;
    expect_f64(&c3.detail["t_a"], 22.0, "second group T_a")?;

    for client in 0..3 {
        let merge = first(&trace, "merge", client, "reassignment")?;
        ensure(merge.t == 12.0, || format!("client {client} reassigned at {}", merge.t))?;
        expect_u64(&merge.detail["group"], 2, &format!("client {client} reassigned group"))?;
    }
    within(Duration::from_secs(1), elapsed)?;
    Ok(format!("exact arrivals, Q and T_a values ({elapsed:.0?})"))
}

// ---------------------------------------------------------------- 2

fn speed_changes() -> Check {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut sub = |label: &str, r: Result<(), String>| {
        if let Err(e) = r {
            failures.push(format!("{label}: {e}"));
        }
    };

    let early = (|| {
        let (_, trace) = replay_speed_change(14).map_err(|e| e.to_string())?;
        let arrival = &find(&trace, "client-arrival", 2)[1];
        ensure(arrival.t == 10.6, || format!("arrival at {}, expected 10.6", arrival.t))?;
        let buffered = first(&trace, "group-buffer", 2, "buffered early arrival")?;
        ensure(buffered.t == 10.6, || format!("buffered at {}", buffered.t))?;
        let agg = trace.of_kind("group-aggregate").next().ok_or("no group aggregation")?;
        ensure(agg.t == 12.0 && members(agg) == [0, 1, 2], || {
            format!("group 1 aggregated at {} with {}", agg.t, agg.detail["clients"])
        })
    })();
    sub("scenario 14", early);

    let late = (|| {
        let (_, trace) = replay_speed_change(15).map_err(|e| e.to_string())?;
        let arrival = &find(&trace, "client-arrival", 2)[1];
        ensure(arrival.t == 13.4, || format!("arrival at {}, expected 13.4", arrival.t))?;
        let create = first(&trace, "create", 0, "first group")?;
        expect_f64(&create.detail["t_max"], 14.0, "group 1 T_max")?;
        let buffered = first(&trace, "group-buffer", 2, "buffered late arrival")?;
        ensure(buffered.t == 13.4, || format!("buffered at {}", buffered.t))?;
        let agg = trace.of_kind("group-aggregate").next().ok_or("no group aggregation")?;
        ensure(agg.t == 13.4 && members(agg) == [0, 1, 2], || {
            format!("group 1 aggregated at {} with {}", agg.t, agg.detail["clients"])
        })
    })();
    sub("scenario 15", late);

    let straggler = (|| {
        let (_, trace) = replay_speed_change(16).map_err(|e| e.to_string())?;
        let arrival = &find(&trace, "client-arrival", 2)[1];
        ensure(arrival.t == 15.2, || format!("arrival at {}, expected 15.2", arrival.t))?;
        let general = first(&trace, "straggler-buffer", 2, "general buffer")?;
        ensure(general.t == 15.2, || format!("general-buffered at {}", general.t))?;
        let create = first(&trace, "create", 2, "new group")?;
        ensure(create.t == 15.2, || format!("group created at {}", create.t))?;
        expect_u64(&create.detail["group"], 3, "new group id")?;
        let q = create.detail["candidates"]
            .as_array()
            .and_then(|cs| cs.iter().find(|c| c["group"] == 2))
            .map(|c| c["q"].clone())
            .ok_or("no candidate for group 2")?;
        expect_u64(&q, 17, "candidate Q for group 2")
    })();
    sub("scenario 16", straggler);

    let elapsed = start.elapsed();
    if let Err(e) = within(Duration::from_secs(1), elapsed) {
        failures.push(e);
    }
    if failures.is_empty() {
        Ok(format!("early, late and straggler arrivals ({elapsed:.0?})"))
    } else {
        Err(failures.join("; "))
    }
}

// ---------------------------------------------------------------- 3

fn small_config(m: usize, seed: u64, hetero: Value, algorithm: Value, stop: Value) -> ExperimentConfig {
    ExperimentConfig::from_value(json!({
        "seed": seed,
        "clients": m,
        "dataset": {"kind": "blobs", "n_classes": 4, "dim": 4, "n_per_class": 10 * m, "spread": 0.5},
        "partition": {"kind": "dual-dirichlet", "alpha1": 100.0, "alpha2": 1.0},
        "heterogeneity": hetero,
        "algorithm": algorithm,
        "stop": stop
    }))
    .expect("valid config")
}

fn group_bound() -> Check {
    let start = Instant::now();
    let mut rng = RngStream::new(7, 0);
    let mut worst = 0usize;
    let mut violating = Vec::new();
    let (mut checks, mut over) = (0usize, 0usize);
    for trial in 0..200u64 {
        let m = rng.random_range(3..=20usize);
        let dist = if trial % 2 == 0 { "normal" } else { "exp" };
        let q_min = if rng.random_bool(0.5) { 40 } else { 20 };
        let mut config = small_config(
            m,
            trial,
            json!({"dist": dist, "jitter_cv": 0.0}),
            json!({"kind": "fedcompass", "Qmin": q_min, "Qmax": 100, "B": 4}),
            json!({"time_budget": 1.0}),
        );
        let speeds = config.heterogeneity.profile(m, trial).step_times().to_vec();
        let fastest = speeds.iter().copied().fold(f64::INFINITY, f64::min);
        let slowest = speeds.iter().copied().fold(0.0, f64::max);
        let base = 100.0 / q_min as f64;
        let bound = ((slowest / fastest).ln() / base.ln() - 1e-9).ceil().max(1.0) as usize;
        // warm-up plus several slowest-client rounds
        config.stop = fedcompass::sim::StopRule::TimeBudget(slowest * (20.0 + 6.0 * 100.0));

        let mut arrivals = vec![0u32; m];
        let (mut trial_checks, mut trial_over, mut max_live) = (0usize, 0usize, 0usize);
        let mut observe = |o: &Observation<'_>| {
            if o.kind == "client-arrival" {
                if let Some(c) = o.client {
                    arrivals[c] += 1;
                }
            }
            if arrivals.iter().all(|&a| a >= 2) {
                let live = o.server.scheduler().map_or(0, |s| s.groups().len());
                trial_checks += 1;
                max_live = max_live.max(live);
                if live > bound {
                    trial_over += 1;
                }
            }
        };
        run_experiment_observed(&config, &mut observe).map_err(|e| format!("trial {trial}: {e}"))?;
        ensure(trial_checks > 0, || format!("trial {trial}: clients never reached a second arrival"))?;
        if trial_over > 0 {
            violating.push(format!("#{trial} m={m} {dist} Qmin={q_min}: {max_live} > {bound}"));
        }
        checks += trial_checks;
        over += trial_over;
        worst = worst.max(bound);
    }
    let elapsed = start.elapsed();
    within(Duration::from_secs(30), elapsed)?;
    if violating.is_empty() {
        Ok(format!("200/200 trials within bound, largest bound {worst} ({elapsed:.1?})"))
    } else {
        Err(format!(
            "{}/200 trials exceed the bound ({over}/{checks} observed states), e.g. {} ({elapsed:.1?})",
            violating.len(),
            violating[..violating.len().min(3)].join(", ")
        ))
    }
}

// ---------------------------------------------------------------- 4

fn step_and_deadline_laws() -> Check {
    let start = Instant::now();
    let (q_min, q_max, lambda) = (20u64, 100u64, 1.2);
    let mut dispatches = 0usize;
    let mut groups_checked = 0usize;
    for run in 0..100u64 {
        let m = 3 + (run as usize % 8);
        let config = small_config(
            m,
            run,
            json!({"dist": if run % 2 == 0 { "normal" } else { "exp" }, "change_prob": 0.1}),
            json!({"kind": "fedcompass", "Qmin": q_min, "Qmax": q_max, "lambda": lambda, "B": 4}),
            json!({"global_updates": 150}),
        );
        let mut seen: BTreeMap<u64, (f64, f64, f64)> = BTreeMap::new();
        let mut observe = |o: &Observation<'_>| {
            if let Some(s) = o.server.scheduler() {
                for (&id, g) in s.groups() {
                    seen.entry(id).or_insert((g.created_at, g.expected_arrival, g.latest_arrival));
                }
            }
        };
        let (_, trace) = run_experiment_observed(&config, &mut observe).map_err(|e| format!("run {run}: {e}"))?;
        for d in trace.of_kind("dispatch") {
            let q = d.detail["steps"].as_u64().unwrap_or(0);
            ensure((q_min..=q_max).contains(&q), || format!("run {run}: dispatched Q={q} at t={}", d.t))?;
            dispatches += 1;
        }
        for (id, (created, t_a, t_max)) in seen {
            let expected = created + lambda * (t_a - created);
            ensure((t_max - expected).abs() <= 1e-9 * t_max.abs().max(1.0), || {
                format!("run {run}: group {id} T_max={t_max}, expected {expected}")
            })?;
            groups_checked += 1;
        }
    }
    let elapsed = start.elapsed();
    within(Duration::from_secs(60), elapsed)?;
    Ok(format!("{dispatches} dispatches and {groups_checked} groups, zero violations ({elapsed:.1?})"))
}

// ---------------------------------------------------------------- 5

fn staleness() -> Check {
    for (s, expected) in [(0u64, 0.9), (3, 0.45), (8, 0.3)] {
        let got = staleness_factor(s, 0.9, 0.5);
        ensure((got - expected).abs() <= 1e-12, || format!("st({s}) = {got}, expected {expected}"))?;
    }
    Ok("st(0)=0.9000, st(3)=0.4500, st(8)=0.3000".into())
}

// ---------------------------------------------------------------- 6

fn gradients() -> Check {
    let mut rng = RngStream::new(11, 0);
    let mut worst: f64 = 0.0;
    for instance in 0..200u64 {
        let d = rng.random_range(1..=8usize);
        let k = rng.random_range(2..=5usize);
        let spec = if instance % 2 == 0 {
            ModelSpec::softmax(d, k)
        } else {
            ModelSpec::mlp(d, rng.random_range(1..=6usize), k)
        };
        let mut w = spec.init_params(&mut rng);
        // move away from the initialisation so biases are non-trivial
        for x in w.as_mut_slice() {
            *x += rng.random_range(-0.5..0.5);
        }
        let n = rng.random_range(1..=6usize);
        let features = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
        let batch = Batch::new(features, labels);

        let analytic = spec.grad(&w, &batch).map_err(|e| e.to_string())?;
        let h = 1e-5;
        let numeric: Vec<f64> = (0..w.len())
            .map(|i| {
                let mut plus = w.clone();
                plus.as_mut_slice()[i] += h;
                let mut minus = w.clone();
                minus.as_mut_slice()[i] -= h;
                (spec.loss(&plus, &batch).unwrap() - spec.loss(&minus, &batch).unwrap()) / (2.0 * h)
            })
            .collect();
        let numeric = ParamVector::from_vec(numeric);
        let err = analytic.max_abs_diff(&numeric) / analytic.norm().max(numeric.norm()).max(1e-8);
        worst = worst.max(err);
        ensure(err < 1e-5, || format!("instance {instance} ({:?}): relative error {err:.2e}", spec.kind))?;
    }
    Ok(format!("100 softmax + 100 MLP instances, worst relative error {worst:.1e}"))
}

// ---------------------------------------------------------------- 7

fn class_shares(p: &fedcompass::datagen::Partition, data: &Dataset) -> Vec<Vec<f64>> {
    p.class_counts(data)
        .into_iter()
        .map(|counts| {
            let total: usize = counts.iter().sum();
            counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
        })
        .collect()
}

fn partitions() -> Check {
    let start = Instant::now();
    let data = synth_blobs(10, 4, 60, 0.5, 3);
    let class_totals = data.class_histogram();
    for seed in 0..50u64 {
        let (n_min, n_max) = (2, 4);
        let spec = PartitionSpec::ClassPartition {
            m: 8,
            n_min,
            n_max,
            mean_samples: 10.0,
            std_samples: 3.0,
        };
        let p = partition(&data, &spec, seed).map_err(|e| format!("seed {seed}: {e}"))?;
        let counts = p.class_counts(&data);
        let mut per_class = vec![0usize; 10];
        for (client, row) in counts.iter().enumerate() {
            let held = row.iter().filter(|&&c| c > 0).count();
            ensure((n_min..=n_max).contains(&held), || format!("seed {seed}: client {client} holds {held} classes"))?;
            for (c, &k) in row.iter().enumerate() {
                per_class[c] += k;
            }
        }
        ensure(per_class == class_totals, || format!("seed {seed}: class totals {per_class:?} != {class_totals:?}"))?;
        let mut all: Vec<usize> = p.clients.concat();
        all.sort_unstable();
        all.dedup();
        ensure(all.len() == data.len(), || format!("seed {seed}: samples lost or duplicated"))?;
    }

    // every class is fully distributed, so a concentrated client can only hold
    // a single class when clients outnumber classes
    let prior: Vec<f64> = class_totals.iter().map(|&c| c as f64 / data.len() as f64).collect();
    let (mut tv_sum, mut max_share_sum) = (0.0, 0.0);
    for seed in 0..20u64 {
        let flat = partition(&data, &PartitionSpec::DualDirichlet { m: 20, alpha1: 100.0, alpha2: 1e6 }, seed)
            .map_err(|e| e.to_string())?;
        let shares = class_shares(&flat, &data);
        tv_sum += shares
            .iter()
            .map(|s| 0.5 * s.iter().zip(&prior).map(|(a, b)| (a - b).abs()).sum::<f64>())
            .sum::<f64>()
            / shares.len() as f64;

        let skewed = partition(&data, &PartitionSpec::DualDirichlet { m: 20, alpha1: 100.0, alpha2: 0.01 }, seed)
            .map_err(|e| e.to_string())?;
        let shares = class_shares(&skewed, &data);
        max_share_sum +=
            shares.iter().map(|s| s.iter().copied().fold(0.0, f64::max)).sum::<f64>() / shares.len() as f64;
    }
    let (tv, max_share) = (tv_sum / 20.0, max_share_sum / 20.0);
    ensure(tv < 0.05, || format!("mean TV distance {tv:.4} with near-uniform mixes"))?;
    ensure(max_share > 0.9, || format!("mean max-class share {max_share:.4} with concentrated mixes"))?;
    let elapsed = start.elapsed();
    within(Duration::from_secs(30), elapsed)?;
    Ok(format!("50 class partitions valid; TV {tv:.4}, max share {max_share:.4} ({elapsed:.1?})"))
}

// ---------------------------------------------------------------- 8

fn multi_client_aggregations(hetero: Value) -> Result<(usize, usize), String> {
    let config = small_config(
        5,
        0,
        hetero,
        json!({"kind": "fedcompass", "Qmin": 50, "Qmax": 50, "B": 4}),
        json!({"global_updates": 55}),
    );
    let (_, trace) = run_experiment(&config).map_err(|e| e.to_string())?;
    let sizes: Vec<usize> = trace
        .of_kind("group-aggregate")
        .map(|agg| agg.detail["clients"].as_array().map_or(0, Vec::len))
        .collect();
    Ok((sizes.iter().filter(|&&n| n != 1).count(), sizes.len()))
}

fn degenerate_groups() -> Check {
    // a client still joins a group whenever the time left until its T_a lies
    // within one step of Q steps, so the panel uses unselected sampled speeds
    let mut failing = Vec::new();
    let (mut multi, mut total) = (0, 0);
    for seed in 0..10u64 {
        let speeds = fedcompass::hetero::sample_base_speeds(&fedcompass::hetero::SpeedDist::Exponential { mean: 0.1 }, 5, seed);
        let (bad, n) = multi_client_aggregations(json!({"step_times": speeds, "jitter_cv": 0.0}))?;
        ensure(n >= 50, || format!("seed {seed}: only {n} group aggregations"))?;
        if bad > 0 {
            failing.push(format!("seed {seed}: {bad}/{n}"));
        }
        multi += bad;
        total += n;
    }
    let fixed = |speeds: [f64; 5]| multi_client_aggregations(json!({"step_times": speeds, "jitter_cv": 0.0}));
    let (even, even_n) = fixed([0.1, 0.2, 0.25, 0.4, 0.5])?;
    let r = |x: f64| 0.1 * x.sqrt();
    let (generic, generic_n) = fixed([r(1.0), r(2.0), r(3.0), r(5.0), r(7.0)])?;
    let context = format!(
        "walkthrough speeds {even}/{even_n}, sqrt-ratio speeds {generic}/{generic_n} multi-client aggregations"
    );
    if failing.is_empty() {
        Ok(format!("10 sampled speed sets, {total} aggregations, one client each; {context}"))
    } else {
        Err(format!(
            "{multi}/{total} aggregations hold several clients ({}); {context}",
            failing.join(", ")
        ))
    }
}

// ---------------------------------------------------------------- 9

fn convergence_config(kind: &str) -> ExperimentConfig {
    ExperimentConfig::from_value(json!({
        "clients": 5,
        "dataset": {"kind": "blobs", "n_classes": 10, "dim": 20, "n_per_class": 200, "spread": 0.3},
        "partition": {"kind": "dual-dirichlet", "alpha1": 5.0, "alpha2": 0.5},
        "heterogeneity": {"dist": "exp"},
        "model": {"kind": "softmax-regression"},
        "algorithm": {"kind": kind, "Q": 100, "Qmin": 20, "Qmax": 100, "eta_l": 0.05, "B": 32},
        "stop": {"time_budget": 200.0},
        "target_accuracy": 0.85
    }))
    .expect("valid config")
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn convergence_direction() -> Check {
    let start = Instant::now();
    let seeds: Vec<u64> = (0..10).collect();
    let mut time = BTreeMap::new();
    let mut final_acc = BTreeMap::new();
    for kind in ["fedcompass", "fedavg", "fedasync"] {
        let mut times = Vec::new();
        let mut finals = Vec::new();
        for run in run_seeds(&convergence_config(kind), &seeds) {
            let run = run.map_err(|e| format!("{kind}: {e}"))?;
            times.push(run.metrics.time_to_accuracy(0.85).unwrap_or(f64::INFINITY));
            finals.push(run.metrics.final_accuracy().unwrap_or(0.0));
        }
        time.insert(kind, median(times));
        final_acc.insert(kind, finals.iter().sum::<f64>() / finals.len() as f64);
    }
    let elapsed = start.elapsed();
    let summary = format!(
        "median time to 85%: fedcompass {:.1}, fedavg {:.1} min; mean final accuracy: fedcompass {:.4}, fedasync {:.4} ({elapsed:.1?})",
        time["fedcompass"], time["fedavg"], final_acc["fedcompass"], final_acc["fedasync"]
    );
    let mut failures = Vec::new();
    if !(time["fedcompass"] < time["fedavg"]) {
        failures.push("fedcompass is not faster than fedavg");
    }
    if !(final_acc["fedcompass"] >= final_acc["fedasync"] - 0.02) {
        failures.push("fedcompass final accuracy trails fedasync by more than 0.02");
    }
    if elapsed >= Duration::from_secs(300) {
        failures.push("over the 5 minute limit");
    }
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}; {summary}", failures.join("; ")))
    }
}

// ---------------------------------------------------------------- 10

fn determinism() -> Check {
    let mut configs = Vec::new();
    for kind in ["fedavg", "fedavgm", "fedasync", "fedbuff", "fedat", "fedcompass", "fedcompass+m", "fedcompass+n"] {
        for (i, partition) in [
            json!({"kind": "dual-dirichlet", "alpha1": 5.0, "alpha2": 0.5}),
            json!({"kind": "class-partition", "n_min": 1, "n_max": 2}),
        ]
        .into_iter()
        .enumerate()
        {
            configs.push(json!({
                "seed": 3 + i,
                "clients": 4,
                "dataset": {"kind": "blobs", "n_classes": 4, "dim": 6, "n_per_class": 40, "spread": 0.4},
                "partition": partition,
                "heterogeneity": {"dist": "exp"},
                "algorithm": {"kind": kind, "Q": 20, "Qmin": 5, "Qmax": 20, "B": 8},
                "stop": {"global_updates": 30}
            }));
        }
    }
    let base = configs[10].clone();
    let variants = [
        json!({"heterogeneity": {"dist": "normal", "change_prob": 0.3}}),
        json!({"model": {"kind": "mlp1-hidden", "hidden_dim": 8}}),
        json!({"algorithm": {"kind": "fedcompass", "Qmin": 5, "Qmax": 20, "optimizer": "adam"}}),
        json!({"comm_delay": 0.05, "stop": {"time_budget": 20.0}}),
    ];
    for patch in variants {
        let mut c = base.clone();
        for (k, v) in patch.as_object().unwrap() {
            c[k] = v.clone();
        }
        configs.push(c);
    }

    for (i, value) in configs.iter().enumerate() {
        let config = ExperimentConfig::from_value(value.clone()).map_err(|e| format!("config {i}: {e}"))?;
        let (m1, t1) = run_experiment(&config).map_err(|e| format!("config {i}: {e}"))?;
        let (m2, t2) = run_experiment(&config).map_err(|e| format!("config {i}: {e}"))?;
        ensure(m1.to_csv_string() == m2.to_csv_string(), || format!("config {i}: CSV differs"))?;
        ensure(t1.hash() == t2.hash(), || format!("config {i}: trace hash differs"))?;
    }
    Ok(format!("{}/{} configs byte-identical", configs.len(), configs.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("five-client walkthrough replay", walkthrough),
        ("speed-change replays", speed_changes),
        ("equilibrium group bound", group_bound),
        ("step-count and deadline invariants", step_and_deadline_laws),
        ("staleness function", staleness),
        ("gradient correctness", gradients),
        ("partition properties", partitions),
        ("equal step bounds degenerate to single-client groups", degenerate_groups),
        ("desk-scale convergence direction", convergence_direction),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
