//! Live arrival groups over time for static client speeds, against the
//! equilibrium bound.

use fedcompass::compass::equilibrium_group_bound;
use fedcompass::runner::{run_experiment_observed, ExperimentConfig, Observation};
use serde_json::json;

fn main() -> anyhow::Result<()> {
    let speeds = [0.01, 0.012, 0.02, 0.045, 0.06, 0.09, 0.2];
    let config = ExperimentConfig::from_value(json!({
        "clients": speeds.len(),
        "dataset": {"kind": "blobs", "n_classes": 4, "dim": 4, "n_per_class": 50, "spread": 0.5},
        "partition": {"kind": "dual-dirichlet", "alpha1": 100.0, "alpha2": 1.0},
        "heterogeneity": {"step_times": speeds, "jitter_cv": 0.0},
        "algorithm": {"kind": "fedcompass", "Qmin": 20, "Qmax": 100, "B": 8},
        "stop": {"time_budget": 120.0}
    }))?;
    println!("bound: {} groups", equilibrium_group_bound(20, 100, &speeds));
    let mut last = None;
    let mut observe = |o: &Observation<'_>| {
        let Some(s) = o.server.scheduler() else { return };
        let groups: Vec<Vec<usize>> = s
            .groups()
            .values()
            .map(|g| {
                let mut members: Vec<usize> = g.pending.iter().chain(&g.arrived).copied().collect();
                members.sort_unstable();
                members
            })
            .collect();
        if last.as_ref() != Some(&groups) {
            println!("{:>7.2}  {} groups {:?}", o.now, groups.len(), groups);
            last = Some(groups);
        }
    };
    run_experiment_observed(&config, &mut observe)?;
    Ok(())
}
