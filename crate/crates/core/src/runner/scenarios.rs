//! Fixed five-client scheduling scenarios with static speeds, no jitter and
//! no communication delay.
//!
//! Clients run 0.1, 0.2, 0.25, 0.4 and 0.5 minutes per step with `Qmin = 20`,
//! `Qmax = 100` and `λ = 1.2`, so the warm-up arrivals land at 2, 4, 5, 8 and
//! 10 minutes. In the speed-change variants client 2 (the third client)
//! changes speed for its second round, which it starts at minute 5 with 28
//! steps in the first group (expected arrival 12:00, latest 14:00):
//!
//! * `14`: 0.2 min/step, arrives early at 10:36 and waits for the group;
//! * `15`: 0.3 min/step, arrives late at 13:24 but before the latest time;
//! * `16`: arrives at 15:12, after the group was aggregated by its timer.

use serde_json::{json, Value};
use thiserror::Error;

use super::{run_experiment, ExperimentConfig, MetricsTable, RunError};
use crate::hetero::SpeedChange;
use crate::sim::{SimTrace, TraceRecord, VirtualTime};

pub const WALKTHROUGH_STEP_TIMES: [f64; 5] = [0.1, 0.2, 0.25, 0.4, 0.5];

/// Client whose speed changes in the speed-change scenarios.
pub const CHANGING_CLIENT: usize = 2;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("no speed-change scenario {0}; choose 14, 15 or 16")]
    UnknownScenario(u32),
    #[error(transparent)]
    Run(#[from] RunError),
}

fn walkthrough_value(minutes: f64) -> Value {
    json!({
        "seed": 0,
        "clients": 5,
        "dataset": {"kind": "blobs", "n_classes": 4, "dim": 4, "n_per_class": 25, "spread": 0.5},
        "partition": {"kind": "dual-dirichlet", "alpha1": 100.0, "alpha2": 100.0},
        "heterogeneity": {"step_times": WALKTHROUGH_STEP_TIMES, "jitter_cv": 0.0},
        "algorithm": {"kind": "fedcompass", "Qmin": 20, "Qmax": 100, "lambda": 1.2, "B": 8},
        "stop": {"time_budget": minutes}
    })
}

/// The five-client walkthrough, run for 30 virtual minutes.
pub fn walkthrough_config() -> ExperimentConfig {
    ExperimentConfig::from_value(walkthrough_value(30.0)).expect("walkthrough config is valid")
}

/// Second-round step time of the changing client in each scenario.
pub fn speed_change_step_time(scenario: u32) -> Result<f64, ScenarioError> {
    match scenario {
        // 28 steps ending at 10.6, 13.4 and 15.2; written as a quotient so
        // the arrival time comes out exact in floating point
        14 => Ok(5.6 / 28.0),
        15 => Ok(8.4 / 28.0),
        16 => Ok(10.2 / 28.0),
        other => Err(ScenarioError::UnknownScenario(other)),
    }
}

pub fn speed_change_config(scenario: u32) -> Result<ExperimentConfig, ScenarioError> {
    let step_time = speed_change_step_time(scenario)?;
    let mut config = ExperimentConfig::from_value(walkthrough_value(25.0)).expect("walkthrough config is valid");
    config.heterogeneity.script = vec![SpeedChange {
        client: CHANGING_CLIENT,
        round: 2,
        step_time,
    }];
    Ok(config)
}

pub fn replay_walkthrough() -> Result<(MetricsTable, SimTrace), RunError> {
    run_experiment(&walkthrough_config())
}

pub fn replay_speed_change(scenario: u32) -> Result<(MetricsTable, SimTrace), ScenarioError> {
    Ok(run_experiment(&speed_change_config(scenario)?)?)
}

/// Trace kinds describing scheduling decisions.
pub const DECISION_KINDS: [&str; 10] = [
    "client-arrival",
    "speed-change",
    "join",
    "create",
    "merge",
    "group-buffer",
    "straggler-buffer",
    "group-timer",
    "group-aggregate",
    "delete-group",
];

/// Human-readable line for a scheduling record.
pub fn describe(record: &TraceRecord) -> Option<String> {
    let d = &record.detail;
    let time = VirtualTime::new(record.t);
    let client = || d["client"].as_u64().unwrap_or(0);
    let text = match record.kind.as_str() {
        "client-arrival" => format!("client {} arrives (round {}, {} steps)", client(), d["round"], d["steps"]),
        "speed-change" => format!(
            "client {} now runs {} min/step (was {})",
            client(),
            round3(&d["to"]),
            round3(&d["from"])
        ),
        "join" | "create" | "merge" => {
            let candidates: Vec<String> = d["candidates"]
                .as_array()
                .map(|cs| {
                    cs.iter()
                        .map(|c| format!("g{}:q={}", c["group"], c["q"]))
                        .collect()
                })
                .unwrap_or_default();
            let verb = match (record.kind.as_str(), d["created"].as_bool()) {
                ("merge", Some(true)) => "merges into new group",
                ("merge", _) => "merges into group",
                ("create", _) => "creates group",
                _ => "joins group",
            };
            let mut line = format!(
                "client {} {verb} {} with Q={} (T_a={}, T_max={})",
                client(),
                d["group"],
                d["q"],
                round3(&d["t_a"]),
                round3(&d["t_max"])
            );
            if !candidates.is_empty() {
                line.push_str(&format!(" [candidates {}]", candidates.join(", ")));
            }
            line
        }
        "group-buffer" => format!("client {} buffered for group {}", client(), d["group"]),
        "straggler-buffer" => format!(
            "client {} missed group {}; update goes to the general buffer",
            client(),
            d["group"]
        ),
        "group-timer" => format!("timer for group {}", d["group"]),
        "group-aggregate" => format!(
            "group {} aggregated ({}) with clients {}",
            d["group"],
            d["trigger"].as_str().unwrap_or("?"),
            d["clients"]
        ),
        "delete-group" => format!("group {} deleted", d["group"]),
        _ => return None,
    };
    Some(format!("{time}  {text}"))
}

fn round3(v: &Value) -> String {
    v.as_f64().map_or_else(|| v.to_string(), |x| format!("{:.3}", x).trim_end_matches('0').trim_end_matches('.').to_string())
}

/// Scheduling timeline up to `until` minutes.
pub fn timeline(trace: &SimTrace, until: f64) -> Vec<String> {
    trace
        .records()
        .iter()
        .filter(|r| r.t <= until)
        .filter_map(describe)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_scenario_is_rejected() {
        assert!(matches!(speed_change_config(13), Err(ScenarioError::UnknownScenario(13))));
    }

    #[test]
    fn walkthrough_creates_first_group_at_two_minutes() {
        let (_, trace) = replay_walkthrough().unwrap();
        let create = trace.of_kind("create").next().unwrap();
        assert_eq!(create.t, 2.0);
        assert_eq!(create.detail["t_a"], 12.0);
        let lines = timeline(&trace, 12.0);
        assert!(lines.iter().any(|l| l.starts_with("02:00  client 0 creates group 1 with Q=100")));
    }

    #[test]
    fn rounding_helper() {
        assert_eq!(round3(&json!(14.000000000000002)), "14");
        assert_eq!(round3(&json!(24.8)), "24.8");
    }
}
