//! Every server strategy on the same desk-scale problem, compared by time to
//! a target accuracy relative to FedAvg.
//!
//! `cargo run --release --example algorithm_comparison -- 0.85`

use fedcompass::algorithms::StrategyKind;
use fedcompass::runner::{compare_runs, run_seeds, ExperimentConfig, TargetedRun};

fn main() -> anyhow::Result<()> {
    let target: f64 = std::env::args().nth(1).map_or(Ok(0.85), |a| a.parse())?;
    let base = ExperimentConfig::from_path(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/fedcompass_blobs.json"))?;
    let seeds: Vec<u64> = (0..5).collect();
    let mut tables = Vec::new();
    for kind in StrategyKind::ALL {
        let mut config = base.clone();
        config.algorithm.strategy.kind = kind;
        config.algorithm.strategy.q = config.algorithm.strategy.q_max;
        for run in run_seeds(&config, &seeds) {
            tables.push(run?.metrics);
        }
    }
    let runs: Vec<TargetedRun> = tables.iter().map(|table| TargetedRun { table, target }).collect();
    print!("{}", compare_runs(&runs, "fedavg")?);
    Ok(())
}
