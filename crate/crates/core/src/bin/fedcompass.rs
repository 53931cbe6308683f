//! Command-line front end: run configs, compare CSVs, replay the fixed
//! scheduling scenarios.

use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use fedcompass::runner::scenarios::{self, replay_speed_change, replay_walkthrough, timeline};
use fedcompass::runner::{
    compare_runs, run_seeds, summarize, write_run_outputs, ConfigError, ExperimentConfig, MetricsTable, RunError,
    TargetedRun,
};

#[derive(Parser)]
#[command(name = "fedcompass", version, about = "Cross-silo federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config for one or more seeds.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Seed list, e.g. `--seed 1,2,3` or repeated `--seed`.
        #[arg(long, required = true, value_delimiter = ',', num_args = 1..)]
        seed: Vec<u64>,
        /// Directory for per-seed CSV, trace and summary files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Relative time to a target accuracy, from metrics CSV files.
    Compare {
        #[arg(long)]
        target: f64,
        #[arg(long)]
        baseline: String,
        #[arg(required = true)]
        csv: Vec<PathBuf>,
    },
    /// Replay the five-client scheduling walkthrough.
    ReplayFigure1,
    /// Replay a speed-change scenario.
    ReplaySpeedchange {
        #[arg(value_parser = clap::value_parser!(u32).range(14..=16))]
        scenario: u32,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        // output piped into e.g. `head`
        Err(err) if is_broken_pipe(&err) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_config_error(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn is_config_error(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<ConfigError>().is_some() || matches!(e.downcast_ref::<RunError>(), Some(RunError::Config(_)))
    })
}

fn is_broken_pipe(err: &anyhow::Error) -> bool {
    err.chain()
        .any(|e| matches!(e.downcast_ref::<io::Error>(), Some(e) if e.kind() == io::ErrorKind::BrokenPipe))
}

fn emit(text: &str) -> Result<()> {
    let mut out = io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run { config, seed, out } => run(config, seed, out),
        Command::Compare { target, baseline, csv } => compare(target, &baseline, &csv),
        Command::ReplayFigure1 => {
            let (_, trace) = replay_walkthrough()?;
            print_timeline("five-client walkthrough (client ids are zero-based)", &trace, 12.0)
        }
        Command::ReplaySpeedchange { scenario } => {
            let (_, trace) = replay_speed_change(scenario)?;
            let step = scenarios::speed_change_step_time(scenario)?;
            let title = format!(
                "speed-change scenario {scenario}: client {} runs {step:.4} min/step in round 2",
                scenarios::CHANGING_CLIENT
            );
            print_timeline(&title, &trace, 16.0)
        }
    }
}

fn print_timeline(title: &str, trace: &fedcompass::sim::SimTrace, until: f64) -> Result<()> {
    let mut text = format!("{title}\n");
    for line in timeline(trace, until) {
        text.push_str(&line);
        text.push('\n');
    }
    emit(&text)
}

fn run(config_path: PathBuf, seeds: Vec<u64>, out: Option<PathBuf>) -> Result<()> {
    let config = ExperimentConfig::from_path(&config_path)?;
    let runs = run_seeds(&config, &seeds);
    let mut tables = Vec::new();
    for (seed, result) in seeds.iter().zip(runs) {
        let run = result.with_context(|| format!("seed {seed}"))?;
        if let Some(dir) = &out {
            write_run_outputs(dir, &run)?;
        }
        tables.push(run.metrics);
    }
    let summary = summarize(&tables, config.target_accuracy);
    let summary_json = serde_json::to_string_pretty(&summary)?;
    match &out {
        Some(dir) => {
            std::fs::write(dir.join(format!("{}_summary.json", config.algorithm().name())), &summary_json)?;
            emit(&format!("{summary_json}\n"))
        }
        None if tables.len() == 1 => emit(&tables[0].to_csv_string()),
        None => emit(&format!("{summary_json}\n")),
    }
}

fn compare(target: f64, baseline: &str, paths: &[PathBuf]) -> Result<()> {
    if !(0.0..=1.0).contains(&target) {
        bail!(ConfigError::Invalid(vec![fedcompass::runner::Problem {
            key: "target".into(),
            reason: format!("must be in [0, 1], got {target}"),
        }]));
    }
    let tables = paths
        .iter()
        .map(|p| MetricsTable::read_csv_file(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let runs: Vec<TargetedRun> = tables.iter().map(|table| TargetedRun { table, target }).collect();
    emit(&compare_runs(&runs, baseline)?.to_string())
}
