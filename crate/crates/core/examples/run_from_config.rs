//! Runs a JSON config for three seeds and writes CSV, trace and summary files.
//!
//! `cargo run --release --example run_from_config -- examples/configs/fedbuff_class_partition.json out/`

use std::path::PathBuf;

use fedcompass::runner::{run_seeds, summarize, write_run_outputs, ExperimentConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/fedcompass_blobs.json").into());
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("fedcompass-run"));
    let config = ExperimentConfig::from_path(&path)?;
    let mut tables = Vec::new();
    for run in run_seeds(&config, &[0, 1, 2]) {
        let run = run?;
        write_run_outputs(&out, &run)?;
        tables.push(run.metrics);
    }
    println!("{}", serde_json::to_string_pretty(&summarize(&tables, config.target_accuracy))?);
    println!("outputs in {}", out.display());
    Ok(())
}
