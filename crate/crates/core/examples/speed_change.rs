//! A client changes speed mid-round: early, late-but-tolerated, and straggler.
//!
//! `cargo run --example speed_change -- 16`

use fedcompass::runner::scenarios::{describe, replay_speed_change, speed_change_step_time, CHANGING_CLIENT};

fn main() -> anyhow::Result<()> {
    let scenarios: Vec<u32> = match std::env::args().nth(1) {
        Some(arg) => vec![arg.parse()?],
        None => vec![14, 15, 16],
    };
    for scenario in scenarios {
        let step = speed_change_step_time(scenario)?;
        println!("scenario {scenario}: client {CHANGING_CLIENT} runs {step:.4} min/step in its second round");
        let (_, trace) = replay_speed_change(scenario)?;
        let window = trace.records().iter().filter(|r| (10.5..=16.0).contains(&r.t));
        for line in window.filter_map(describe) {
            println!("  {line}");
        }
    }
    Ok(())
}
