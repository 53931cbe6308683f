//! Replays the five-client scheduling walkthrough and prints the decisions
//! up to the first merge.

use fedcompass::runner::scenarios::{replay_walkthrough, timeline, WALKTHROUGH_STEP_TIMES};

fn main() -> anyhow::Result<()> {
    let (metrics, trace) = replay_walkthrough()?;
    println!("step times (min/step): {WALKTHROUGH_STEP_TIMES:?}");
    for line in timeline(&trace, 12.0) {
        println!("{line}");
    }
    println!(
        "{} global updates in 30 virtual minutes, final accuracy {:.3}",
        metrics.len() - 1,
        metrics.final_accuracy().unwrap_or(0.0)
    );
    Ok(())
}
