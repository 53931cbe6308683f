//! Client step-time profiles and per-round jitter.

use fedcompass::hetero::{realize_round_time, sample_base_speeds, SpeedDist};
use fedcompass::sim::RngStream;

fn main() {
    let mean = 0.15 / 60.0;
    for dist in [
        SpeedDist::Homogeneous { mean },
        SpeedDist::Normal { mean },
        SpeedDist::Exponential { mean },
    ] {
        let mut speeds = sample_base_speeds(&dist, 10, 0);
        speeds.sort_by(f64::total_cmp);
        let ratio = speeds[9] / speeds[0];
        let secs: Vec<String> = speeds.iter().map(|t| format!("{:.3}", t * 60.0)).collect();
        println!("{dist:?}: s/step [{}], slowest/fastest {ratio:.1}", secs.join(", "));
    }
    let mut rng = RngStream::new(0, 7);
    let rounds: Vec<String> = (0..5)
        .map(|_| format!("{:.3}", realize_round_time(mean, 100, 0.05, &mut rng) * 60.0))
        .collect();
    println!("100 steps at 0.15 s/step with 5% jitter: [{}] s", rounds.join(", "));
}
