//! Writes a tiny IDX image/label pair and runs an experiment on it.

use fedcompass::datagen::write_idx;
use fedcompass::runner::{run_experiment, ExperimentConfig};
use serde_json::json;

fn main() -> anyhow::Result<()> {
    let dir = std::env::temp_dir().join("fedcompass-idx");
    std::fs::create_dir_all(&dir)?;
    // 4x4 images: class k lights up row k
    let (mut pixels, mut labels) = (Vec::new(), Vec::new());
    for i in 0..400u32 {
        let class = (i % 4) as u8;
        for r in 0..4u8 {
            for c in 0..4u8 {
                let on = r == class;
                pixels.push(if on { 200 + (i as u8 ^ c) % 50 } else { (i as u8).wrapping_mul(c + 1) % 60 });
            }
        }
        labels.push(class);
    }
    let (images, label_file) = (dir.join("images.idx"), dir.join("labels.idx"));
    write_idx(&images, &label_file, &pixels, 4, 4, &labels)?;
    let config = ExperimentConfig::from_value(json!({
        "clients": 4,
        "dataset": {"kind": "idx", "images": images, "labels": label_file},
        "partition": {"kind": "class-partition", "n_min": 1, "n_max": 2},
        "algorithm": {"kind": "fedcompass", "Qmin": 10, "Qmax": 50, "B": 16},
        "stop": {"global_updates": 40}
    }))?;
    let (metrics, _) = run_experiment(&config)?;
    println!("final accuracy {:.3} after {} updates", metrics.final_accuracy().unwrap_or(0.0), metrics.len() - 1);
    Ok(())
}
