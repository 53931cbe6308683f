//! One client trains locally with SGD and Adam; the server evaluates.

use fedcompass::datagen::synth_blobs;
use fedcompass::learner::{evaluate, local_train, ModelSpec, OptimizerKind, TrainSettings};
use fedcompass::sim::RngStream;

fn main() -> anyhow::Result<()> {
    let data = synth_blobs(5, 10, 200, 0.3, 0);
    for spec in [ModelSpec::softmax(10, 5), ModelSpec::mlp(10, 16, 5)] {
        let w0 = spec.init_params(&mut RngStream::new(0, 0));
        for (name, optimizer, lr) in [("sgd", OptimizerKind::Sgd, 0.05), ("adam", OptimizerKind::adam(), 0.01)] {
            let settings = TrainSettings {
                optimizer,
                lr,
                batch_size: 32,
            };
            let update = local_train(&spec, &w0, &data, 200, &settings, &mut RngStream::new(0, 1))?;
            let mut w = w0.clone();
            w.axpy(-1.0, &update.delta);
            let eval = evaluate(&spec, &w, &data)?;
            println!(
                "{:?} {name:4}: accuracy {:.3}, loss {:.3}, |grad| {:.3} -> {:.3}",
                spec.kind,
                eval.accuracy,
                eval.loss,
                update.grad_norms[0],
                update.grad_norms.last().copied().unwrap_or(0.0)
            );
        }
    }
    Ok(())
}
