//! Class partition versus dual Dirichlet partition on the same data.

use fedcompass::datagen::{partition, synth_blobs, PartitionSpec};

fn show(name: &str, counts: &[Vec<usize>]) {
    println!("{name}");
    for (i, row) in counts.iter().enumerate() {
        let total: usize = row.iter().sum();
        println!("  client {i}: {total:>4} samples  {row:?}");
    }
}

fn main() -> anyhow::Result<()> {
    let data = synth_blobs(10, 8, 100, 0.3, 0);
    let class = PartitionSpec::ClassPartition {
        m: 5,
        n_min: 2,
        n_max: 4,
        mean_samples: 10.0,
        std_samples: 3.0,
    };
    show("class partition (2-4 classes per client)", &partition(&data, &class, 0)?.class_counts(&data));
    for alpha2 in [100.0, 0.5, 0.01] {
        let spec = PartitionSpec::DualDirichlet { m: 5, alpha1: 5.0, alpha2 };
        let p = partition(&data, &spec, 0)?;
        show(&format!("dual Dirichlet, alpha1=5, alpha2={alpha2}"), &p.class_counts(&data));
    }
    Ok(())
}
