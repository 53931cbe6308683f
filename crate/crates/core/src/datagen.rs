//! Datasets, non-IID client partitioning, and IDX ingestion.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::RngStream;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("feature matrix has {got} values, expected {rows} rows x {dim}")]
    Shape { rows: usize, dim: usize, got: usize },
    #[error("label {label} is not below n_classes = {n_classes}")]
    Label { label: usize, n_classes: usize },
    #[error("invalid partition spec: {0}")]
    InvalidSpec(String),
    #[error("class partition found no covering draw after {0} attempts")]
    CoverageNotReached(usize),
    #[error("{path}: {msg} at byte offset {offset}")]
    Format {
        path: String,
        offset: usize,
        msg: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    n_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        n_classes: usize,
    ) -> Result<Self, DataError> {
        if features.len() != labels.len() * dim {
            return Err(DataError::Shape {
                rows: labels.len(),
                dim,
                got: features.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(DataError::Label { label, n_classes });
        }
        Ok(Dataset {
            features,
            labels,
            dim,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Sample indices grouped by class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_classes];
        for &l in &self.labels {
            out[l] += 1;
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            dim: self.dim,
            n_classes: self.n_classes,
        }
    }

    /// Stratified holdout: `fraction` of every class (rounded down) goes to the second set.
    pub fn split_holdout(&self, fraction: f64, rng: &mut RngStream) -> (Dataset, Dataset) {
        let mut train = Vec::new();
        let mut held = Vec::new();
        for mut idx in self.class_indices() {
            idx.shuffle(rng);
            let k = (idx.len() as f64 * fraction).floor() as usize;
            held.extend_from_slice(&idx[..k]);
            train.extend_from_slice(&idx[k..]);
        }
        train.sort_unstable();
        held.sort_unstable();
        (self.subset(&train), self.subset(&held))
    }
}

/// Gaussian clusters around unit-norm random centres.
pub fn synth_blobs(
    n_classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> Dataset {
    let mut rng = RngStream::new(seed, crate::sim::streams::DATA);
    let centers: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let mut features = Vec::with_capacity(n_classes * n_per_class * dim);
    let mut labels = Vec::with_capacity(n_classes * n_per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            for &x in center {
                let noise: f64 = StandardNormal.sample(&mut rng);
                features.push(x + spread * noise);
            }
            labels.push(c);
        }
    }
    Dataset {
        features,
        labels,
        dim,
        n_classes,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PartitionSpec {
    ClassPartition {
        m: usize,
        n_min: usize,
        n_max: usize,
        #[serde(default = "default_mean")]
        mean_samples: f64,
        #[serde(default = "default_std")]
        std_samples: f64,
    },
    DualDirichlet {
        m: usize,
        alpha1: f64,
        alpha2: f64,
    },
}

fn default_mean() -> f64 {
    10.0
}
fn default_std() -> f64 {
    3.0
}

impl PartitionSpec {
    pub fn clients(&self) -> usize {
        match *self {
            PartitionSpec::ClassPartition { m, .. } | PartitionSpec::DualDirichlet { m, .. } => m,
        }
    }

    pub fn validate(&self, n_classes: usize) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::InvalidSpec(msg));
        match *self {
            PartitionSpec::ClassPartition {
                m,
                n_min,
                n_max,
                mean_samples,
                std_samples,
            } => {
                if m == 0 {
                    return bad("m must be at least 1".into());
                }
                if n_min == 0 || n_min > n_max || n_max > n_classes {
                    return bad(format!(
                        "need 1 <= n_min <= n_max <= n_classes, got {n_min}, {n_max}, {n_classes}"
                    ));
                }
                if m * n_max < n_classes {
                    return bad(format!(
                        "{m} clients x {n_max} classes cannot cover {n_classes} classes"
                    ));
                }
                if !(mean_samples > 0.0) || !(std_samples >= 0.0) {
                    return bad("sample-count mean must be positive and std non-negative".into());
                }
            }
            PartitionSpec::DualDirichlet { m, alpha1, alpha2 } => {
                if m == 0 {
                    return bad("m must be at least 1".into());
                }
                if !(alpha1 > 0.0 && alpha2 > 0.0) || !alpha1.is_finite() || !alpha2.is_finite() {
                    return bad(format!("concentrations must be positive, got {alpha1}, {alpha2}"));
                }
            }
        }
        Ok(())
    }
}

/// Sample indices held by each client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub clients: Vec<Vec<usize>>,
}

impl Partition {
    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.clients.iter().map(Vec::len).sum()
    }

    /// Relative sample share `p_i` of every client.
    pub fn weights(&self) -> Vec<f64> {
        let total = self.total() as f64;
        self.clients.iter().map(|c| c.len() as f64 / total).collect()
    }

    /// Per-client class counts.
    pub fn class_counts(&self, data: &Dataset) -> Vec<Vec<usize>> {
        self.clients
            .iter()
            .map(|idx| {
                let mut h = vec![0; data.n_classes()];
                for &i in idx {
                    h[data.labels()[i]] += 1;
                }
                h
            })
            .collect()
    }

    pub fn materialize(&self, data: &Dataset) -> Vec<Dataset> {
        self.clients.iter().map(|idx| data.subset(idx)).collect()
    }
}

/// Upper bound on class-assignment redraws.
pub const MAX_CLASS_DRAWS: usize = 1000;

pub fn partition(data: &Dataset, spec: &PartitionSpec, seed: u64) -> Result<Partition, DataError> {
    match spec {
        PartitionSpec::ClassPartition { .. } => class_partition(data, spec, seed),
        PartitionSpec::DualDirichlet { .. } => dual_dirichlet_partition(data, spec, seed),
    }
}

/// Each client receives a few classes; every class is held by at least one client.
pub fn class_partition(
    data: &Dataset,
    spec: &PartitionSpec,
    seed: u64,
) -> Result<Partition, DataError> {
    let PartitionSpec::ClassPartition {
        m,
        n_min,
        n_max,
        mean_samples,
        std_samples,
    } = *spec
    else {
        return Err(DataError::InvalidSpec("expected a class-partition spec".into()));
    };
    let n = data.n_classes();
    spec.validate(n)?;
    let mut rng = RngStream::new(seed, crate::sim::streams::PARTITION);
    let count_dist = Normal::new(mean_samples, std_samples)
        .map_err(|e| DataError::InvalidSpec(e.to_string()))?;
    let pools = data.class_indices();
    let present: Vec<usize> = (0..n).filter(|&c| !pools[c].is_empty()).collect();

    for _ in 0..MAX_CLASS_DRAWS {
        // holders[c]: clients that drew class c
        let mut holders: Vec<Vec<usize>> = vec![Vec::new(); n];
        for client in 0..m {
            let k = rng.random_range(n_min..=n_max);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            for &c in &perm[..k] {
                holders[c].push(client);
            }
        }
        if holders.iter().any(Vec::is_empty) {
            continue;
        }
        // every holder gets at least one sample of each class it drew
        if present.iter().any(|&c| holders[c].len() > pools[c].len()) {
            continue;
        }
        let mut clients = vec![Vec::new(); m];
        for &c in &present {
            let mut pool = pools[c].clone();
            pool.shuffle(&mut rng);
            let raw: Vec<f64> = holders[c]
                .iter()
                .map(|_| count_dist.sample(&mut rng).max(0.1 * mean_samples))
                .collect();
            let counts = apportion(&raw, pool.len() - raw.len());
            let mut at = 0;
            for (&client, &k) in holders[c].iter().zip(&counts) {
                clients[client].extend_from_slice(&pool[at..at + k + 1]);
                at += k + 1;
            }
        }
        if clients.iter().any(Vec::is_empty) {
            continue;
        }
        clients.iter_mut().for_each(|c| c.sort_unstable());
        return Ok(Partition { clients });
    }
    Err(DataError::CoverageNotReached(MAX_CLASS_DRAWS))
}

/// Splits `total` proportionally to `weights`: floor every share, then hand the
/// remainder out by largest fractional part (ties to the lower index).
fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Dirichlet draw via Gamma variates, computed in log space so that tiny
/// concentrations do not underflow to an all-zero vector.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    // G(a) = G(a + 1) * U^(1/a)
    let logs: Vec<f64> = alpha
        .iter()
        .map(|&a| {
            let g: f64 = Gamma::new(a + 1.0, 1.0)
                .expect("shape is positive")
                .sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / a
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Two-level Dirichlet split: client sizes from `Dir(alpha1 / m)`, per-client
/// class mixes from `Dir(alpha2 * prior)`.
pub fn dual_dirichlet_partition(
    data: &Dataset,
    spec: &PartitionSpec,
    seed: u64,
) -> Result<Partition, DataError> {
    let PartitionSpec::DualDirichlet { m, alpha1, alpha2 } = *spec else {
        return Err(DataError::InvalidSpec("expected a dual-dirichlet spec".into()));
    };
    let n = data.n_classes();
    spec.validate(n)?;
    let mut rng = RngStream::new(seed, crate::sim::streams::PARTITION);
    let pools = data.class_indices();
    let total = data.len() as f64;

    let client_alpha = vec![alpha1 / m as f64; m];
    let client_wts = sample_dirichlet(&client_alpha, &mut rng);
    let class_alpha: Vec<f64> = pools
        .iter()
        .map(|p| alpha2 * (p.len() as f64 / total))
        .collect();
    // classes absent from the data get zero concentration; skip them in the draw
    let class_wts: Vec<Vec<f64>> = (0..m)
        .map(|_| {
            let live: Vec<f64> = class_alpha.iter().copied().filter(|&a| a > 0.0).collect();
            let draw = sample_dirichlet(&live, &mut rng);
            let mut it = draw.into_iter();
            class_alpha
                .iter()
                .map(|&a| if a > 0.0 { it.next().unwrap() } else { 0.0 })
                .collect()
        })
        .collect();

    let mut shuffled: Vec<Vec<usize>> = pools.clone();
    shuffled.iter_mut().for_each(|p| p.shuffle(&mut rng));
    let mut taken = vec![0usize; n];
    let mut clients = vec![Vec::new(); m];
    for c in 0..n {
        let denom: f64 = (0..m).map(|i| client_wts[i] * class_wts[i][c]).sum();
        if denom <= 0.0 {
            continue;
        }
        for i in 0..m {
            let share = client_wts[i] * class_wts[i][c] * pools[c].len() as f64 / denom;
            let k = (share.floor() as usize).min(pools[c].len() - taken[c]);
            clients[i].extend_from_slice(&shuffled[c][taken[c]..taken[c] + k]);
            taken[c] += k;
        }
    }
    // empty clients get one sample, from the largest unassigned pool if any
    for i in 0..m {
        if !clients[i].is_empty() {
            continue;
        }
        let spare = (0..n)
            .filter(|&c| taken[c] < pools[c].len())
            .max_by_key(|&c| (pools[c].len() - taken[c], std::cmp::Reverse(c)));
        if let Some(c) = spare {
            clients[i].push(shuffled[c][taken[c]]);
            taken[c] += 1;
        } else if let Some(donor) = (0..m).filter(|&j| clients[j].len() > 1).max_by_key(|&j| clients[j].len()) {
            let s = clients[donor].pop().unwrap();
            clients[i].push(s);
        }
    }
    clients.iter_mut().for_each(|c| c.sort_unstable());
    Ok(Partition { clients })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_bytes(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Format {
            path: path.display().to_string(),
            offset,
            msg: "truncated header".into(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<(), DataError> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != expected {
        return Err(DataError::Format {
            path: path.display().to_string(),
            offset: 0,
            msg: format!("bad magic 0x{magic:08X}, expected 0x{expected:08X}"),
        });
    }
    Ok(())
}

/// Reads an IDX image file; returns `(pixels scaled to [0, 1], n, rows * cols)`.
pub fn read_idx_images(path: impl AsRef<Path>) -> Result<(Vec<f64>, usize, usize), DataError> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    check_magic(&bytes, IDX_IMAGES_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(DataError::Format {
            path: path.display().to_string(),
            offset: 16 + body.len(),
            msg: format!("pixel data truncated: {} of {need} bytes", body.len()),
        });
    }
    let pixels = body[..need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((pixels, n, rows * cols))
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>, DataError> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    check_magic(&bytes, IDX_LABELS_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(DataError::Format {
            path: path.display().to_string(),
            offset: 8 + body.len(),
            msg: format!("label data truncated: {} of {n} bytes", body.len()),
        });
    }
    Ok(body[..n].iter().map(|&b| b as usize).collect())
}

/// Loads an image/label IDX pair (e.g. MNIST). `n_classes` is `max label + 1`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let (pixels, n, dim) = read_idx_images(&images)?;
    let labels_path = labels.as_ref();
    let labels = read_idx_labels(labels_path)?;
    if labels.len() < n {
        return Err(DataError::Format {
            path: labels_path.display().to_string(),
            offset: 8 + labels.len(),
            msg: format!("{} labels for {n} images", labels.len()),
        });
    }
    let labels: Vec<usize> = labels.into_iter().take(n).collect();
    let n_classes = labels.iter().copied().max().map_or(1, |l| l + 1);
    Dataset::new(pixels, labels, dim, n_classes)
}

/// Writes an IDX image/label pair; used for fixtures.
pub fn write_idx(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    pixels: &[u8],
    rows: u32,
    cols: u32,
    label_bytes: &[u8],
) -> std::io::Result<()> {
    let n = (pixels.len() / (rows * cols) as usize) as u32;
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n, rows, cols] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    fs::write(images, img)?;
    let mut lab = Vec::with_capacity(8 + label_bytes.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(label_bytes.len() as u32).to_be_bytes());
    lab.extend_from_slice(label_bytes);
    fs::write(labels, lab)
}
