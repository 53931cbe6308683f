//! Per-update validation metrics, CSV I/O and time-to-target comparisons.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CSV_HEADER: [&str; 6] = [
    "virtual_time",
    "global_update_idx",
    "val_accuracy",
    "val_loss",
    "algorithm",
    "seed",
];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("unexpected csv header {0:?}")]
    Header(Vec<String>),
    #[error("rows are not ordered by virtual time at row {0}")]
    Unordered(usize),
    #[error("runs use different target accuracies: {0} and {1}")]
    TargetMismatch(f64, f64),
    #[error("baseline algorithm {0:?} is not among the runs")]
    MissingBaseline(String),
}

/// One evaluation of the global model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Minutes.
    pub virtual_time: f64,
    pub global_update_idx: u64,
    pub val_accuracy: f64,
    pub val_loss: f64,
    pub algorithm: String,
    pub seed: u64,
}

/// Rows of one run, ordered by virtual time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn new(rows: Vec<MetricsRow>) -> Self {
        MetricsTable { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn algorithm(&self) -> Option<&str> {
        self.rows.first().map(|r| r.algorithm.as_str())
    }

    pub fn seed(&self) -> Option<u64> {
        self.rows.first().map(|r| r.seed)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.rows.last().map(|r| r.val_accuracy)
    }

    pub fn best_accuracy(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.val_accuracy).reduce(f64::max)
    }

    /// Earliest time at which accuracy reached `target`.
    pub fn time_to_accuracy(&self, target: f64) -> Option<f64> {
        time_to_accuracy(&self.rows, target)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), MetricsError> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(CSV_HEADER)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv output is UTF-8")
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<(), MetricsError> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, MetricsError> {
        let mut r = csv::Reader::from_reader(input);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != CSV_HEADER {
            return Err(MetricsError::Header(header));
        }
        let rows = r.deserialize().collect::<Result<Vec<MetricsRow>, _>>()?;
        if let Some(i) = rows.windows(2).position(|w| w[1].virtual_time < w[0].virtual_time) {
            return Err(MetricsError::Unordered(i + 1));
        }
        Ok(MetricsTable { rows })
    }

    pub fn read_csv_file(path: impl AsRef<Path>) -> Result<Self, MetricsError> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// First `virtual_time` whose accuracy is at least `target`.
pub fn time_to_accuracy(rows: &[MetricsRow], target: f64) -> Option<f64> {
    rows.iter().find(|r| r.val_accuracy >= target).map(|r| r.virtual_time)
}

/// A run together with the target it is judged against.
#[derive(Debug, Clone, Copy)]
pub struct TargetedRun<'a> {
    pub table: &'a MetricsTable,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub algorithm: String,
    pub runs: usize,
    /// Mean time to target over runs; `None` if any run never reached it.
    pub time: Option<f64>,
    /// `time / baseline time`.
    pub relative: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub target: f64,
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn row(&self, algorithm: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.algorithm == algorithm)
    }
}

/// `1.00×` style cell, `-` when the target was never reached.
pub fn relative_cell(relative: Option<f64>) -> String {
    match relative {
        Some(r) => format!("{r:.2}×"),
        None => "-".to_string(),
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "time to {:.2}% validation accuracy, relative to {}",
            self.target * 100.0,
            self.baseline
        )?;
        writeln!(f, "{:<14} {:>5} {:>12} {:>9}", "algorithm", "runs", "minutes", "relative")?;
        for r in &self.rows {
            let minutes = r.time.map_or("-".to_string(), |t| format!("{t:.2}"));
            writeln!(
                f,
                "{:<14} {:>5} {:>12} {:>9}",
                r.algorithm,
                r.runs,
                minutes,
                relative_cell(r.relative)
            )?;
        }
        Ok(())
    }
}

/// Relative time-to-target per algorithm. Runs of the same algorithm (e.g.
/// several seeds) are averaged; an algorithm that misses the target in any
/// run gets no time.
pub fn compare_runs(runs: &[TargetedRun<'_>], baseline: &str) -> Result<Comparison, MetricsError> {
    let target = runs.first().map_or(0.0, |r| r.target);
    if let Some(other) = runs.iter().find(|r| r.target != target) {
        return Err(MetricsError::TargetMismatch(target, other.target));
    }
    let mut by_alg: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
    for run in runs {
        let alg = run.table.algorithm().unwrap_or("").to_string();
        by_alg.entry(alg).or_default().push(run.table.time_to_accuracy(target));
    }
    let mean_time = |times: &[Option<f64>]| -> Option<f64> {
        let reached: Option<Vec<f64>> = times.iter().copied().collect();
        reached.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    let base_times = by_alg
        .get(baseline)
        .ok_or_else(|| MetricsError::MissingBaseline(baseline.to_string()))?;
    let base = mean_time(base_times);
    let rows = by_alg
        .iter()
        .map(|(alg, times)| {
            let time = mean_time(times);
            let relative = match (time, base) {
                (Some(t), Some(b)) if b > 0.0 => Some(t / b),
                // both hit the target at time zero
                (Some(0.0), Some(_)) => Some(1.0),
                _ => None,
            };
            ComparisonRow {
                algorithm: alg.clone(),
                runs: times.len(),
                time,
                relative,
            }
        })
        .collect();
    Ok(Comparison {
        target,
        baseline: baseline.to_string(),
        rows,
    })
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(MeanStd { mean, std, n })
}

/// Aggregate over the seeds of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub algorithm: String,
    pub seeds: Vec<u64>,
    pub final_accuracy: Option<MeanStd>,
    pub best_accuracy: Option<MeanStd>,
    pub final_time: Option<MeanStd>,
    pub target: Option<f64>,
    /// Over the seeds that reached the target.
    pub time_to_target: Option<MeanStd>,
    pub reached_target: usize,
}

pub fn summarize(tables: &[MetricsTable], target: Option<f64>) -> SeedSummary {
    let collect = |f: &dyn Fn(&MetricsTable) -> Option<f64>| -> Vec<f64> { tables.iter().filter_map(f).collect() };
    let times = target.map(|t| collect(&|m| m.time_to_accuracy(t))).unwrap_or_default();
    SeedSummary {
        algorithm: tables
            .iter()
            .find_map(|t| t.algorithm().map(str::to_string))
            .unwrap_or_default(),
        seeds: tables.iter().filter_map(MetricsTable::seed).collect(),
        final_accuracy: mean_std(&collect(&MetricsTable::final_accuracy)),
        best_accuracy: mean_std(&collect(&MetricsTable::best_accuracy)),
        final_time: mean_std(&collect(&|m| m.rows.last().map(|r| r.virtual_time))),
        target,
        reached_target: times.len(),
        time_to_target: mean_std(&times),
    }
}
