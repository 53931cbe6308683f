//! Experiment configuration: JSON with nested sections, where any key may also
//! be written flat with dots (`"algorithm.kind": "fedavg"`).

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::algorithms::{StrategyConfig, StrategyKind};
use crate::datagen::{PartitionSpec, DataError};
use crate::hetero::{SpeedChange, SpeedDist, SpeedProfile, DEFAULT_JITTER_CV};
use crate::learner::{ModelKind, ModelSpec, OptimizerKind, TrainSettings};
use crate::sim::StopRule;

/// A configuration key that failed validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Problem {
    /// Dotted path, e.g. `algorithm.Qmax`.
    pub key: String,
    pub reason: String,
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.reason)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config is not valid JSON: {0}")]
    Syntax(#[from] serde_json::Error),
    #[error("invalid config: {}", list(.0))]
    Invalid(Vec<Problem>),
}

fn list(problems: &[Problem]) -> String {
    problems.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("; ")
}

impl ConfigError {
    /// Offending dotted keys, in report order.
    pub fn keys(&self) -> Vec<&str> {
        match self {
            ConfigError::Invalid(ps) => ps.iter().map(|p| p.key.as_str()).collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    /// Gaussian clusters, see [`crate::datagen::synth_blobs`].
    Blobs {
        n_classes: usize,
        dim: usize,
        n_per_class: usize,
        spread: f64,
    },
    /// MNIST-layout IDX files.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        max_samples: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSection {
    #[serde(flatten)]
    pub source: DatasetSource,
    /// Fraction held out for validation, stratified by class.
    #[serde(default = "default_holdout")]
    pub holdout: f64,
}

fn default_holdout() -> f64 {
    0.2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PartitionSection {
    ClassPartition {
        n_min: usize,
        n_max: usize,
        #[serde(default = "default_mean_samples")]
        mean_samples: f64,
        #[serde(default = "default_std_samples")]
        std_samples: f64,
    },
    DualDirichlet {
        alpha1: f64,
        alpha2: f64,
    },
}

fn default_mean_samples() -> f64 {
    10.0
}
fn default_std_samples() -> f64 {
    3.0
}

impl PartitionSection {
    pub fn spec(&self, m: usize) -> PartitionSpec {
        match *self {
            PartitionSection::ClassPartition {
                n_min,
                n_max,
                mean_samples,
                std_samples,
            } => PartitionSpec::ClassPartition {
                m,
                n_min,
                n_max,
                mean_samples,
                std_samples,
            },
            PartitionSection::DualDirichlet { alpha1, alpha2 } => PartitionSpec::DualDirichlet { m, alpha1, alpha2 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistName {
    Homo,
    Normal,
    Exp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeteroSection {
    #[serde(default = "default_dist")]
    pub dist: DistName,
    /// Mean time per local step, in seconds.
    #[serde(default = "default_mean_seconds")]
    pub mean_seconds: f64,
    #[serde(default = "default_jitter")]
    pub jitter_cv: f64,
    #[serde(default)]
    pub change_prob: f64,
    #[serde(default)]
    pub script: Vec<SpeedChange>,
    /// Fixed minutes-per-step for every client; overrides `dist`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_times: Option<Vec<f64>>,
}

fn default_dist() -> DistName {
    DistName::Normal
}
fn default_mean_seconds() -> f64 {
    6.0
}
fn default_jitter() -> f64 {
    DEFAULT_JITTER_CV
}

impl Default for HeteroSection {
    fn default() -> Self {
        HeteroSection {
            dist: default_dist(),
            mean_seconds: default_mean_seconds(),
            jitter_cv: default_jitter(),
            change_prob: 0.0,
            script: Vec::new(),
            step_times: None,
        }
    }
}

impl HeteroSection {
    pub fn dist(&self) -> SpeedDist {
        let mean = self.mean_seconds / 60.0;
        match self.dist {
            DistName::Homo => SpeedDist::Homogeneous { mean },
            DistName::Normal => SpeedDist::Normal { mean },
            DistName::Exp => SpeedDist::Exponential { mean },
        }
    }

    pub fn profile(&self, m: usize, seed: u64) -> SpeedProfile {
        let base = match &self.step_times {
            Some(times) => SpeedProfile::fixed(times.clone()),
            None => SpeedProfile::sampled(self.dist(), m, seed),
        };
        base.with_dist(self.dist())
            .with_jitter(self.jitter_cv)
            .with_change_prob(self.change_prob)
            .with_script(self.script.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub kind: ModelKind,
    #[serde(default)]
    pub hidden_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: ModelKind::SoftmaxRegression,
            hidden_dim: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSection {
    #[serde(flatten)]
    pub strategy: StrategyConfig,
    /// Client learning rate.
    #[serde(default = "default_eta")]
    pub eta_l: f64,
    /// Client batch size.
    #[serde(rename = "B", default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerName,
}

fn default_eta() -> f64 {
    0.05
}
fn default_batch() -> usize {
    32
}
fn default_optimizer() -> OptimizerName {
    OptimizerName::Sgd
}

impl Default for AlgorithmSection {
    fn default() -> Self {
        AlgorithmSection {
            strategy: StrategyConfig::default(),
            eta_l: default_eta(),
            batch_size: default_batch(),
            optimizer: default_optimizer(),
        }
    }
}

impl AlgorithmSection {
    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            optimizer: match self.optimizer {
                OptimizerName::Sgd => OptimizerKind::Sgd,
                OptimizerName::Adam => OptimizerKind::adam(),
            },
            lr: self.eta_l,
            batch_size: self.batch_size,
        }
    }
}

/// Everything needed to run one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Number of clients `m`.
    pub clients: usize,
    pub dataset: DatasetSection,
    pub partition: PartitionSection,
    #[serde(default)]
    pub heterogeneity: HeteroSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub algorithm: AlgorithmSection,
    pub stop: StopRule,
    /// One-way message delay in minutes, added on dispatch and on return.
    #[serde(default)]
    pub comm_delay: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
}

/// Keys accepted in each section. Variant-specific keys are accepted for all variants.
const SCHEMA: &[(&str, &[&str])] = &[
    (
        "",
        &[
            "seed",
            "clients",
            "dataset",
            "partition",
            "heterogeneity",
            "model",
            "algorithm",
            "stop",
            "comm_delay",
            "target_accuracy",
        ],
    ),
    (
        "dataset",
        &["kind", "n_classes", "dim", "n_per_class", "spread", "images", "labels", "max_samples", "holdout"],
    ),
    ("partition", &["kind", "n_min", "n_max", "mean_samples", "std_samples", "alpha1", "alpha2"]),
    ("heterogeneity", &["dist", "mean_seconds", "jitter_cv", "change_prob", "script", "step_times"]),
    ("model", &["kind", "hidden_dim"]),
    (
        "algorithm",
        &[
            "kind", "Q", "Qmin", "Qmax", "lambda", "alpha", "a", "beta", "K", "upsilon", "speed_ema", "eta_l", "B",
            "optimizer",
        ],
    ),
    ("stop", &["global_updates", "time_budget"]),
];

/// Rewrites every `"a.b.c": v` key into nested objects, recursively.
pub fn expand_dotted_keys(value: Value) -> Result<Value, Vec<Problem>> {
    let Value::Object(map) = value else {
        return Ok(value);
    };
    let mut out = Map::new();
    let mut problems = Vec::new();
    for (key, v) in map {
        let v = match expand_dotted_keys(v) {
            Ok(v) => v,
            Err(mut ps) => {
                problems.append(&mut ps);
                continue;
            }
        };
        let parts: Vec<&str> = key.split('.').collect();
        if let Err(p) = insert_path(&mut out, &parts, v, &key) {
            problems.push(p);
        }
    }
    if problems.is_empty() {
        Ok(Value::Object(out))
    } else {
        Err(problems)
    }
}

fn insert_path(map: &mut Map<String, Value>, parts: &[&str], value: Value, full: &str) -> Result<(), Problem> {
    let clash = || Problem {
        key: full.to_string(),
        reason: "conflicts with another entry for the same key".to_string(),
    };
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Problem {
            key: full.to_string(),
            reason: "empty key segment".to_string(),
        });
    }
    let (head, rest) = (parts[0], &parts[1..]);
    if rest.is_empty() {
        return match (map.get_mut(head), value) {
            (None, value) => {
                map.insert(head.to_string(), value);
                Ok(())
            }
            (Some(Value::Object(existing)), Value::Object(incoming)) => {
                for (k, v) in incoming {
                    insert_path(existing, &[k.as_str()], v, full)?;
                }
                Ok(())
            }
            _ => Err(clash()),
        };
    }
    let entry = map.entry(head.to_string()).or_insert_with(|| Value::Object(Map::new()));
    match entry {
        Value::Object(inner) => insert_path(inner, rest, value, full),
        _ => Err(clash()),
    }
}

fn unknown_keys(value: &Value) -> Vec<Problem> {
    let mut problems = Vec::new();
    let Value::Object(top) = value else {
        return vec![Problem {
            key: "<root>".into(),
            reason: "config must be a JSON object".into(),
        }];
    };
    for &(section, allowed) in SCHEMA {
        let obj = if section.is_empty() {
            Some(top)
        } else {
            top.get(section).and_then(Value::as_object)
        };
        let Some(obj) = obj else { continue };
        for key in obj.keys() {
            if !allowed.contains(&key.as_str()) {
                let full = if section.is_empty() {
                    key.clone()
                } else {
                    format!("{section}.{key}")
                };
                problems.push(Problem {
                    key: full,
                    reason: "unknown key".into(),
                });
            }
        }
    }
    problems
}

fn remove_key(value: &mut Value, dotted: &str) {
    let (section, key) = dotted.rsplit_once('.').unwrap_or(("", dotted));
    let target = if section.is_empty() { Some(value) } else { value.get_mut(section) };
    if let Some(Value::Object(obj)) = target {
        obj.remove(key);
    }
}

/// The algorithm section is flattened, which hides the failing field from
/// the deserializer's path; try its keys one at a time instead.
fn locate_algorithm_key(value: &Value) -> Option<String> {
    let section = value.get("algorithm")?.as_object()?;
    section.iter().find_map(|(key, v)| {
        let mut probe = Map::new();
        probe.insert(key.clone(), v.clone());
        let failed = serde_json::from_value::<AlgorithmSection>(Value::Object(probe)).is_err();
        failed.then(|| format!("algorithm.{key}"))
    })
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let value: Value = serde_json::from_str(text)?;
        Self::from_value(value)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    pub fn from_value(value: Value) -> Result<Self, ConfigError> {
        let mut value = expand_dotted_keys(value).map_err(ConfigError::Invalid)?;
        let mut problems = unknown_keys(&value);
        // keep checking the rest so one run reports every problem
        for p in &problems {
            remove_key(&mut value, &p.key);
        }
        let config = match serde_path_to_error::deserialize::<_, ExperimentConfig>(value.clone()) {
            Ok(config) => {
                problems.extend(config.problems());
                Some(config)
            }
            Err(e) => {
                let mut key = e.path().to_string();
                if key == "algorithm" {
                    key = locate_algorithm_key(&value).unwrap_or(key);
                }
                problems.push(Problem {
                    key: if key == "." { "<root>".into() } else { key },
                    reason: e.into_inner().to_string(),
                });
                None
            }
        };
        match config {
            Some(config) if problems.is_empty() => Ok(config),
            _ => Err(ConfigError::Invalid(problems)),
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn algorithm(&self) -> StrategyKind {
        self.algorithm.strategy.kind
    }

    /// Class count and feature dimension when known without reading files.
    fn blob_shape(&self) -> Option<(usize, usize)> {
        match self.dataset.source {
            DatasetSource::Blobs { n_classes, dim, .. } => Some((n_classes, dim)),
            DatasetSource::Idx { .. } => None,
        }
    }

    pub fn model_spec(&self, input_dim: usize, n_classes: usize) -> ModelSpec {
        ModelSpec {
            kind: self.model.kind,
            input_dim,
            hidden_dim: self.model.hidden_dim,
            n_classes,
        }
    }

    /// Collects every semantic problem.
    pub fn problems(&self) -> Vec<Problem> {
        let mut out = Vec::new();
        let mut bad = |key: &str, reason: String| {
            out.push(Problem {
                key: key.to_string(),
                reason,
            })
        };
        if self.clients == 0 {
            bad("clients", "need at least one client".into());
        }
        match &self.dataset.source {
            DatasetSource::Blobs {
                n_classes,
                dim,
                n_per_class,
                spread,
            } => {
                if *n_classes < 2 {
                    bad("dataset.n_classes", "need at least 2 classes".into());
                }
                if *dim == 0 {
                    bad("dataset.dim", "must be >= 1".into());
                }
                if *n_per_class == 0 {
                    bad("dataset.n_per_class", "must be >= 1".into());
                }
                if !(*spread >= 0.0) || !spread.is_finite() {
                    bad("dataset.spread", format!("must be finite and >= 0, got {spread}"));
                }
            }
            DatasetSource::Idx { max_samples, .. } => {
                if *max_samples == Some(0) {
                    bad("dataset.max_samples", "must be >= 1".into());
                }
            }
        }
        let h = self.dataset.holdout;
        if !(h > 0.0 && h < 1.0) {
            bad("dataset.holdout", format!("must be in (0, 1), got {h}"));
        }
        if let Some((n_classes, _)) = self.blob_shape() {
            if let Err(DataError::InvalidSpec(msg)) = self.partition.spec(self.clients.max(1)).validate(n_classes) {
                bad("partition", msg);
            }
        }
        let het = &self.heterogeneity;
        if het.step_times.is_none() && !(het.mean_seconds > 0.0 && het.mean_seconds.is_finite()) {
            bad("heterogeneity.mean_seconds", format!("must be positive, got {}", het.mean_seconds));
        }
        if !(het.jitter_cv >= 0.0 && het.jitter_cv < 1.0) {
            bad("heterogeneity.jitter_cv", format!("must be in [0, 1), got {}", het.jitter_cv));
        }
        if !(0.0..=1.0).contains(&het.change_prob) {
            bad("heterogeneity.change_prob", format!("must be in [0, 1], got {}", het.change_prob));
        }
        if let Some(times) = &het.step_times {
            if times.len() != self.clients {
                bad(
                    "heterogeneity.step_times",
                    format!("has {} entries for {} clients", times.len(), self.clients),
                );
            }
            if times.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
                bad("heterogeneity.step_times", "entries must be positive".into());
            }
        }
        for (i, c) in het.script.iter().enumerate() {
            if c.client >= self.clients || c.round == 0 || !(c.step_time > 0.0 && c.step_time.is_finite()) {
                bad(
                    &format!("heterogeneity.script[{i}]"),
                    "needs a valid client, round >= 1 and a positive step_time".into(),
                );
            }
        }
        if self.model.kind == ModelKind::Mlp1Hidden && self.model.hidden_dim == 0 {
            bad("model.hidden_dim", "must be >= 1 for an MLP".into());
        }
        let alg = &self.algorithm;
        for (key, reason) in alg.strategy.problems() {
            bad(&format!("algorithm.{key}"), reason);
        }
        if !(alg.eta_l > 0.0 && alg.eta_l.is_finite()) {
            bad("algorithm.eta_l", format!("must be positive, got {}", alg.eta_l));
        }
        if alg.batch_size == 0 {
            bad("algorithm.B", "must be >= 1".into());
        }
        match self.stop {
            StopRule::GlobalUpdates(_) => {}
            StopRule::TimeBudget(t) => {
                if !(t >= 0.0 && t.is_finite()) {
                    bad("stop.time_budget", format!("must be finite and >= 0, got {t}"));
                }
            }
        }
        if !(self.comm_delay >= 0.0 && self.comm_delay.is_finite()) {
            bad("comm_delay", format!("must be finite and >= 0, got {}", self.comm_delay));
        }
        if let Some(t) = self.target_accuracy {
            if !(0.0..=1.0).contains(&t) {
                bad("target_accuracy", format!("must be in [0, 1], got {t}"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn base() -> Value {
        json!({
            "seed": 3,
            "clients": 4,
            "dataset": {"kind": "blobs", "n_classes": 3, "dim": 2, "n_per_class": 20, "spread": 0.3},
            "partition": {"kind": "dual-dirichlet", "alpha1": 5.0, "alpha2": 0.5},
            "stop": {"global_updates": 5}
        })
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::from_value(base()).unwrap();
        assert_eq!(c.algorithm(), StrategyKind::FedCompass);
        assert_eq!(c.algorithm.strategy.q_max, 100);
        assert_eq!(c.dataset.holdout, 0.2);
        assert_eq!(c.heterogeneity.dist, DistName::Normal);
        assert_eq!(c.stop, StopRule::GlobalUpdates(5));
    }

    #[test]
    fn dotted_keys_expand_and_merge() {
        let mut v = base();
        let obj = v.as_object_mut().unwrap();
        obj.insert("algorithm.kind".into(), json!("fedbuff"));
        obj.insert("algorithm.K".into(), json!(5));
        obj.insert("heterogeneity".into(), json!({"dist": "exp"}));
        obj.insert("heterogeneity.mean_seconds".into(), json!(30.0));
        let c = ExperimentConfig::from_value(v).unwrap();
        assert_eq!(c.algorithm(), StrategyKind::FedBuff);
        assert_eq!(c.algorithm.strategy.k, 5);
        assert_eq!(c.heterogeneity.dist, DistName::Exp);
        assert_eq!(c.heterogeneity.mean_seconds, 30.0);
    }

    #[test]
    fn errors_list_every_offending_key() {
        let mut v = base();
        let obj = v.as_object_mut().unwrap();
        obj.insert("algorithm.Qmin".into(), json!(50));
        obj.insert("algorithm.Qmax".into(), json!(20));
        obj.insert("algorithm.eta_l".into(), json!(-1.0));
        obj.insert("comm_delay".into(), json!(-2.0));
        let err = ExperimentConfig::from_value(v).unwrap_err();
        assert_eq!(err.keys(), vec!["algorithm.Qmax", "algorithm.eta_l", "comm_delay"]);
    }

    #[test]
    fn unknown_and_mistyped_keys_are_named() {
        let mut v = base();
        v["algorithm"] = json!({"kind": "fedavg", "Qmaxx": 3});
        v["colour"] = json!(1);
        let err = ExperimentConfig::from_value(v).unwrap_err();
        assert_eq!(err.keys(), vec!["colour", "algorithm.Qmaxx"]);

        let mut v = base();
        v["algorithm"] = json!({"kind": "fedavg", "Q": "many"});
        let err = ExperimentConfig::from_value(v).unwrap_err();
        assert_eq!(err.keys(), vec!["algorithm.Q"]);

        let mut v = base();
        v["algorithm"] = json!({"kind": "fedprox"});
        assert_eq!(ExperimentConfig::from_value(v).unwrap_err().keys(), vec!["algorithm.kind"]);
    }

    #[test]
    fn clashing_dotted_keys_are_reported() {
        let mut v = base();
        v.as_object_mut().unwrap().insert("stop.global_updates".into(), json!(9));
        let err = ExperimentConfig::from_value(v).unwrap_err();
        assert_eq!(err.keys(), vec!["stop.global_updates"]);
    }

    #[test]
    fn round_trips_through_json() {
        let c = ExperimentConfig::from_value(base()).unwrap();
        let back = ExperimentConfig::from_json_str(&c.to_json_pretty()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn fixed_step_times_must_match_clients() {
        let mut v = base();
        v["heterogeneity"] = json!({"step_times": [0.1, 0.2]});
        assert_eq!(
            ExperimentConfig::from_value(v).unwrap_err().keys(),
            vec!["heterogeneity.step_times"]
        );
    }
}
