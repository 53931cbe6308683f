//! Server aggregation strategies.
//!
//! Each strategy is exposed twice: as pure update functions on parameter
//! vectors (easy to check by hand) and as a [`Server`] state machine that the
//! runner drives with client arrivals and group timers.
//!
//! Updates are *deltas*: a client reports `Δ = w_start - w_end`, and the
//! server moves the global model by `-Σ weight · Δ`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::compass::{Action, AggregateTrigger, CompassConfig, CompassError, CompassScheduler, GroupId, SpeedEstimator, Staleness};
use crate::learner::ParamVector;
use crate::sim::{SimTrace, VirtualTime};
use crate::ClientId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlgorithmError {
    #[error(transparent)]
    Compass(#[from] CompassError),
    #[error("unknown client {0}")]
    UnknownClient(ClientId),
    #[error("update has {got} parameters, expected {expected}")]
    UpdateLength { expected: usize, got: usize },
    #[error("client {0} reported twice in one synchronous round")]
    DuplicateReport(ClientId),
    #[error("invalid strategy config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedavgm")]
    FedAvgM,
    #[serde(rename = "fedasync")]
    FedAsync,
    #[serde(rename = "fedbuff")]
    FedBuff,
    #[serde(rename = "fedat")]
    FedAt,
    #[serde(rename = "fedcompass")]
    FedCompass,
    #[serde(rename = "fedcompass+m")]
    FedCompassM,
    #[serde(rename = "fedcompass+n")]
    FedCompassN,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 8] = [
        StrategyKind::FedAvg,
        StrategyKind::FedAvgM,
        StrategyKind::FedAsync,
        StrategyKind::FedBuff,
        StrategyKind::FedAt,
        StrategyKind::FedCompass,
        StrategyKind::FedCompassM,
        StrategyKind::FedCompassN,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::FedAvg => "fedavg",
            StrategyKind::FedAvgM => "fedavgm",
            StrategyKind::FedAsync => "fedasync",
            StrategyKind::FedBuff => "fedbuff",
            StrategyKind::FedAt => "fedat",
            StrategyKind::FedCompass => "fedcompass",
            StrategyKind::FedCompassM => "fedcompass+m",
            StrategyKind::FedCompassN => "fedcompass+n",
        }
    }

    pub fn is_compass(self) -> bool {
        matches!(
            self,
            StrategyKind::FedCompass | StrategyKind::FedCompassM | StrategyKind::FedCompassN
        )
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = AlgorithmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| AlgorithmError::Config(format!("unknown algorithm {s:?}")))
    }
}

/// Strategy hyperparameters. Only the fields relevant to `kind` are read.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Fixed local steps for the non-Compass strategies.
    #[serde(rename = "Q")]
    pub q: u32,
    #[serde(rename = "Qmin")]
    pub q_min: u32,
    #[serde(rename = "Qmax")]
    pub q_max: u32,
    pub lambda: f64,
    pub alpha: f64,
    pub a: f64,
    /// Server momentum.
    pub beta: f64,
    /// FedBuff buffer size.
    #[serde(rename = "K")]
    pub k: u32,
    /// FedAT tier speed ratio.
    pub upsilon: f64,
    /// Weight of the newest speed observation; 1 keeps only the latest.
    pub speed_ema: f64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            kind: StrategyKind::FedCompass,
            q: 50,
            q_min: 20,
            q_max: 100,
            lambda: 1.2,
            alpha: 0.9,
            a: 0.5,
            beta: 0.9,
            k: 3,
            upsilon: 2.0,
            speed_ema: 1.0,
        }
    }
}

impl StrategyConfig {
    pub fn with_kind(kind: StrategyKind) -> Self {
        StrategyConfig {
            kind,
            ..StrategyConfig::default()
        }
    }

    pub fn staleness(&self) -> Staleness {
        Staleness {
            alpha: self.alpha,
            a: self.a,
        }
    }

    pub fn compass(&self) -> CompassConfig {
        CompassConfig {
            q_min: self.q_min,
            q_max: self.q_max,
            lambda: self.lambda,
            staleness: self.staleness(),
            estimator: if self.speed_ema >= 1.0 {
                SpeedEstimator::Latest
            } else {
                SpeedEstimator::Ema { weight: self.speed_ema }
            },
            normalize_steps: self.kind == StrategyKind::FedCompassN,
        }
    }

    /// Offending keys (relative to the strategy section) with a reason each.
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        use StrategyKind::*;
        let mut out = Vec::new();
        let k = self.kind;
        if matches!(k, FedAvg | FedAvgM | FedAsync | FedBuff | FedAt) && self.q == 0 {
            out.push(("Q", "must be >= 1".to_string()));
        }
        if matches!(k, FedAsync | FedBuff) || k.is_compass() {
            if !(self.alpha > 0.0 && self.alpha <= 1.0) {
                out.push(("alpha", format!("must be in (0, 1], got {}", self.alpha)));
            }
            if !(self.a >= 0.0) {
                out.push(("a", format!("must be >= 0, got {}", self.a)));
            }
        }
        if matches!(k, FedAvgM | FedCompassM) && !(0.0..1.0).contains(&self.beta) {
            out.push(("beta", format!("must be in [0, 1), got {}", self.beta)));
        }
        if k == FedBuff && self.k == 0 {
            out.push(("K", "must be >= 1".to_string()));
        }
        if k == FedAt && !(self.upsilon > 1.0) {
            out.push(("upsilon", format!("must be > 1, got {}", self.upsilon)));
        }
        if k.is_compass() {
            if self.q_min == 0 {
                out.push(("Qmin", "must be >= 1".to_string()));
            }
            if self.q_max < self.q_min {
                out.push(("Qmax", format!("must be >= Qmin ({})", self.q_min)));
            }
            if !(self.lambda >= 1.0) || !self.lambda.is_finite() {
                out.push(("lambda", format!("must be >= 1, got {}", self.lambda)));
            }
            if !(self.speed_ema > 0.0 && self.speed_ema <= 1.0) {
                out.push(("speed_ema", format!("must be in (0, 1], got {}", self.speed_ema)));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), AlgorithmError> {
        match self.problems().first() {
            None => Ok(()),
            Some((key, why)) => Err(AlgorithmError::Config(format!("{key}: {why}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// pure update rules

/// `w - Σ p_i Δ_i`.
pub fn fedavg_round(w: &ParamVector, updates: &[(&ParamVector, f64)]) -> ParamVector {
    let mut out = w.clone();
    for &(delta, p) in updates {
        out.axpy(-p, delta);
    }
    out
}

/// Server-side momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerMomentum {
    pub velocity: ParamVector,
    pub beta: f64,
}

impl ServerMomentum {
    pub fn new(len: usize, beta: f64) -> Self {
        ServerMomentum {
            velocity: ParamVector::zeros(len),
            beta,
        }
    }

    /// `v := β v + step` and returns the new `v`.
    pub fn push(&mut self, step: &ParamVector) -> &ParamVector {
        self.velocity.scale(self.beta);
        self.velocity.axpy(1.0, step);
        &self.velocity
    }
}

/// `v' = β v + Σ p_i Δ_i`, `w' = w - v'`.
pub fn fedavgm_round(w: &ParamVector, momentum: &mut ServerMomentum, updates: &[(&ParamVector, f64)]) -> ParamVector {
    let mut step = ParamVector::zeros(w.len());
    for &(delta, p) in updates {
        step.axpy(p, delta);
    }
    let mut out = w.clone();
    out.axpy(-1.0, momentum.push(&step));
    out
}

/// Staleness-weighted single update: `w - st(τ_g - τ_i) p Δ`, timestamp + 1.
pub fn fedasync_update(
    w: &ParamVector,
    tau_g: u64,
    delta: &ParamVector,
    p: f64,
    tau_i: u64,
    staleness: Staleness,
) -> (ParamVector, u64) {
    let mut out = w.clone();
    out.axpy(-staleness.factor(tau_g - tau_i) * p, delta);
    (out, tau_g + 1)
}

/// Size-`K` buffer of staleness-weighted updates.
#[derive(Debug, Clone, PartialEq)]
pub struct FedBuffBuffer {
    pub k: u32,
    sum: ParamVector,
    count: u32,
}

impl FedBuffBuffer {
    pub fn new(k: u32, len: usize) -> Self {
        assert!(k >= 1, "buffer size must be positive");
        FedBuffBuffer {
            k,
            sum: ParamVector::zeros(len),
            count: 0,
        }
    }

    pub fn len(&self) -> u32 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Adds `st p Δ`; once `K` updates are in, returns the step `sum / K` and clears.
    pub fn push(&mut self, delta: &ParamVector, factor: f64) -> Option<ParamVector> {
        self.sum.axpy(factor, delta);
        self.count += 1;
        if self.count < self.k {
            return None;
        }
        let step = self.sum.scaled(1.0 / self.k as f64);
        self.sum.fill_zero();
        self.count = 0;
        Some(step)
    }
}

/// Groups clients into tiers of similar speed. Clients are sorted by step
/// time; a new tier opens when a client is more than `υ` times slower than
/// the fastest client of the current tier.
pub fn fedat_assign_tiers(step_times: &[f64], upsilon: f64) -> Vec<Vec<ClientId>> {
    let mut order: Vec<ClientId> = (0..step_times.len()).collect();
    order.sort_by(|&a, &b| step_times[a].total_cmp(&step_times[b]).then(a.cmp(&b)));
    let mut tiers: Vec<Vec<ClientId>> = Vec::new();
    let mut tier_min = f64::NAN;
    for c in order {
        match tiers.last_mut() {
            Some(tier) if step_times[c] / tier_min <= upsilon => tier.push(c),
            _ => {
                tiers.push(vec![c]);
                tier_min = step_times[c];
            }
        }
    }
    tiers
}

/// Cross-tier weights proportional to inverse update counts (floored at 1).
pub fn fedat_weights(update_counts: &[u64]) -> Vec<f64> {
    let inv: Vec<f64> = update_counts.iter().map(|&n| 1.0 / n.max(1) as f64).collect();
    let total: f64 = inv.iter().sum();
    inv.iter().map(|x| x / total).collect()
}

/// Weighted combination of the tier models.
pub fn fedat_combine(tier_models: &[ParamVector], update_counts: &[u64]) -> ParamVector {
    let weights = fedat_weights(update_counts);
    let mut out = ParamVector::zeros(tier_models[0].len());
    for (model, weight) in tier_models.iter().zip(weights) {
        out.axpy(weight, model);
    }
    out
}

/// How Compass moves the global model once the buffers are summed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompassVariant {
    Base,
    /// Server momentum on the aggregated step.
    Momentum,
    /// Step-normalized buffering (applied when updates are buffered).
    Normalized,
}

/// `w - Δ̄_g - Δ̄`, or with momentum `w - (β v + Δ̄_g + Δ̄)`.
pub fn fedcompass_apply(
    w: &ParamVector,
    group_sum: &ParamVector,
    general: &ParamVector,
    variant: CompassVariant,
    momentum: Option<&mut ServerMomentum>,
) -> ParamVector {
    let mut step = group_sum.clone();
    step.axpy(1.0, general);
    let mut out = w.clone();
    match (variant, momentum) {
        (CompassVariant::Momentum, Some(m)) => out.axpy(-1.0, m.push(&step)),
        _ => out.axpy(-1.0, &step),
    }
    out
}

// ---------------------------------------------------------------------------
// server state machines

/// A client should start training `steps` local steps on the current model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dispatch {
    pub client: ClientId,
    pub steps: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimerRequest {
    pub group: GroupId,
    pub at: f64,
}

/// What the runner must do after a server transition. Every dispatch trains
/// on the model as it stands after the transition.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Reaction {
    pub dispatches: Vec<Dispatch>,
    pub timers: Vec<TimerRequest>,
    /// Groups whose pending timers are obsolete.
    pub cancelled_timers: Vec<GroupId>,
    /// Number of global model writes (0 or 1).
    pub global_updates: u32,
}

pub trait Server: Send {
    fn kind(&self) -> StrategyKind;

    /// Initial dispatches at time zero.
    fn start(&mut self) -> Vec<Dispatch>;

    fn on_arrival(
        &mut self,
        w: &mut ParamVector,
        client: ClientId,
        update: &ParamVector,
        now: f64,
        trace: &mut SimTrace,
    ) -> Result<Reaction, AlgorithmError>;

    fn on_timer(
        &mut self,
        _w: &mut ParamVector,
        _group: GroupId,
        _now: f64,
        _trace: &mut SimTrace,
    ) -> Result<Reaction, AlgorithmError> {
        Ok(Reaction::default())
    }

    /// Global model version.
    fn global_timestamp(&self) -> u64;

    /// Compass scheduler state, for servers that have one.
    fn scheduler(&self) -> Option<&CompassScheduler> {
        None
    }
}

/// Builds the server for `config`. `base_step_times` is only read by FedAT,
/// which tiers clients by profiled speed.
pub fn build_server(
    config: &StrategyConfig,
    weights: &[f64],
    w0: &ParamVector,
    base_step_times: &[f64],
) -> Result<Box<dyn Server>, AlgorithmError> {
    config.validate()?;
    let dim = w0.len();
    Ok(match config.kind {
        StrategyKind::FedAvg | StrategyKind::FedAvgM => Box::new(SyncServer::new(config, weights, dim)),
        StrategyKind::FedAsync => Box::new(AsyncServer::new(config, weights, dim, 1)),
        StrategyKind::FedBuff => Box::new(AsyncServer::new(config, weights, dim, config.k)),
        StrategyKind::FedAt => Box::new(TieredServer::new(config, weights, w0, base_step_times)?),
        StrategyKind::FedCompass | StrategyKind::FedCompassM | StrategyKind::FedCompassN => {
            Box::new(CompassServer::new(config, weights, dim)?)
        }
    })
}

fn check_update(expected: usize, update: &ParamVector) -> Result<(), AlgorithmError> {
    if update.len() != expected {
        return Err(AlgorithmError::UpdateLength {
            expected,
            got: update.len(),
        });
    }
    Ok(())
}

fn t(now: f64) -> VirtualTime {
    VirtualTime::new(now)
}

/// FedAvg and FedAvgM: every client trains `Q` steps per round, the server
/// waits for all of them.
pub struct SyncServer {
    kind: StrategyKind,
    q: u32,
    weights: Vec<f64>,
    pending: BTreeMap<ClientId, ParamVector>,
    momentum: Option<ServerMomentum>,
    timestamp: u64,
}

impl SyncServer {
    pub fn new(config: &StrategyConfig, weights: &[f64], dim: usize) -> Self {
        SyncServer {
            kind: config.kind,
            q: config.q,
            weights: weights.to_vec(),
            pending: BTreeMap::new(),
            momentum: (config.kind == StrategyKind::FedAvgM).then(|| ServerMomentum::new(dim, config.beta)),
            timestamp: 0,
        }
    }

    fn all(&self) -> Vec<Dispatch> {
        (0..self.weights.len())
            .map(|client| Dispatch { client, steps: self.q })
            .collect()
    }
}

impl Server for SyncServer {
    fn kind(&self) -> StrategyKind {
        self.kind
    }

    fn start(&mut self) -> Vec<Dispatch> {
        self.all()
    }

    fn on_arrival(
        &mut self,
        w: &mut ParamVector,
        client: ClientId,
        update: &ParamVector,
        now: f64,
        trace: &mut SimTrace,
    ) -> Result<Reaction, AlgorithmError> {
        if client >= self.weights.len() {
            return Err(AlgorithmError::UnknownClient(client));
        }
        check_update(w.len(), update)?;
        if self.pending.insert(client, update.clone()).is_some() {
            return Err(AlgorithmError::DuplicateReport(client));
        }
        if self.pending.len() < self.weights.len() {
            return Ok(Reaction::default());
        }
        let pending = std::mem::take(&mut self.pending);
        let updates: Vec<(&ParamVector, f64)> = pending.iter().map(|(&c, d)| (d, self.weights[c])).collect();
        *w = match self.momentum.as_mut() {
            Some(m) => fedavgm_round(w, m, &updates),
            None => fedavg_round(w, &updates),
        };
        self.timestamp += 1;
        trace.push(
            t(now),
            "global-update",
            json!({"timestamp": self.timestamp, "clients": pending.keys().collect::<Vec<_>>()}),
        );
        Ok(Reaction {
            dispatches: self.all(),
            global_updates: 1,
            ..Reaction::default()
        })
    }

    fn global_timestamp(&self) -> u64 {
        self.timestamp
    }
}

/// FedAsync (`K = 1`) and FedBuff: clients are redispatched on arrival.
pub struct AsyncServer {
    kind: StrategyKind,
    q: u32,
    weights: Vec<f64>,
    staleness: Staleness,
    client_timestamps: Vec<u64>,
    buffer: FedBuffBuffer,
    timestamp: u64,
}

impl AsyncServer {
    pub fn new(config: &StrategyConfig, weights: &[f64], dim: usize, k: u32) -> Self {
        AsyncServer {
            kind: config.kind,
            q: config.q,
            weights: weights.to_vec(),
            staleness: config.staleness(),
            client_timestamps: vec![0; weights.len()],
            buffer: FedBuffBuffer::new(k, dim),
            timestamp: 0,
        }
    }
}

impl Server for AsyncServer {
    fn kind(&self) -> StrategyKind {
        self.kind
    }

    fn start(&mut self) -> Vec<Dispatch> {
        (0..self.weights.len())
            .map(|client| Dispatch { client, steps: self.q })
            .collect()
    }

    fn on_arrival(
        &mut self,
        w: &mut ParamVector,
        client: ClientId,
        update: &ParamVector,
        now: f64,
        trace: &mut SimTrace,
    ) -> Result<Reaction, AlgorithmError> {
        let p = *self.weights.get(client).ok_or(AlgorithmError::UnknownClient(client))?;
        check_update(w.len(), update)?;
        let staleness = self.timestamp - self.client_timestamps[client];
        let factor = self.staleness.factor(staleness) * p;
        let mut global_updates = 0;
        if let Some(step) = self.buffer.push(update, factor) {
            w.axpy(-1.0, &step);
            self.timestamp += 1;
            global_updates = 1;
            trace.push(
                t(now),
                "global-update",
                json!({"timestamp": self.timestamp, "client": client, "staleness": staleness}),
            );
        }
        self.client_timestamps[client] = self.timestamp;
        Ok(Reaction {
            dispatches: vec![Dispatch { client, steps: self.q }],
            global_updates,
            ..Reaction::default()
        })
    }

    fn global_timestamp(&self) -> u64 {
        self.timestamp
    }
}

/// FedAT: synchronous rounds inside each speed tier, tiers combined
/// asynchronously with weights favouring tiers that update less often.
pub struct TieredServer {
    q: u32,
    weights: Vec<f64>,
    tiers: Vec<Vec<ClientId>>,
    tier_of: Vec<usize>,
    tier_models: Vec<ParamVector>,
    tier_counts: Vec<u64>,
    pending: Vec<BTreeMap<ClientId, ParamVector>>,
    timestamp: u64,
}

impl TieredServer {
    pub fn new(
        config: &StrategyConfig,
        weights: &[f64],
        w0: &ParamVector,
        base_step_times: &[f64],
    ) -> Result<Self, AlgorithmError> {
        if base_step_times.len() != weights.len() {
            return Err(AlgorithmError::Config(format!(
                "tiering needs {} step times, got {}",
                weights.len(),
                base_step_times.len()
            )));
        }
        let tiers = fedat_assign_tiers(base_step_times, config.upsilon);
        let mut tier_of = vec![0; weights.len()];
        for (ti, tier) in tiers.iter().enumerate() {
            for &c in tier {
                tier_of[c] = ti;
            }
        }
        Ok(TieredServer {
            q: config.q,
            weights: weights.to_vec(),
            tier_models: vec![w0.clone(); tiers.len()],
            tier_counts: vec![0; tiers.len()],
            pending: vec![BTreeMap::new(); tiers.len()],
            tiers,
            tier_of,
            timestamp: 0,
        })
    }

    pub fn tiers(&self) -> &[Vec<ClientId>] {
        &self.tiers
    }
}

impl Server for TieredServer {
    fn kind(&self) -> StrategyKind {
        StrategyKind::FedAt
    }

    fn start(&mut self) -> Vec<Dispatch> {
        (0..self.weights.len())
            .map(|client| Dispatch { client, steps: self.q })
            .collect()
    }

    fn on_arrival(
        &mut self,
        w: &mut ParamVector,
        client: ClientId,
        update: &ParamVector,
        now: f64,
        trace: &mut SimTrace,
    ) -> Result<Reaction, AlgorithmError> {
        let ti = *self.tier_of.get(client).ok_or(AlgorithmError::UnknownClient(client))?;
        check_update(w.len(), update)?;
        if self.pending[ti].insert(client, update.clone()).is_some() {
            return Err(AlgorithmError::DuplicateReport(client));
        }
        if self.pending[ti].len() < self.tiers[ti].len() {
            return Ok(Reaction::default());
        }
        let pending = std::mem::take(&mut self.pending[ti]);
        let tier_weight: f64 = pending.keys().map(|&c| self.weights[c]).sum();
        let updates: Vec<(&ParamVector, f64)> = pending
            .iter()
            .map(|(&c, d)| (d, self.weights[c] / tier_weight))
            .collect();
        self.tier_models[ti] = fedavg_round(w, &updates);
        self.tier_counts[ti] += 1;
        *w = fedat_combine(&self.tier_models, &self.tier_counts);
        self.timestamp += 1;
        trace.push(
            t(now),
            "global-update",
            json!({"timestamp": self.timestamp, "tier": ti, "tier_updates": self.tier_counts[ti]}),
        );
        Ok(Reaction {
            dispatches: self.tiers[ti]
                .iter()
                .map(|&client| Dispatch { client, steps: self.q })
                .collect(),
            global_updates: 1,
            ..Reaction::default()
        })
    }

    fn global_timestamp(&self) -> u64 {
        self.timestamp
    }
}

/// FedCompass and its +M / +N variants.
pub struct CompassServer {
    kind: StrategyKind,
    scheduler: CompassScheduler,
    momentum: Option<ServerMomentum>,
}

impl CompassServer {
    pub fn new(config: &StrategyConfig, weights: &[f64], dim: usize) -> Result<Self, AlgorithmError> {
        Ok(CompassServer {
            kind: config.kind,
            scheduler: CompassScheduler::new(config.compass(), weights, dim)?,
            momentum: (config.kind == StrategyKind::FedCompassM).then(|| ServerMomentum::new(dim, config.beta)),
        })
    }

    fn variant(&self) -> CompassVariant {
        match self.kind {
            StrategyKind::FedCompassM => CompassVariant::Momentum,
            StrategyKind::FedCompassN => CompassVariant::Normalized,
            _ => CompassVariant::Base,
        }
    }

    fn apply(&mut self, w: &mut ParamVector, actions: Vec<Action>, now: f64, trace: &mut SimTrace) -> Reaction {
        let mut reaction = Reaction::default();
        let now_t = t(now);
        let variant = self.variant();
        for action in actions {
            match action {
                Action::SpeedUpdate { client, speed } => {
                    trace.push(now_t, "speed-update", json!({"client": client, "speed": speed}))
                }
                Action::GlobalUpdate { step, group, timestamp } => {
                    let zero = ParamVector::zeros(w.len());
                    *w = fedcompass_apply(w, &step, &zero, variant, self.momentum.as_mut());
                    reaction.global_updates += 1;
                    trace.push(now_t, "global-update", json!({"timestamp": timestamp, "group": group}));
                }
                Action::BufferGroup { client, group, factor } => trace.push(
                    now_t,
                    "group-buffer",
                    json!({"client": client, "group": group, "factor": factor}),
                ),
                Action::BufferGeneral { client, group, factor } => trace.push(
                    now_t,
                    "straggler-buffer",
                    json!({"client": client, "group": group, "factor": factor}),
                ),
                Action::GroupAggregate { group, clients, trigger } => trace.push(
                    now_t,
                    "group-aggregate",
                    json!({"group": group, "clients": clients, "trigger": trigger}),
                ),
                Action::Assign { assignment: a, merge } => {
                    let kind = if merge {
                        "merge"
                    } else if a.created {
                        "create"
                    } else {
                        "join"
                    };
                    let candidates: Vec<_> = a.candidates.iter().map(|&(g, q)| json!({"group": g, "q": q})).collect();
                    trace.push(
                        now_t,
                        kind,
                        json!({
                            "client": a.client,
                            "group": a.group,
                            "q": a.steps,
                            "created": a.created,
                            "t_a": a.expected_arrival,
                            "t_max": a.latest_arrival,
                            "candidates": candidates,
                        }),
                    );
                }
                Action::ScheduleTimer { group, at } => reaction.timers.push(TimerRequest { group, at }),
                Action::DeleteGroup { group } => {
                    reaction.cancelled_timers.push(group);
                    trace.push(now_t, "delete-group", json!({"group": group}))
                }
                Action::Dispatch { client, steps } => reaction.dispatches.push(Dispatch { client, steps }),
            }
        }
        reaction
    }
}

impl Server for CompassServer {
    fn kind(&self) -> StrategyKind {
        self.kind
    }

    fn start(&mut self) -> Vec<Dispatch> {
        self.scheduler
            .warmup()
            .into_iter()
            .filter_map(|a| match a {
                Action::Dispatch { client, steps } => Some(Dispatch { client, steps }),
                _ => None,
            })
            .collect()
    }

    fn on_arrival(
        &mut self,
        w: &mut ParamVector,
        client: ClientId,
        update: &ParamVector,
        now: f64,
        trace: &mut SimTrace,
    ) -> Result<Reaction, AlgorithmError> {
        let actions = self.scheduler.on_client_arrival(client, update, now)?;
        Ok(self.apply(w, actions, now, trace))
    }

    fn on_timer(
        &mut self,
        w: &mut ParamVector,
        group: GroupId,
        now: f64,
        trace: &mut SimTrace,
    ) -> Result<Reaction, AlgorithmError> {
        let actions = self.scheduler.group_aggregate(group, now, AggregateTrigger::Timer)?;
        Ok(self.apply(w, actions, now, trace))
    }

    fn global_timestamp(&self) -> u64 {
        self.scheduler.global_timestamp()
    }

    fn scheduler(&self) -> Option<&CompassScheduler> {
        Some(&self.scheduler)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_vec(v.to_vec())
    }

    #[test]
    fn fedavg_single_and_cancelling_clients() {
        let w = pv(&[1.0, 2.0]);
        let d = pv(&[0.5, -0.5]);
        assert_eq!(fedavg_round(&w, &[(&d, 1.0)]), pv(&[0.5, 2.5]));
        let neg = d.scaled(-1.0);
        assert_eq!(fedavg_round(&w, &[(&d, 0.5), (&neg, 0.5)]), w);
    }

    #[test]
    fn fedavg_matches_weighted_sum() {
        let w = pv(&[0.3, -0.1, 0.7]);
        let ds: Vec<ParamVector> = (0..5).map(|i| pv(&[i as f64 * 0.1, 1.0 - i as f64, 0.25])).collect();
        let ps = [0.1, 0.2, 0.3, 0.15, 0.25];
        let got = fedavg_round(&w, &ds.iter().zip(ps).collect::<Vec<_>>());
        for j in 0..3 {
            let mut expect = w.as_slice()[j];
            for i in 0..5 {
                expect -= ps[i] * ds[i].as_slice()[j];
            }
            assert_eq!(got.as_slice()[j], expect);
        }
    }

    #[test]
    fn momentum_recurrence() {
        let w = pv(&[0.0]);
        let g = pv(&[1.0]);
        let mut m0 = ServerMomentum::new(1, 0.0);
        assert_eq!(fedavgm_round(&w, &mut m0, &[(&g, 1.0)]), fedavg_round(&w, &[(&g, 1.0)]));
        let mut m = ServerMomentum::new(1, 0.9);
        let w1 = fedavgm_round(&w, &mut m, &[(&g, 1.0)]);
        let w2 = fedavgm_round(&w1, &mut m, &[(&g, 1.0)]);
        assert_abs_diff_eq!(w1.as_slice()[0] - w2.as_slice()[0], 1.9, epsilon = 1e-15);
        let zero = pv(&[0.0]);
        let w3 = fedavgm_round(&w2, &mut m, &[(&zero, 1.0)]);
        assert_abs_diff_eq!(w2.as_slice()[0] - w3.as_slice()[0], 0.9 * 1.9, epsilon = 1e-15);
    }

    #[test]
    fn fedasync_factors() {
        let w = pv(&[0.0]);
        let d = pv(&[1.0]);
        let st = Staleness::default();
        assert_eq!(fedasync_update(&w, 5, &d, 1.0, 5, st), (pv(&[-0.9]), 6));
        let (w8, _) = fedasync_update(&w, 8, &d, 1.0, 0, st);
        assert_abs_diff_eq!(w8.as_slice()[0], -0.3, epsilon = 1e-12);
        let plain = Staleness { alpha: 1.0, a: 0.0 };
        assert_eq!(fedasync_update(&w, 3, &d, 1.0, 1, plain).0, pv(&[-1.0]));
    }

    #[test]
    fn fedbuff_flushes_every_k() {
        let mut b = FedBuffBuffer::new(1, 1);
        assert_eq!(b.push(&pv(&[2.0]), 0.9), Some(pv(&[1.8])));
        let mut b = FedBuffBuffer::new(2, 1);
        assert_eq!(b.push(&pv(&[1.0]), 0.9), None);
        let step = b.push(&pv(&[3.0]), 0.45).unwrap();
        assert_abs_diff_eq!(step.as_slice()[0], (0.9 + 1.35) / 2.0, epsilon = 1e-15);
        assert!(b.is_empty());
    }

    #[test]
    fn fedbuff_timestamp_law() {
        let cfg = StrategyConfig::with_kind(StrategyKind::FedBuff);
        let mut s = AsyncServer::new(&cfg, &[0.2; 5], 1, 3);
        let mut w = pv(&[0.0]);
        let mut trace = SimTrace::new();
        for i in 0..11 {
            s.on_arrival(&mut w, i % 5, &pv(&[1.0]), 1.0 + i as f64, &mut trace).unwrap();
            assert_eq!(s.global_timestamp(), (i as u64 + 1) / 3);
        }
    }

    #[test]
    fn tiers_by_speed_ratio() {
        assert_eq!(fedat_assign_tiers(&[0.3; 4], 2.0), vec![vec![0, 1, 2, 3]]);
        assert_eq!(fedat_assign_tiers(&[0.25, 0.1, 0.5, 0.15], 2.0), vec![vec![1, 3], vec![0, 2]]);
        assert_eq!(fedat_assign_tiers(&[0.1, 0.15, 0.25, 0.5], 2.0), vec![vec![0, 1], vec![2, 3]]);
        assert_eq!(fedat_assign_tiers(&[0.1, 5.0, 100.0], f64::INFINITY).len(), 1);
    }

    #[test]
    fn tier_weights() {
        let w = fedat_weights(&[4, 1]);
        assert_abs_diff_eq!(w[0], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 0.8, epsilon = 1e-15);
        let w = fedat_weights(&[3, 0]);
        assert!(w.iter().all(|x| x.is_finite()));
        assert_abs_diff_eq!(w[1], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn single_tier_fedat_is_fedavg() {
        let cfg = StrategyConfig::with_kind(StrategyKind::FedAt);
        let w0 = pv(&[1.0, 1.0]);
        let mut at = TieredServer::new(&cfg, &[0.25, 0.75], &w0, &[0.2, 0.3]).unwrap();
        let mut avg = SyncServer::new(&StrategyConfig::with_kind(StrategyKind::FedAvg), &[0.25, 0.75], 2);
        let (mut wa, mut wb) = (w0.clone(), w0.clone());
        let mut trace = SimTrace::new();
        for round in 0..3 {
            let d0 = pv(&[0.1 * round as f64, 0.2]);
            let d1 = pv(&[-0.3, 0.05 * round as f64]);
            for (c, d) in [(0, &d0), (1, &d1)] {
                at.on_arrival(&mut wa, c, d, 1.0 + round as f64, &mut trace).unwrap();
                avg.on_arrival(&mut wb, c, d, 1.0 + round as f64, &mut trace).unwrap();
            }
            assert!(wa.max_abs_diff(&wb) < 1e-15);
        }
    }

    #[test]
    fn compass_variants_reduce_to_base() {
        let w = pv(&[1.0, -1.0]);
        let g = pv(&[0.2, 0.1]);
        let gen = pv(&[0.05, 0.0]);
        let base = fedcompass_apply(&w, &g, &gen, CompassVariant::Base, None);
        assert_eq!(base, pv(&[0.75, -1.1]));
        let mut m = ServerMomentum::new(2, 0.0);
        assert_eq!(fedcompass_apply(&w, &g, &gen, CompassVariant::Momentum, Some(&mut m)), base);
    }

    #[test]
    fn normalized_buffering_scales_by_mean_steps() {
        let cfg = StrategyConfig::with_kind(StrategyKind::FedCompassN);
        let mut s = CompassServer::new(&cfg, &[0.5, 0.5], 1).unwrap();
        let mut w = pv(&[0.0]);
        let mut trace = SimTrace::new();
        // client 0 at 0.05 min/step creates a group with T_a = 6; client 1 at
        // 0.1 min/step joins it at t = 2 with q = 40
        s.on_arrival(&mut w, 0, &pv(&[0.0]), 1.0, &mut trace).unwrap();
        s.on_arrival(&mut w, 1, &pv(&[0.0]), 2.0, &mut trace).unwrap();
        let before = w.clone();
        let g = s.scheduler().unwrap().group(1).unwrap();
        assert_eq!(g.roster.iter().map(|r| r.1).collect::<Vec<_>>(), vec![100, 40]);
        assert_eq!(g.mean_steps(), 70.0);
        // both arrive on time with unit deltas; weights st(·)·p·Q̄/Q_i
        s.on_arrival(&mut w, 0, &pv(&[1.0]), 6.0, &mut trace).unwrap();
        s.on_arrival(&mut w, 1, &pv(&[1.0]), 6.0, &mut trace).unwrap();
        let st = Staleness::default();
        let expect = st.factor(1) * 0.5 * 0.7 + st.factor(0) * 0.5 * 1.75;
        assert_abs_diff_eq!(before.as_slice()[0] - w.as_slice()[0], expect, epsilon = 1e-12);
    }

    #[test]
    fn config_problems_name_keys() {
        let mut c = StrategyConfig::with_kind(StrategyKind::FedBuff);
        c.k = 0;
        c.alpha = 2.0;
        let keys: Vec<_> = c.problems().into_iter().map(|p| p.0).collect();
        assert_eq!(keys, vec!["alpha", "K"]);
        let mut c = StrategyConfig::with_kind(StrategyKind::FedAvg);
        c.k = 0; // irrelevant for fedavg
        assert!(c.validate().is_ok());
        assert_eq!("fedcompass+m".parse::<StrategyKind>().unwrap(), StrategyKind::FedCompassM);
        assert!("fedprox".parse::<StrategyKind>().is_err());
    }

    #[test]
    fn kind_serde_names() {
        for k in StrategyKind::ALL {
            let s = serde_json::to_string(&k).unwrap();
            assert_eq!(s, format!("\"{}\"", k.name()));
        }
    }
}
