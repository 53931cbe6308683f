//! Computing-power-aware scheduling of clients into arrival groups.
//!
//! Every client belongs to one *arrival group*. A group has an expected arrival
//! time `T_a`, and each member gets the number of local steps that makes it
//! finish at `T_a` given its measured speed. Members that arrive by the group's
//! latest time `T_max` are buffered and aggregated together; members arriving
//! later are parked in a general buffer that rides along with the next group
//! aggregation.
//!
//! The scheduler owns the bookkeeping and both update buffers. It does not own
//! the global model: every transition returns a list of [`Action`]s that the
//! server applies in order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learner::ParamVector;
use crate::sim::TIME_EPS;
use crate::ClientId;

pub type GroupId = u64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompassError {
    #[error("unknown client {0}")]
    UnknownClient(ClientId),
    #[error("speed estimate needs at least one completed step")]
    NoSteps,
    #[error("client {client} reported at {now} min, not after its round start {start} min")]
    NoElapsedTime { client: ClientId, now: f64, start: f64 },
    #[error("update has {got} parameters, expected {expected}")]
    UpdateLength { expected: usize, got: usize },
    #[error("update from client {0} is not finite")]
    NonFiniteUpdate(ClientId),
    #[error("invalid scheduler config: {0}")]
    Config(String),
}

/// Polynomial staleness discount `alpha * (s + 1)^(-a)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Staleness {
    pub alpha: f64,
    pub a: f64,
}

impl Default for Staleness {
    fn default() -> Self {
        Staleness { alpha: 0.9, a: 0.5 }
    }
}

impl Staleness {
    pub fn factor(&self, staleness: u64) -> f64 {
        staleness_factor(staleness, self.alpha, self.a)
    }
}

pub fn staleness_factor(staleness: u64, alpha: f64, a: f64) -> f64 {
    alpha * ((staleness + 1) as f64).powf(-a)
}

/// How a fresh speed observation is folded into the record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SpeedEstimator {
    /// Keep only the latest round.
    #[default]
    Latest,
    /// `weight * observed + (1 - weight) * previous`.
    Ema { weight: f64 },
}

impl SpeedEstimator {
    fn fold(&self, previous: Option<f64>, observed: f64) -> f64 {
        match (*self, previous) {
            (SpeedEstimator::Ema { weight }, Some(prev)) => weight * observed + (1.0 - weight) * prev,
            _ => observed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompassConfig {
    pub q_min: u32,
    pub q_max: u32,
    /// Stretch factor for the latest arrival time, `> 1` in practice.
    pub lambda: f64,
    pub staleness: Staleness,
    pub estimator: SpeedEstimator,
    /// Scale buffered updates by `Q̄_g / Q_i` (normalized averaging).
    pub normalize_steps: bool,
}

impl Default for CompassConfig {
    fn default() -> Self {
        CompassConfig {
            q_min: 20,
            q_max: 100,
            lambda: 1.2,
            staleness: Staleness::default(),
            estimator: SpeedEstimator::Latest,
            normalize_steps: false,
        }
    }
}

impl CompassConfig {
    pub fn validate(&self) -> Result<(), CompassError> {
        if self.q_min == 0 || self.q_min > self.q_max {
            return Err(CompassError::Config(format!(
                "need 1 <= Qmin <= Qmax, got {} and {}",
                self.q_min, self.q_max
            )));
        }
        if !(self.lambda >= 1.0) || !self.lambda.is_finite() {
            return Err(CompassError::Config(format!("lambda must be >= 1, got {}", self.lambda)));
        }
        let Staleness { alpha, a } = self.staleness;
        if !(alpha > 0.0 && alpha <= 1.0) || !(a >= 0.0) {
            return Err(CompassError::Config(format!(
                "staleness needs alpha in (0, 1] and a >= 0, got {alpha}, {a}"
            )));
        }
        if let SpeedEstimator::Ema { weight } = self.estimator {
            if !(weight > 0.0 && weight <= 1.0) {
                return Err(CompassError::Config(format!("EMA weight must be in (0, 1], got {weight}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientRecord {
    pub group: Option<GroupId>,
    /// Local steps of the current round.
    pub steps: u32,
    /// Minutes per step; `None` until the first arrival.
    pub speed: Option<f64>,
    /// Start of the current round.
    pub round_start: f64,
    /// Global timestamp of the model the client is training on.
    pub timestamp: u64,
    /// Relative sample share `p_i`.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRecord {
    /// Members still training (CL).
    pub pending: Vec<ClientId>,
    /// Members that arrived in time (ACL).
    pub arrived: Vec<ClientId>,
    /// Expected arrival time `T_a`.
    pub expected_arrival: f64,
    /// Latest arrival time `T_max`.
    pub latest_arrival: f64,
    pub created_at: f64,
    #[serde(skip)]
    pub buffer: ParamVector,
    /// Every client assigned to this group: `(client, steps, p_i)`.
    pub roster: Vec<(ClientId, u32, f64)>,
    /// Set once the `T_max` timer aggregated the group; later arrivals are stragglers.
    pub timer_fired: bool,
}

impl GroupRecord {
    /// Weighted mean step count `Σ p̂_i Q_i` over the roster.
    pub fn mean_steps(&self) -> f64 {
        let total: f64 = self.roster.iter().map(|r| r.2).sum();
        self.roster.iter().map(|&(_, q, p)| p / total * q as f64).sum()
    }

    fn steps_of(&self, client: ClientId) -> Option<u32> {
        self.roster.iter().find(|r| r.0 == client).map(|r| r.1)
    }

    fn fastest_speed(&self, clients: &BTreeMap<ClientId, ClientRecord>) -> Option<f64> {
        self.pending
            .iter()
            .chain(&self.arrived)
            .filter_map(|c| clients.get(c).and_then(|r| r.speed))
            .min_by(f64::total_cmp)
    }
}

/// Why a group was aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregateTrigger {
    /// The last pending member arrived by `T_max`.
    AllArrived,
    /// The `T_max` timer fired with members still pending.
    Timer,
}

/// Result of placing a client into a group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assignment {
    pub client: ClientId,
    pub group: GroupId,
    pub steps: u32,
    /// Whether a new group was created for the client.
    pub created: bool,
    pub expected_arrival: f64,
    pub latest_arrival: f64,
    /// Join candidates `(group, q)` evaluated before deciding.
    pub candidates: Vec<(GroupId, i64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    SpeedUpdate {
        client: ClientId,
        speed: f64,
    },
    /// `w := w - step`; the global timestamp is already advanced to `timestamp`.
    GlobalUpdate {
        step: ParamVector,
        group: Option<GroupId>,
        timestamp: u64,
    },
    BufferGroup {
        client: ClientId,
        group: GroupId,
        factor: f64,
    },
    /// Late arrival parked in the general buffer.
    BufferGeneral {
        client: ClientId,
        group: GroupId,
        factor: f64,
    },
    GroupAggregate {
        group: GroupId,
        clients: Vec<ClientId>,
        trigger: AggregateTrigger,
    },
    Assign {
        assignment: Assignment,
        /// Reassignment of an aggregated group's member.
        merge: bool,
    },
    ScheduleTimer {
        group: GroupId,
        at: f64,
    },
    DeleteGroup {
        group: GroupId,
    },
    Dispatch {
        client: ClientId,
        steps: u32,
    },
}

/// `(now - round_start) / steps_done`.
pub fn estimate_speed(round_start: f64, now: f64, steps_done: u32) -> Result<f64, CompassError> {
    if steps_done == 0 {
        return Err(CompassError::NoSteps);
    }
    Ok((now - round_start) / steps_done as f64)
}

/// Floor that tolerates float noise just below an integer.
fn floor_steps(x: f64) -> i64 {
    (x + TIME_EPS).floor() as i64
}

/// Upper bound on live groups at equilibrium: `ceil(log_{Qmax/Qmin}(slowest/fastest))`, at least 1.
///
/// With `Qmax == Qmin` the logarithm base is 1; the bound is then the number
/// of distinct speeds.
pub fn equilibrium_group_bound(q_min: u32, q_max: u32, speeds: &[f64]) -> usize {
    assert!(!speeds.is_empty(), "need at least one speed");
    let fastest = speeds.iter().copied().fold(f64::INFINITY, f64::min);
    let slowest = speeds.iter().copied().fold(0.0, f64::max);
    if q_max == q_min {
        let mut distinct = speeds.to_vec();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        return distinct.len();
    }
    let mu = slowest / fastest;
    let base = q_max as f64 / q_min as f64;
    let groups = (mu.ln() / base.ln() - 1e-9).ceil();
    (groups.max(1.0)) as usize
}

#[derive(Debug, Clone)]
pub struct CompassScheduler {
    config: CompassConfig,
    clients: BTreeMap<ClientId, ClientRecord>,
    groups: BTreeMap<GroupId, GroupRecord>,
    global_timestamp: u64,
    general_buffer: ParamVector,
    next_group: GroupId,
    dim: usize,
}

impl CompassScheduler {
    /// Registers one client per entry of `weights`, all training `Qmin` warm-up steps from time 0.
    pub fn new(config: CompassConfig, weights: &[f64], dim: usize) -> Result<Self, CompassError> {
        config.validate()?;
        let clients = weights
            .iter()
            .enumerate()
            .map(|(i, &weight)| {
                (
                    i,
                    ClientRecord {
                        group: None,
                        steps: config.q_min,
                        speed: None,
                        round_start: 0.0,
                        timestamp: 0,
                        weight,
                    },
                )
            })
            .collect();
        Ok(CompassScheduler {
            config,
            clients,
            groups: BTreeMap::new(),
            global_timestamp: 0,
            general_buffer: ParamVector::zeros(dim),
            next_group: 1,
            dim,
        })
    }

    pub fn config(&self) -> &CompassConfig {
        &self.config
    }

    /// Warm-up dispatches: every client trains `Qmin` steps.
    pub fn warmup(&self) -> Vec<Action> {
        self.clients
            .keys()
            .map(|&client| Action::Dispatch {
                client,
                steps: self.config.q_min,
            })
            .collect()
    }

    pub fn clients(&self) -> &BTreeMap<ClientId, ClientRecord> {
        &self.clients
    }

    pub fn client(&self, id: ClientId) -> Option<&ClientRecord> {
        self.clients.get(&id)
    }

    pub fn groups(&self) -> &BTreeMap<GroupId, GroupRecord> {
        &self.groups
    }

    pub fn group(&self, id: GroupId) -> Option<&GroupRecord> {
        self.groups.get(&id)
    }

    pub fn global_timestamp(&self) -> u64 {
        self.global_timestamp
    }

    pub fn general_buffer(&self) -> &ParamVector {
        &self.general_buffer
    }

    /// Join candidates `q = floor((T_a - now) / speed)` for every live group
    /// whose `T_a` is still ahead, in group-id order.
    pub fn join_candidates(&self, speed: f64, now: f64, exclude: Option<GroupId>) -> Vec<(GroupId, i64)> {
        self.groups
            .iter()
            .filter(|(id, g)| Some(**id) != exclude && g.expected_arrival > now + TIME_EPS)
            .map(|(&id, g)| (id, floor_steps((g.expected_arrival - now) / speed)))
            .collect()
    }

    /// Picks the candidate with the largest `q` in `[Qmin, Qmax]`, earlier `T_a` on ties.
    fn best_join(&self, candidates: &[(GroupId, i64)]) -> Option<(GroupId, u32)> {
        let (lo, hi) = (self.config.q_min as i64, self.config.q_max as i64);
        let mut best: Option<(GroupId, i64)> = None;
        for &(g, q) in candidates {
            if q < lo || q > hi {
                continue;
            }
            let better = match best {
                None => true,
                Some((bg, bq)) => {
                    q > bq || (q == bq && self.groups[&g].expected_arrival < self.groups[&bg].expected_arrival)
                }
            };
            if better {
                best = Some((g, q));
            }
        }
        best.map(|(g, q)| (g, q as u32))
    }

    fn speed_of(&self, client: ClientId) -> Result<f64, CompassError> {
        let rec = self.clients.get(&client).ok_or(CompassError::UnknownClient(client))?;
        // a client without a measurement is scheduled as if it were instantaneous
        // only through create_group's Qmax fallback; callers always measure first
        Ok(rec.speed.unwrap_or(f64::MIN_POSITIVE))
    }

    /// Tries to place the client in an existing group. On success the client is
    /// appended to the group's pending list and its round starts `now`.
    pub fn join_group(&mut self, client: ClientId, now: f64) -> Result<Option<Assignment>, CompassError> {
        self.join_group_excluding(client, now, None)
    }

    fn join_group_excluding(
        &mut self,
        client: ClientId,
        now: f64,
        exclude: Option<GroupId>,
    ) -> Result<Option<Assignment>, CompassError> {
        let speed = self.speed_of(client)?;
        let candidates = self.join_candidates(speed, now, exclude);
        let Some((group, steps)) = self.best_join(&candidates) else {
            return Ok(None);
        };
        let weight = self.clients[&client].weight;
        let g = self.groups.get_mut(&group).expect("candidate groups are live");
        g.pending.push(client);
        g.roster.push((client, steps, weight));
        let (expected_arrival, latest_arrival) = (g.expected_arrival, g.latest_arrival);
        let rec = self.clients.get_mut(&client).expect("checked above");
        rec.group = Some(group);
        rec.steps = steps;
        rec.round_start = now;
        Ok(Some(Assignment {
            client,
            group,
            steps,
            created: false,
            expected_arrival,
            latest_arrival,
            candidates,
        }))
    }

    /// Step count a new group would get: aims at the next-round arrival of an
    /// existing group's fastest member running `Qmax` steps, clamped into range.
    pub fn create_steps(&self, speed: f64, now: f64, exclude: Option<GroupId>) -> u32 {
        let mut assign: i64 = -1;
        for (&id, g) in &self.groups {
            if Some(id) == exclude || now >= g.expected_arrival {
                continue;
            }
            let Some(fastest) = g.fastest_speed(&self.clients) else {
                continue;
            };
            let next_arrival = g.expected_arrival + fastest * self.config.q_max as f64;
            assign = assign.max(floor_steps((next_arrival - now) / speed));
        }
        let (lo, hi) = (self.config.q_min as i64, self.config.q_max as i64);
        if (0..lo).contains(&assign) {
            assign = lo;
        } else if assign < 0 || assign > hi {
            assign = hi;
        }
        assign as u32
    }

    /// Opens a new group holding only `client`. The caller schedules the
    /// returned group's timer at its latest arrival time.
    pub fn create_group(&mut self, client: ClientId, now: f64) -> Result<Assignment, CompassError> {
        self.create_group_excluding(client, now, None, Vec::new())
    }

    fn create_group_excluding(
        &mut self,
        client: ClientId,
        now: f64,
        exclude: Option<GroupId>,
        candidates: Vec<(GroupId, i64)>,
    ) -> Result<Assignment, CompassError> {
        let speed = self.speed_of(client)?;
        let steps = self.create_steps(speed, now, exclude);
        let duration = steps as f64 * speed;
        let expected_arrival = now + duration;
        let latest_arrival = now + duration * self.config.lambda;
        let group = self.next_group;
        self.next_group += 1;
        let weight = self.clients[&client].weight;
        self.groups.insert(
            group,
            GroupRecord {
                pending: vec![client],
                arrived: Vec::new(),
                expected_arrival,
                latest_arrival,
                created_at: now,
                buffer: ParamVector::zeros(self.dim),
                roster: vec![(client, steps, weight)],
                timer_fired: false,
            },
        );
        let rec = self.clients.get_mut(&client).expect("speed_of checked the id");
        rec.group = Some(group);
        rec.steps = steps;
        rec.round_start = now;
        Ok(Assignment {
            client,
            group,
            steps,
            created: true,
            expected_arrival,
            latest_arrival,
            candidates,
        })
    }

    /// Join an existing group if one fits, otherwise create one.
    pub fn assign_group(&mut self, client: ClientId, now: f64) -> Result<Assignment, CompassError> {
        self.assign_excluding(client, now, None)
    }

    fn assign_excluding(
        &mut self,
        client: ClientId,
        now: f64,
        exclude: Option<GroupId>,
    ) -> Result<Assignment, CompassError> {
        if let Some(joined) = self.join_group_excluding(client, now, exclude)? {
            return Ok(joined);
        }
        let speed = self.speed_of(client)?;
        let candidates = self.join_candidates(speed, now, exclude);
        self.create_group_excluding(client, now, exclude, candidates)
    }

    fn assign_and_dispatch(
        &mut self,
        client: ClientId,
        now: f64,
        exclude: Option<GroupId>,
        merge: bool,
        actions: &mut Vec<Action>,
    ) -> Result<(), CompassError> {
        let assignment = self.assign_excluding(client, now, exclude)?;
        let steps = assignment.steps;
        if assignment.created {
            actions.push(Action::ScheduleTimer {
                group: assignment.group,
                at: assignment.latest_arrival,
            });
        }
        actions.push(Action::Assign { assignment, merge });
        actions.push(Action::Dispatch { client, steps });
        Ok(())
    }

    /// Scale applied to a buffered update under normalized averaging.
    fn step_normalization(&self, client: ClientId, group: Option<GroupId>) -> f64 {
        if !self.config.normalize_steps {
            return 1.0;
        }
        let Some(g) = group.and_then(|g| self.groups.get(&g)) else {
            return 1.0;
        };
        match g.steps_of(client) {
            Some(q) if q > 0 => g.mean_steps() / q as f64,
            _ => 1.0,
        }
    }

    /// Handles an update from `client` that finished its round at `now`.
    pub fn on_client_arrival(
        &mut self,
        client: ClientId,
        update: &ParamVector,
        now: f64,
    ) -> Result<Vec<Action>, CompassError> {
        let rec = self.clients.get(&client).ok_or(CompassError::UnknownClient(client))?;
        if update.len() != self.dim {
            return Err(CompassError::UpdateLength {
                expected: self.dim,
                got: update.len(),
            });
        }
        if !update.is_finite() {
            return Err(CompassError::NonFiniteUpdate(client));
        }
        if now <= rec.round_start {
            return Err(CompassError::NoElapsedTime {
                client,
                now,
                start: rec.round_start,
            });
        }
        let observed = estimate_speed(rec.round_start, now, rec.steps)?;
        let speed = self.config.estimator.fold(rec.speed, observed);
        let staleness = self.global_timestamp - rec.timestamp;
        let group = rec.group;
        let factor = self.config.staleness.factor(staleness) * rec.weight * self.step_normalization(client, group);
        self.clients.get_mut(&client).unwrap().speed = Some(speed);

        let mut actions = vec![Action::SpeedUpdate { client, speed }];
        let Some(gid) = group else {
            // first arrival: update the global model right away
            self.global_timestamp += 1;
            let rec = self.clients.get_mut(&client).unwrap();
            rec.timestamp = self.global_timestamp;
            actions.push(Action::GlobalUpdate {
                step: update.scaled(factor),
                group: None,
                timestamp: self.global_timestamp,
            });
            self.assign_and_dispatch(client, now, None, false, &mut actions)?;
            return Ok(actions);
        };

        let g = self.groups.get_mut(&gid).expect("a client's group stays live until it reports");
        g.pending.retain(|&c| c != client);
        let late = g.timer_fired || now > g.latest_arrival + TIME_EPS;
        if late {
            self.general_buffer.axpy(factor, update);
            let emptied = g.pending.is_empty();
            actions.push(Action::BufferGeneral {
                client,
                group: gid,
                factor,
            });
            self.clients.get_mut(&client).unwrap().timestamp = self.global_timestamp;
            if emptied {
                self.groups.remove(&gid);
                actions.push(Action::DeleteGroup { group: gid });
            }
            self.assign_and_dispatch(client, now, None, false, &mut actions)?;
        } else {
            g.arrived.push(client);
            g.buffer.axpy(factor, update);
            let emptied = g.pending.is_empty();
            actions.push(Action::BufferGroup {
                client,
                group: gid,
                factor,
            });
            if emptied {
                actions.extend(self.group_aggregate(gid, now, AggregateTrigger::AllArrived)?);
            }
        }
        Ok(actions)
    }

    /// Applies the group and general buffers to the global model and sends the
    /// group's arrived members back out, fastest first. No-op for an unknown or
    /// already timer-aggregated group.
    pub fn group_aggregate(
        &mut self,
        group: GroupId,
        now: f64,
        trigger: AggregateTrigger,
    ) -> Result<Vec<Action>, CompassError> {
        let Some(g) = self.groups.get_mut(&group) else {
            return Ok(Vec::new());
        };
        if g.timer_fired {
            return Ok(Vec::new());
        }
        let mut step = std::mem::replace(&mut g.buffer, ParamVector::zeros(self.dim));
        step.axpy(1.0, &self.general_buffer);
        self.general_buffer.fill_zero();
        self.global_timestamp += 1;
        let mut arrived = std::mem::take(&mut g.arrived);
        let mut actions = vec![Action::GlobalUpdate {
            step,
            group: Some(group),
            timestamp: self.global_timestamp,
        }];
        match trigger {
            AggregateTrigger::AllArrived => {
                self.groups.remove(&group);
            }
            AggregateTrigger::Timer => g.timer_fired = true,
        }
        let clients = &self.clients;
        arrived.sort_by(|a, b| {
            let sa = clients[a].speed.unwrap_or(f64::INFINITY);
            let sb = clients[b].speed.unwrap_or(f64::INFINITY);
            sa.total_cmp(&sb).then(a.cmp(b))
        });
        actions.push(Action::GroupAggregate {
            group,
            clients: arrived.clone(),
            trigger,
        });
        if trigger == AggregateTrigger::AllArrived {
            actions.push(Action::DeleteGroup { group });
        }
        for client in arrived {
            self.clients.get_mut(&client).unwrap().timestamp = self.global_timestamp;
            self.assign_and_dispatch(client, now, Some(group), true, &mut actions)?;
        }
        Ok(actions)
    }

    /// Timer at a group's `T_max`.
    pub fn on_timer(&mut self, group: GroupId, now: f64) -> Result<Vec<Action>, CompassError> {
        self.group_aggregate(group, now, AggregateTrigger::Timer)
    }

    /// Checks the structural invariants; returns a description of the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut seen = BTreeMap::new();
        for (&gid, g) in &self.groups {
            if g.pending.is_empty() && g.arrived.is_empty() {
                return Err(format!("group {gid} is empty but live"));
            }
            let law = g.latest_arrival - g.created_at - self.config.lambda * (g.expected_arrival - g.created_at);
            if law.abs() > 1e-9 * g.latest_arrival.max(1.0) {
                return Err(format!("group {gid} violates the T_max law by {law}"));
            }
            if !(g.created_at <= g.expected_arrival && g.expected_arrival <= g.latest_arrival) {
                return Err(format!("group {gid} has disordered times"));
            }
            for &c in g.pending.iter().chain(&g.arrived) {
                if seen.insert(c, gid).is_some() {
                    return Err(format!("client {c} is listed in two groups"));
                }
            }
        }
        for (&c, rec) in &self.clients {
            if rec.timestamp > self.global_timestamp {
                return Err(format!("client {c} timestamp ahead of the global one"));
            }
            if let Some(gid) = rec.group {
                if seen.get(&c) != Some(&gid) {
                    return Err(format!("client {c} points at group {gid} but is not listed there"));
                }
                if rec.steps < self.config.q_min || rec.steps > self.config.q_max {
                    return Err(format!("client {c} has {} steps", rec.steps));
                }
            }
        }
        Ok(())
    }
}
