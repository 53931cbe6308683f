//! Virtual-clock discrete-event engine.
//!
//! Events are delivered in `(fire_at, lane, seq)` order. Client arrivals use
//! lane 0 and group timers lane 1, so a timer set for `T_max` only fires after
//! every arrival stamped with that same instant has been processed. Within a
//! lane, equal times are broken by insertion sequence.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::io::{self, Write};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::learner::ParamVector;
use crate::ClientId;

/// Tolerance used when comparing virtual times produced by float arithmetic.
pub const TIME_EPS: f64 = 1e-9;

/// Simulated wall-clock time in minutes.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VirtualTime(f64);

impl VirtualTime {
    pub const ZERO: VirtualTime = VirtualTime(0.0);

    /// Panics on negative or non-finite input.
    pub fn new(minutes: f64) -> Self {
        assert!(
            minutes.is_finite() && minutes >= 0.0,
            "virtual time must be finite and non-negative, got {minutes}"
        );
        VirtualTime(minutes)
    }

    pub fn minutes(self) -> f64 {
        self.0
    }

    pub fn after(self, delta_minutes: f64) -> Self {
        VirtualTime::new(self.0 + delta_minutes)
    }

    fn total_cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl fmt::Display for VirtualTime {
    /// Renders as `mm:ss` the way the scheduler walkthroughs annotate time.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let total_seconds = (self.0 * 60.0).round() as u64;
        write!(f, "{:02}:{:02}", total_seconds / 60, total_seconds % 60)
    }
}

/// Identifier returned by [`EventQueue::schedule`]; equal to the event's sequence number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EventId(pub u64);

/// Payloads pick the lane they are ordered in for equal fire times.
pub trait Lane {
    fn lane(&self) -> u8 {
        0
    }
}

/// A client finished local training; carries the update it sends.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientArrival {
    pub client: ClientId,
    pub update: ParamVector,
    /// Local steps actually run.
    pub steps: u32,
    /// One-based index of the client's training round.
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    ClientArrival(ClientArrival),
    GroupTimer(u64),
    Evaluate,
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::ClientArrival(_) => "client-arrival",
            Payload::GroupTimer(_) => "group-timer",
            Payload::Evaluate => "evaluate",
        }
    }
}

impl Lane for Payload {
    fn lane(&self) -> u8 {
        match self {
            Payload::ClientArrival(_) => 0,
            Payload::GroupTimer(_) => 1,
            Payload::Evaluate => 2,
        }
    }
}

/// A dequeued event.
#[derive(Debug, Clone, PartialEq)]
pub struct Event<P> {
    pub fire_at: VirtualTime,
    pub seq: u64,
    pub payload: P,
}

impl<P> Event<P> {
    pub fn id(&self) -> EventId {
        EventId(self.seq)
    }
}

struct Entry<P> {
    fire_at: VirtualTime,
    lane: u8,
    seq: u64,
    payload: P,
}

impl<P> Entry<P> {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.fire_at
            .total_cmp(&other.fire_at)
            .then(self.lane.cmp(&other.lane))
            .then(self.seq.cmp(&other.seq))
    }
}

impl<P> PartialEq for Entry<P> {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq
    }
}
impl<P> Eq for Entry<P> {}
impl<P> PartialOrd for Entry<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<P> Ord for Entry<P> {
    // Reversed so that BinaryHeap pops the earliest entry.
    fn cmp(&self, other: &Self) -> Ordering {
        other.key_cmp(self)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("cannot schedule at {requested} min: clock is already at {now} min")]
    InPast { requested: f64, now: f64 },
    #[error("fire time must be finite, got {0}")]
    NotFinite(f64),
}

/// Priority queue of future events plus the virtual clock.
pub struct EventQueue<P> {
    heap: BinaryHeap<Entry<P>>,
    cancelled: HashSet<u64>,
    now: VirtualTime,
    next_seq: u64,
}

impl<P: Lane> Default for EventQueue<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P: Lane> fmt::Debug for EventQueue<P> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EventQueue")
            .field("now", &self.now)
            .field("pending", &self.len())
            .finish()
    }
}

impl<P: Lane> EventQueue<P> {
    pub fn new() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            cancelled: HashSet::new(),
            now: VirtualTime::ZERO,
            next_seq: 0,
        }
    }

    pub fn now(&self) -> VirtualTime {
        self.now
    }

    /// Number of live (not cancelled) pending events.
    pub fn len(&self) -> usize {
        self.heap.len() - self.cancelled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn schedule(&mut self, fire_at: f64, payload: P) -> Result<EventId, ScheduleError> {
        if !fire_at.is_finite() {
            return Err(ScheduleError::NotFinite(fire_at));
        }
        if fire_at < self.now.minutes() {
            return Err(ScheduleError::InPast {
                requested: fire_at,
                now: self.now.minutes(),
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry {
            fire_at: VirtualTime::new(fire_at),
            lane: payload.lane(),
            seq,
            payload,
        });
        Ok(EventId(seq))
    }

    /// Returns false when the id is unknown, already delivered or already cancelled.
    pub fn cancel(&mut self, id: EventId) -> bool {
        let pending = self.heap.iter().any(|e| e.seq == id.0);
        pending && self.cancelled.insert(id.0)
    }

    pub fn peek_time(&mut self) -> Option<VirtualTime> {
        self.discard_cancelled();
        self.heap.peek().map(|e| e.fire_at)
    }

    /// Pops the next event and advances the clock to its fire time.
    pub fn pop(&mut self) -> Option<Event<P>> {
        self.discard_cancelled();
        let entry = self.heap.pop()?;
        debug_assert!(entry.fire_at >= self.now);
        self.now = entry.fire_at;
        Some(Event {
            fire_at: entry.fire_at,
            seq: entry.seq,
            payload: entry.payload,
        })
    }

    fn discard_cancelled(&mut self) {
        while let Some(top) = self.heap.peek() {
            if self.cancelled.remove(&top.seq) {
                self.heap.pop();
            } else {
                break;
            }
        }
    }
}

/// One line of the simulation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: f64,
    pub seq: u64,
    pub kind: String,
    pub detail: Value,
}

/// Ordered record of every state transition in a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimTrace {
    records: Vec<TraceRecord>,
    current_seq: u64,
}

impl SimTrace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets the event sequence number stamped on subsequent records.
    pub fn set_seq(&mut self, seq: u64) {
        self.current_seq = seq;
    }

    pub fn push(&mut self, t: VirtualTime, kind: &str, detail: Value) {
        self.records.push(TraceRecord {
            t: t.minutes(),
            seq: self.current_seq,
            kind: kind.to_string(),
            detail,
        });
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a TraceRecord> + 'a {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    pub fn count(&self, kind: &str) -> usize {
        self.of_kind(kind).count()
    }

    /// Line-delimited JSON, one object per record.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for record in &self.records {
            serde_json::to_writer(&mut out, record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<TraceRecord>, _>>()?;
        Ok(SimTrace {
            records,
            current_seq: 0,
        })
    }

    /// SHA-256 of the JSONL rendering, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_jsonl().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Deterministic random stream keyed by `(seed, stream_id)`.
///
/// Streams with different ids are independent ChaCha8 streams sharing one key.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Stream ids used by the runner. Each purpose gets a disjoint id range.
pub mod streams {
    use crate::ClientId;

    pub const SERVER: u64 = 0;
    pub const DATA: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const SPEEDS: u64 = 3;
    pub const HOLDOUT: u64 = 4;

    pub fn client_training(client: ClientId) -> u64 {
        1_000 + client as u64
    }

    pub fn client_timing(client: ClientId) -> u64 {
        1_000_000 + client as u64
    }
}

/// When the event loop stops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Stop once this many global model writes have happened.
    GlobalUpdates(u64),
    /// Stop before processing any event later than this virtual time (minutes).
    TimeBudget(f64),
}

/// Callback interface for [`run`].
pub trait Handler<P> {
    type Error;

    fn handle(
        &mut self,
        event: Event<P>,
        queue: &mut EventQueue<P>,
        trace: &mut SimTrace,
    ) -> Result<(), Self::Error>;

    /// Global model writes so far.
    fn global_updates(&self) -> u64;
}

/// A handler error together with the trace recorded up to the fault.
#[derive(Debug)]
pub struct RunFault<E> {
    pub error: E,
    pub trace: SimTrace,
}

impl<E: fmt::Display> fmt::Display for RunFault<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "simulation aborted after {} trace records: {}",
            self.trace.len(),
            self.error
        )
    }
}

impl<E: fmt::Debug + fmt::Display> std::error::Error for RunFault<E> {}

/// Processes events in order until the queue drains or `stop` is met.
pub fn run<P, H>(
    queue: &mut EventQueue<P>,
    handler: &mut H,
    stop: StopRule,
    mut trace: SimTrace,
) -> Result<SimTrace, RunFault<H::Error>>
where
    P: Lane,
    H: Handler<P>,
{
    loop {
        match stop {
            StopRule::GlobalUpdates(n) if handler.global_updates() >= n => break,
            StopRule::TimeBudget(budget) => match queue.peek_time() {
                Some(t) if t.minutes() > budget => break,
                _ => {}
            },
            _ => {}
        }
        let Some(event) = queue.pop() else { break };
        trace.set_seq(event.seq);
        if let Err(error) = handler.handle(event, queue, &mut trace) {
            return Err(RunFault { error, trace });
        }
    }
    Ok(trace)
}
