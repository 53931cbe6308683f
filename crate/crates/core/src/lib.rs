//! Deterministic discrete-event simulation of cross-silo federated learning.
//!
//! The crate centres on the Compass scheduler ([`compass`]), which assigns each
//! client a number of local steps so that clients with similar computing speed
//! finish training at the same virtual time and can be aggregated as a group.
//! Synchronous, asynchronous, buffered and tiered baselines live in
//! [`algorithms`]; [`runner`] wires everything into a single-threaded event
//! loop driven by [`sim`].
//!
//! Module map:
//!
//! * [`sim`] - virtual clock, event queue, trace log, seeded RNG streams
//! * [`learner`] - small differentiable models, optimizers, local training
//! * [`datagen`] - synthetic data, non-IID partitioners, IDX reader
//! * [`hetero`] - client speed profiles and per-round timing
//! * [`compass`] - the Compass scheduler state machine
//! * [`algorithms`] - server aggregation strategies
//! * [`runner`] - experiment configs, metrics, comparisons, fixture scenarios

pub mod algorithms;
pub mod compass;
pub mod datagen;
pub mod hetero;
pub mod learner;
pub mod runner;
pub mod sim;

/// Index of a client, zero-based.
pub type ClientId = usize;

pub use learner::ParamVector;
pub use sim::VirtualTime;
