//! Experiment orchestration: builds data, speeds and a server from an
//! [`ExperimentConfig`], runs the event loop and records validation metrics
//! after every global model write.

mod config;
mod metrics;
pub mod scenarios;

use std::collections::HashMap;
use std::path::Path;

use serde_json::json;
use thiserror::Error;

pub use config::{
    expand_dotted_keys, AlgorithmSection, ConfigError, DatasetSection, DatasetSource, DistName, ExperimentConfig,
    HeteroSection, ModelSection, OptimizerName, PartitionSection, Problem,
};
pub use metrics::{
    compare_runs, mean_std, relative_cell, summarize, time_to_accuracy, Comparison, ComparisonRow, MeanStd,
    MetricsError, MetricsRow, MetricsTable, SeedSummary, TargetedRun, CSV_HEADER,
};

use crate::algorithms::{build_server, AlgorithmError, Dispatch, Server};
use crate::compass::GroupId;
use crate::datagen::{load_idx, partition, synth_blobs, DataError, Dataset};
use crate::hetero::SpeedProfile;
use crate::learner::{evaluate, local_train, LearnerError, ModelSpec, ParamVector, TrainSettings};
use crate::sim::{
    run, streams, ClientArrival, Event, EventId, EventQueue, Handler, Payload, RngStream, ScheduleError, SimTrace,
    VirtualTime,
};
use crate::ClientId;

/// Failure inside the event loop.
#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Algorithm(#[from] AlgorithmError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Algorithm(#[from] AlgorithmError),
    #[error("simulation failed after {} trace records: {source}", .partial.len())]
    Simulation {
        #[source]
        source: SimError,
        partial: Box<SimTrace>,
    },
}

/// State visible to an observer after each handled event.
pub struct Observation<'a> {
    pub now: f64,
    /// Kind of the event just handled.
    pub kind: &'static str,
    pub client: Option<ClientId>,
    pub server: &'a dyn Server,
    pub model: &'a ParamVector,
}

/// Training data, validation split and client shards for one seed.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub validation: Dataset,
    pub shards: Vec<Dataset>,
    /// Sample share `p_i` of each client.
    pub weights: Vec<f64>,
}

pub fn load_dataset(config: &ExperimentConfig) -> Result<Dataset, DataError> {
    match &config.dataset.source {
        DatasetSource::Blobs {
            n_classes,
            dim,
            n_per_class,
            spread,
        } => Ok(synth_blobs(*n_classes, *dim, *n_per_class, *spread, config.seed)),
        DatasetSource::Idx {
            images,
            labels,
            max_samples,
        } => {
            let data = load_idx(images, labels)?;
            Ok(match max_samples {
                Some(n) if *n < data.len() => data.subset(&(0..*n).collect::<Vec<_>>()),
                _ => data,
            })
        }
    }
}

pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData, RunError> {
    let data = load_dataset(config)?;
    let mut rng = RngStream::new(config.seed, streams::HOLDOUT);
    let (train, validation) = data.split_holdout(config.dataset.holdout, &mut rng);
    let spec = config.partition.spec(config.clients);
    spec.validate(train.n_classes())?;
    let part = partition(&train, &spec, config.seed)?;
    Ok(PreparedData {
        shards: part.materialize(&train),
        weights: part.weights(),
        train,
        validation,
    })
}

struct ClientState {
    data: Dataset,
    round: u32,
    training_rng: RngStream,
    timing_rng: RngStream,
}

type ObserverFn<'o> = dyn FnMut(&Observation<'_>) + 'o;

struct Simulation<'o> {
    spec: ModelSpec,
    settings: TrainSettings,
    clients: Vec<ClientState>,
    profile: SpeedProfile,
    server: Box<dyn Server>,
    w: ParamVector,
    validation: Dataset,
    comm_delay: f64,
    rows: Vec<MetricsRow>,
    algorithm: String,
    seed: u64,
    updates: u64,
    timers: HashMap<GroupId, EventId>,
    observer: Option<&'o mut ObserverFn<'o>>,
}

impl Simulation<'_> {
    fn record(&mut self, now: f64, trace: &mut SimTrace) -> Result<(), LearnerError> {
        let eval = evaluate(&self.spec, &self.w, &self.validation)?;
        trace.push(
            VirtualTime::new(now),
            "evaluate",
            json!({"update": self.updates, "accuracy": eval.accuracy, "loss": eval.loss}),
        );
        self.rows.push(MetricsRow {
            virtual_time: now,
            global_update_idx: self.updates,
            val_accuracy: eval.accuracy,
            val_loss: eval.loss,
            algorithm: self.algorithm.clone(),
            seed: self.seed,
        });
        Ok(())
    }

    fn dispatch(
        &mut self,
        d: Dispatch,
        now: f64,
        queue: &mut EventQueue<Payload>,
        trace: &mut SimTrace,
    ) -> Result<(), SimError> {
        let client = &mut self.clients[d.client];
        client.round += 1;
        let round = client.round;
        let (duration, speed) = self.profile.round_time(d.client, round, d.steps, &mut client.timing_rng);
        if let Some(from) = speed.changed_from {
            trace.push(
                VirtualTime::new(now),
                "speed-change",
                json!({"client": d.client, "round": round, "from": from, "to": speed.step_time}),
            );
        }
        let update = local_train(
            &self.spec,
            &self.w,
            &client.data,
            d.steps,
            &self.settings,
            &mut client.training_rng,
        )?;
        let arrival = now + 2.0 * self.comm_delay + duration;
        trace.push(
            VirtualTime::new(now),
            "dispatch",
            json!({"client": d.client, "steps": d.steps, "round": round, "arrival": arrival}),
        );
        queue.schedule(
            arrival,
            Payload::ClientArrival(ClientArrival {
                client: d.client,
                update: update.delta,
                steps: d.steps,
                round,
            }),
        )?;
        Ok(())
    }
}

impl Handler<Payload> for Simulation<'_> {
    type Error = SimError;

    fn handle(&mut self, event: Event<Payload>, queue: &mut EventQueue<Payload>, trace: &mut SimTrace) -> Result<(), SimError> {
        let now = event.fire_at.minutes();
        let t = event.fire_at;
        let kind = event.payload.kind();
        let mut client = None;
        let reaction = match event.payload {
            Payload::Evaluate => {
                self.record(now, trace)?;
                None
            }
            Payload::ClientArrival(a) => {
                client = Some(a.client);
                trace.push(
                    t,
                    "client-arrival",
                    json!({"client": a.client, "steps": a.steps, "round": a.round}),
                );
                Some(self.server.on_arrival(&mut self.w, a.client, &a.update, now, trace)?)
            }
            Payload::GroupTimer(group) => {
                self.timers.remove(&group);
                trace.push(t, "group-timer", json!({"group": group}));
                Some(self.server.on_timer(&mut self.w, group, now, trace)?)
            }
        };
        if let Some(r) = reaction {
            for _ in 0..r.global_updates {
                self.updates += 1;
                self.record(now, trace)?;
            }
            for group in r.cancelled_timers {
                if let Some(id) = self.timers.remove(&group) {
                    queue.cancel(id);
                }
            }
            for timer in r.timers {
                let id = queue.schedule(timer.at, Payload::GroupTimer(timer.group))?;
                self.timers.insert(timer.group, id);
            }
            for d in r.dispatches {
                self.dispatch(d, now, queue, trace)?;
            }
        }
        if let Some(obs) = self.observer.as_mut() {
            obs(&Observation {
                now,
                kind,
                client,
                server: self.server.as_ref(),
                model: &self.w,
            });
        }
        Ok(())
    }

    fn global_updates(&self) -> u64 {
        self.updates
    }
}

/// Runs one experiment to its stop rule.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(MetricsTable, SimTrace), RunError> {
    run_inner(config, None)
}

/// Like [`run_experiment`], calling `observer` after every handled event.
pub fn run_experiment_observed<'o>(
    config: &ExperimentConfig,
    observer: &'o mut ObserverFn<'o>,
) -> Result<(MetricsTable, SimTrace), RunError> {
    run_inner(config, Some(observer))
}

fn run_inner<'o>(
    config: &ExperimentConfig,
    observer: Option<&'o mut ObserverFn<'o>>,
) -> Result<(MetricsTable, SimTrace), RunError> {
    config.validate()?;
    let data = prepare_data(config)?;
    let spec = config.model_spec(data.train.dim(), data.train.n_classes());
    spec.validate()?;
    let w = spec.init_params(&mut RngStream::new(config.seed, streams::SERVER));
    let profile = config.heterogeneity.profile(config.clients, config.seed);
    let mut server = build_server(&config.algorithm.strategy, &data.weights, &w, profile.step_times())?;
    let mut trace = SimTrace::new();
    trace.push(
        VirtualTime::ZERO,
        "run-start",
        json!({
            "algorithm": config.algorithm().name(),
            "seed": config.seed,
            "clients": config.clients,
            "weights": data.weights,
            "step_times": profile.step_times(),
            "params": w.len(),
        }),
    );
    let initial = server.start();
    let clients = data
        .shards
        .into_iter()
        .enumerate()
        .map(|(i, data)| ClientState {
            data,
            round: 0,
            training_rng: RngStream::new(config.seed, streams::client_training(i)),
            timing_rng: RngStream::new(config.seed, streams::client_timing(i)),
        })
        .collect();
    let mut sim = Simulation {
        spec,
        settings: config.algorithm.train_settings(),
        clients,
        profile,
        server,
        w,
        validation: data.validation,
        comm_delay: config.comm_delay,
        rows: Vec::new(),
        algorithm: config.algorithm().name().to_string(),
        seed: config.seed,
        updates: 0,
        timers: HashMap::new(),
        observer,
    };
    let mut queue = EventQueue::new();
    let started = sim
        .record(0.0, &mut trace)
        .map_err(SimError::from)
        .and_then(|_| initial.into_iter().try_for_each(|d| sim.dispatch(d, 0.0, &mut queue, &mut trace)));
    if let Err(source) = started {
        return Err(RunError::Simulation {
            source,
            partial: Box::new(trace),
        });
    }
    let trace = run(&mut queue, &mut sim, config.stop, trace).map_err(|fault| RunError::Simulation {
        source: fault.error,
        partial: Box::new(fault.trace),
    })?;
    Ok((MetricsTable::new(sim.rows), trace))
}

/// One finished run of a multi-seed batch.
#[derive(Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub metrics: MetricsTable,
    pub trace: SimTrace,
}

/// Runs `config` once per seed, in parallel, each run fully isolated.
/// Results come back in seed-list order.
pub fn run_seeds(config: &ExperimentConfig, seeds: &[u64]) -> Vec<Result<SeedRun, RunError>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let cfg = ExperimentConfig {
                    seed,
                    ..config.clone()
                };
                scope.spawn(move || {
                    run_experiment(&cfg).map(|(metrics, trace)| SeedRun { seed, metrics, trace })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("experiment thread panicked"))
            .collect()
    })
}

/// Writes `<algorithm>_seed<k>.csv` and `<algorithm>_seed<k>.trace.jsonl` into `dir`.
pub fn write_run_outputs(dir: &Path, run: &SeedRun) -> Result<(), MetricsError> {
    std::fs::create_dir_all(dir)?;
    let alg = run.metrics.algorithm().unwrap_or("run");
    let stem = format!("{alg}_seed{}", run.seed);
    run.metrics.write_csv_file(dir.join(format!("{stem}.csv")))?;
    let file = std::fs::File::create(dir.join(format!("{stem}.trace.jsonl")))?;
    run.trace.write_jsonl(std::io::BufWriter::new(file))?;
    Ok(())
}
