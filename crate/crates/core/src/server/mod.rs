//! The training server.
//!
//! Clients connect on the data port and are assigned to shards round-robin
//! by connection order. Each shard owns a memory buffer and a model replica.
//! Reception threads deduplicate timesteps and fill the buffers; training
//! threads pull batches. The launcher talks to the control port: parameter
//! requests, shutdown, and liveness/completion notices flowing back.
//!
//! Nothing received from clients is written to disk. All output goes through
//! an [`ArtifactSink`]: metrics CSVs, checkpoints and the final report.

mod connection;
pub mod plan;
pub(crate) mod shard;

use std::collections::BTreeSet;
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use plan::{DedupIndex, RunPlan};
pub use shard::{batch_stats_name, checkpoint_name, metrics_name, METRICS_HEADER};

use crate::artifacts::ArtifactSink;
use crate::buffer::{BufferCounters, BufferError, BufferPolicy, MemoryBuffer, SharedBuffer};
use crate::sampler::{ParamSpace, Sampler, SamplerError, SamplingStrategy};
use crate::stats::BatchStatsRow;
use crate::trainer::{FeatureMap, Mlp, ModelMode, SgdConfig, TrainError, Trainer, ValidationSet};
use crate::wire::{self, WireMessage};
use shard::{Shard, ShardParts, ShardTrainer};

pub const REPORT_NAME: &str = "server_report.json";

/// While draining, open data connections get this long without a new
/// timestep before the buffers are closed on them.
const DRAIN_IDLE: Duration = Duration::from_secs(2);

/// What one buffer element holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleUnitKind {
    /// One timestep (direct mode) or one pair of successive timesteps
    /// (autoregressive mode).
    #[default]
    SingleStep,
    /// A whole trajectory, inserted once its `Bye` arrives without gaps.
    FullTrajectory,
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub data_addr: String,
    pub ctrl_addr: String,
    pub shards: usize,
    pub buffer_policy: BufferPolicy,
    pub buffer_capacity: u32,
    pub sample_unit: SampleUnitKind,
    pub sgd: SgdConfig,
    pub validate_every: u64,
    /// 0 disables periodic checkpoints; one is always written at exit.
    pub checkpoint_every: u64,
    pub param_space: ParamSpace,
    pub strategy: SamplingStrategy,
    pub ensemble_size: u64,
    /// Drain and stop once `ensemble_size` sims completed.
    pub stop_on_ensemble: bool,
    pub seed: u64,
    /// Train inline on the reception thread instead of a training thread.
    pub serialized: bool,
    pub log_batch_stats: bool,
    pub poll_interval: Duration,
}

impl ServerConfig {
    pub fn new(param_space: ParamSpace, strategy: SamplingStrategy, ensemble_size: u64) -> Self {
        Self {
            data_addr: "127.0.0.1:0".into(),
            ctrl_addr: "127.0.0.1:0".into(),
            shards: 1,
            buffer_policy: BufferPolicy::ReadOnceRandom { watermark: 128 },
            buffer_capacity: 1024,
            sample_unit: SampleUnitKind::SingleStep,
            sgd: SgdConfig::default(),
            validate_every: 100,
            checkpoint_every: 0,
            param_space,
            strategy,
            ensemble_size,
            stop_on_ensemble: true,
            seed: 0,
            serialized: false,
            log_batch_stats: false,
            poll_interval: Duration::from_millis(50),
        }
    }
}

/// Model, feature map and held-out data the server trains with.
#[derive(Debug, Clone)]
pub struct TrainingSetup {
    pub model: Mlp,
    pub features: FeatureMap,
    pub validation: ValidationSet,
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: io::Error },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("cannot write artifact: {0}")]
    Artifact(io::Error),
    #[error("server thread panicked")]
    Panicked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxBatches,
    EnsembleComplete,
    Shutdown,
    LauncherLost,
    External,
    TrainingError(String),
}

#[derive(Debug, Clone, Serialize)]
pub struct ShardReport {
    pub index: usize,
    pub connections: u64,
    pub batches: u64,
    pub final_val_rmse: Option<f64>,
    pub buffer: BufferCounters,
}

#[derive(Debug, Clone, Serialize)]
pub struct ServerReport {
    /// Timestep messages received, duplicates included.
    pub samples_received: u64,
    pub unique_timesteps: u64,
    pub duplicates_dropped: u64,
    /// Samples accepted by the buffers.
    pub buffer_insertions: u64,
    pub batches_trained: u64,
    pub gaps: u64,
    pub incomplete_trajectories: u64,
    pub empty_trajectories: u64,
    pub protocol_errors: u64,
    /// Samples refused because the buffer was already closed for draining.
    pub dropped_after_close: u64,
    pub connections: u64,
    pub completed_sims: Vec<u64>,
    pub shards: Vec<ShardReport>,
    pub stop_reason: StopReason,
    pub wall_time_s: f64,
}

/// In-memory results for callers that embed the server.
#[derive(Debug, Clone)]
pub struct ShardOutcome {
    pub model: Mlp,
    pub loss_trace: Vec<f64>,
    pub batch_stats: Vec<BatchStatsRow>,
}

#[derive(Debug, Clone)]
pub struct ServerOutcome {
    pub report: ServerReport,
    pub shards: Vec<ShardOutcome>,
}

#[derive(Default)]
pub(crate) struct Counters {
    pub samples_received: AtomicU64,
    pub duplicates_dropped: AtomicU64,
    pub gaps: AtomicU64,
    pub incomplete: AtomicU64,
    pub empty: AtomicU64,
    pub protocol_errors: AtomicU64,
    pub dropped_after_close: AtomicU64,
    pub connections: AtomicU64,
}

#[derive(Default)]
pub(crate) struct Registry {
    pub completed: BTreeSet<u64>,
    pub trajectories_inserted: BTreeSet<u64>,
}

pub(crate) struct Shared {
    pub cfg: ServerConfig,
    pub mode: ModelMode,
    pub field_len: usize,
    pub shards: Vec<Shard>,
    pub shard_connections: Vec<AtomicU64>,
    pub dedup: Mutex<DedupIndex>,
    pub registry: Mutex<Registry>,
    pub plan: Mutex<RunPlan>,
    pub counters: Counters,
    pub active_data: AtomicUsize,
    pub launcher_conns: AtomicUsize,
    pub launcher_lost: AtomicBool,
    pub shutdown_requested: AtomicBool,
    pub stop: AtomicBool,
    pub abort: Mutex<Option<String>>,
    pub control_out: Mutex<Option<TcpStream>>,
    /// Serialized mode: the accept ticket whose connection may run now.
    pub turn: Mutex<u64>,
    pub turn_changed: Condvar,
    pub sink: Arc<dyn ArtifactSink>,
}

impl Shared {
    pub fn stopping(&self) -> bool {
        self.stop.load(Ordering::Acquire)
    }

    /// Best-effort notice to the launcher, if one is connected.
    pub fn notify_launcher(&self, msg: &WireMessage) {
        let mut out = self.control_out.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(s) = out.as_mut() {
            if wire::write_message(s, msg).is_err() {
                *out = None;
            }
        }
    }

    pub fn fail(&self, reason: String) {
        let mut a = self.abort.lock().unwrap_or_else(|p| p.into_inner());
        if a.is_none() {
            log::error!("{reason}");
            *a = Some(reason);
        }
    }
}

/// A running server. Dropping the handle does not stop it; call
/// [`stop`](Self::stop) or [`drain`](Self::drain) and then [`join`](Self::join).
pub struct ServerHandle {
    data_addr: SocketAddr,
    ctrl_addr: SocketAddr,
    shared: Arc<Shared>,
    thread: JoinHandle<Result<ServerOutcome, ServerError>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Progress {
    pub batches: u64,
    pub completed_sims: u64,
    pub unique_timesteps: u64,
    pub active_connections: usize,
}

impl ServerHandle {
    pub fn data_addr(&self) -> SocketAddr {
        self.data_addr
    }

    pub fn ctrl_addr(&self) -> SocketAddr {
        self.ctrl_addr
    }

    /// Stops as soon as possible; buffers are not drained.
    pub fn stop(&self) {
        self.shared.stop.store(true, Ordering::Release);
    }

    /// Same as a `Shutdown` on the control channel: drain buffers, then stop.
    pub fn drain(&self) {
        self.shared.shutdown_requested.store(true, Ordering::Release);
    }

    pub fn is_finished(&self) -> bool {
        self.thread.is_finished()
    }

    pub fn progress(&self) -> Progress {
        Progress {
            batches: self.shared.shards.iter().map(|s| s.buffer.counters().batches).sum(),
            completed_sims: self.shared.registry.lock().unwrap().completed.len() as u64,
            unique_timesteps: self.shared.dedup.lock().unwrap().len() as u64,
            active_connections: self.shared.active_data.load(Ordering::Acquire),
        }
    }

    pub fn join(self) -> Result<ServerOutcome, ServerError> {
        self.thread.join().map_err(|_| ServerError::Panicked)?
    }
}

fn bind(addr: &str) -> Result<TcpListener, ServerError> {
    let l = TcpListener::bind(addr).map_err(|source| ServerError::Bind {
        addr: addr.to_string(),
        source,
    })?;
    l.set_nonblocking(true).map_err(|source| ServerError::Bind {
        addr: addr.to_string(),
        source,
    })?;
    Ok(l)
}

/// Binds both ports and starts serving in the background.
pub fn start(
    cfg: ServerConfig,
    setup: TrainingSetup,
    sink: Arc<dyn ArtifactSink>,
) -> Result<ServerHandle, ServerError> {
    if cfg.shards == 0 {
        return Err(TrainError::Config("at least one shard is needed".into()).into());
    }
    cfg.sgd.validate()?;
    let sampler = Sampler::new(cfg.param_space.clone(), cfg.strategy.clone(), cfg.ensemble_size)?;
    let data = bind(&cfg.data_addr)?;
    let ctrl = bind(&cfg.ctrl_addr)?;
    let data_addr = data.local_addr().map_err(ServerError::Artifact)?;
    let ctrl_addr = ctrl.local_addr().map_err(ServerError::Artifact)?;

    let validation = Arc::new(setup.validation);
    let mut shards = Vec::with_capacity(cfg.shards);
    for k in 0..cfg.shards {
        let buffer = MemoryBuffer::new(
            cfg.buffer_policy,
            cfg.buffer_capacity,
            cfg.seed.wrapping_add(0x1000 + k as u64),
        )?;
        let trainer = Trainer::new(setup.model.clone(), setup.features.clone(), cfg.sgd.clone())?;
        shards.push(Shard {
            index: k,
            buffer: SharedBuffer::new(buffer),
            trainer: Mutex::new(ShardTrainer::new(ShardParts {
                index: k,
                trainer,
                seed: cfg.seed.wrapping_add(0x2000 + k as u64),
                validation: Arc::clone(&validation),
                validate_every: cfg.validate_every,
                checkpoint_every: cfg.checkpoint_every,
                log_stats: cfg.log_batch_stats,
            })),
        });
    }
    let shared = Arc::new(Shared {
        mode: setup.features.mode(),
        field_len: setup.features.field_len(),
        shard_connections: (0..cfg.shards).map(|_| AtomicU64::new(0)).collect(),
        shards,
        dedup: Mutex::new(DedupIndex::new()),
        registry: Mutex::new(Registry::default()),
        plan: Mutex::new(RunPlan::new(sampler)),
        counters: Counters::default(),
        active_data: AtomicUsize::new(0),
        launcher_conns: AtomicUsize::new(0),
        launcher_lost: AtomicBool::new(false),
        shutdown_requested: AtomicBool::new(false),
        stop: AtomicBool::new(false),
        abort: Mutex::new(None),
        control_out: Mutex::new(None),
        turn: Mutex::new(0),
        turn_changed: Condvar::new(),
        sink,
        cfg,
    });
    let run_shared = Arc::clone(&shared);
    let thread = thread::Builder::new()
        .name("server".into())
        .spawn(move || run(run_shared, data, ctrl))
        .expect("spawn server thread");
    Ok(ServerHandle {
        data_addr,
        ctrl_addr,
        shared,
        thread,
    })
}

/// Runs a server to completion on the calling thread.
pub fn serve(
    cfg: ServerConfig,
    setup: TrainingSetup,
    sink: Arc<dyn ArtifactSink>,
) -> Result<ServerOutcome, ServerError> {
    start(cfg, setup, sink)?.join()
}

type Conns = Arc<Mutex<Vec<JoinHandle<()>>>>;

fn accept_loop(
    shared: Arc<Shared>,
    listener: TcpListener,
    conns: Conns,
    control: bool,
) -> JoinHandle<()> {
    let name = if control { "ctrl-accept" } else { "data-accept" };
    thread::Builder::new()
        .name(name.into())
        .spawn(move || {
            let mut counter: u64 = 0;
            while !shared.stopping() {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        let _ = stream.set_nonblocking(false);
                        let _ = stream.set_nodelay(true);
                        let sh = Arc::clone(&shared);
                        let handle = if control {
                            log::info!("launcher connected from {peer}");
                            sh.launcher_conns.fetch_add(1, Ordering::AcqRel);
                            thread::spawn(move || connection::control(sh, stream))
                        } else {
                            // Round robin over connections, counter starting at 0.
                            let shard = (counter % shared.cfg.shards as u64) as usize;
                            counter += 1;
                            shared.counters.connections.fetch_add(1, Ordering::AcqRel);
                            shared.shard_connections[shard].fetch_add(1, Ordering::AcqRel);
                            shared.active_data.fetch_add(1, Ordering::AcqRel);
                            log::debug!("client {peer} -> shard {shard}");
                            let ticket = counter - 1;
                            thread::spawn(move || connection::data(sh, stream, shard, ticket))
                        };
                        let mut c = conns.lock().unwrap();
                        c.retain(|h| !h.is_finished());
                        c.push(handle);
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                        thread::sleep(Duration::from_millis(5));
                    }
                    Err(e) => {
                        log::warn!("accept failed: {e}");
                        thread::sleep(Duration::from_millis(20));
                    }
                }
            }
        })
        .expect("spawn accept thread")
}

fn training_loop(shared: Arc<Shared>, k: usize) {
    let shard = &shared.shards[k];
    let mut tr = shard.lock();
    let b = tr.trainer.config().batch_size as u32;
    while !shared.stopping() && !tr.done() {
        let ShardTrainer { rng, .. } = &mut *tr;
        match shard.buffer.wait_batch(b, rng, shared.cfg.poll_interval) {
            Some(batch) => {
                if let Err(e) = tr.train(&batch.samples, shared.sink.as_ref()) {
                    shared.fail(format!("shard {k}: {e}"));
                    return;
                }
            }
            None => {
                if shard.buffer.is_drained() {
                    return;
                }
            }
        }
    }
}

fn run(shared: Arc<Shared>, data: TcpListener, ctrl: TcpListener) -> Result<ServerOutcome, ServerError> {
    let started = Instant::now();
    let conns: Conns = Arc::new(Mutex::new(Vec::new()));
    let acceptors = [
        accept_loop(Arc::clone(&shared), data, Arc::clone(&conns), false),
        accept_loop(Arc::clone(&shared), ctrl, Arc::clone(&conns), true),
    ];
    let trainers: Vec<JoinHandle<()>> = if shared.cfg.serialized {
        Vec::new()
    } else {
        (0..shared.shards.len())
            .map(|k| {
                let sh = Arc::clone(&shared);
                thread::Builder::new()
                    .name(format!("train-{k}"))
                    .spawn(move || training_loop(sh, k))
                    .expect("spawn training thread")
            })
            .collect()
    };

    let mut draining: Option<StopReason> = None;
    let mut closed = false;
    let mut last_received = (0, Instant::now());
    let reason = loop {
        if let Some(msg) = shared.abort.lock().unwrap().clone() {
            break StopReason::TrainingError(msg);
        }
        if shared.stopping() {
            break StopReason::External;
        }
        let all_done = shared.shards.iter().all(|s| {
            // In threaded mode the training thread holds the lock; its exit
            // is what signals completion.
            match s.trainer.try_lock() {
                Ok(t) => t.done(),
                Err(_) => false,
            }
        });
        if all_done {
            break StopReason::MaxBatches;
        }
        if draining.is_none() {
            let completed = shared.registry.lock().unwrap().completed.len() as u64;
            let cfg = &shared.cfg;
            draining = if cfg.stop_on_ensemble && cfg.ensemble_size > 0 && completed >= cfg.ensemble_size {
                Some(StopReason::EnsembleComplete)
            } else if shared.shutdown_requested.load(Ordering::Acquire) {
                Some(StopReason::Shutdown)
            } else if shared.launcher_lost.load(Ordering::Acquire)
                && shared.active_data.load(Ordering::Acquire) == 0
            {
                Some(StopReason::LauncherLost)
            } else {
                None
            };
            if let Some(r) = &draining {
                log::info!("draining ({r:?})");
                last_received = (shared.counters.samples_received.load(Ordering::Acquire), Instant::now());
            }
        }
        if draining.is_some() && !closed {
            // Timesteps already sent by finished clients may still sit in
            // socket buffers; take them in before closing.
            let received = shared.counters.samples_received.load(Ordering::Acquire);
            if received != last_received.0 {
                last_received = (received, Instant::now());
            }
            if shared.active_data.load(Ordering::Acquire) == 0 || last_received.1.elapsed() >= DRAIN_IDLE {
                for s in &shared.shards {
                    s.buffer.close();
                }
                closed = true;
            }
        }
        if let (Some(r), true) = (&draining, closed) {
            if shared.cfg.serialized {
                for s in &shared.shards {
                    let mut t = s.lock();
                    if let Err(e) = t.train_available(&s.buffer, shared.sink.as_ref()) {
                        shared.fail(format!("shard {}: {e}", s.index));
                    }
                }
            }
            let finished = trainers.iter().all(JoinHandle::is_finished)
                && shared
                    .shards
                    .iter()
                    .all(|s| s.buffer.is_drained() || s.lock().done());
            if finished && shared.abort.lock().unwrap().is_none() {
                break r.clone();
            }
        }
        thread::sleep(Duration::from_millis(10));
    };

    shared.stop.store(true, Ordering::Release);
    for s in &shared.shards {
        s.buffer.notify();
    }
    for t in trainers {
        let _ = t.join();
    }
    for a in acceptors {
        let _ = a.join();
    }
    let handles: Vec<_> = std::mem::take(&mut *conns.lock().unwrap());
    for h in handles {
        let _ = h.join();
    }
    *shared.control_out.lock().unwrap() = None;

    let mut shard_reports = Vec::new();
    let mut outcomes = Vec::new();
    for s in &shared.shards {
        let mut t = s.lock();
        t.finish(shared.sink.as_ref()).map_err(ServerError::Artifact)?;
        shard_reports.push(ShardReport {
            index: s.index,
            connections: shared.shard_connections[s.index].load(Ordering::Acquire),
            batches: t.trainer.step(),
            final_val_rmse: t.last_val,
            buffer: s.buffer.counters(),
        });
        outcomes.push(ShardOutcome {
            model: t.model().clone(),
            loss_trace: std::mem::take(&mut t.loss_trace),
            batch_stats: std::mem::take(&mut t.stats),
        });
    }
    let c = &shared.counters;
    let report = ServerReport {
        samples_received: c.samples_received.load(Ordering::Acquire),
        unique_timesteps: shared.dedup.lock().unwrap().len() as u64,
        duplicates_dropped: c.duplicates_dropped.load(Ordering::Acquire),
        buffer_insertions: shard_reports.iter().map(|s| s.buffer.accepted).sum(),
        batches_trained: shard_reports.iter().map(|s| s.batches).sum(),
        gaps: c.gaps.load(Ordering::Acquire),
        incomplete_trajectories: c.incomplete.load(Ordering::Acquire),
        empty_trajectories: c.empty.load(Ordering::Acquire),
        protocol_errors: c.protocol_errors.load(Ordering::Acquire),
        dropped_after_close: c.dropped_after_close.load(Ordering::Acquire),
        connections: c.connections.load(Ordering::Acquire),
        completed_sims: shared.registry.lock().unwrap().completed.iter().copied().collect(),
        shards: shard_reports,
        stop_reason: reason,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_vec_pretty(&report).expect("report serializes");
    shared
        .sink
        .replace(REPORT_NAME, &json)
        .map_err(ServerError::Artifact)?;
    log::info!(
        "server stopped ({:?}): {} timesteps, {} duplicates, {} batches",
        report.stop_reason,
        report.samples_received,
        report.duplicates_dropped,
        report.batches_trained
    );
    Ok(ServerOutcome {
        report,
        shards: outcomes,
    })
}
