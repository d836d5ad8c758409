//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use olts::artifacts::{ArtifactSink, MemorySink};
use olts::client_api::{ClientSession, ConnectOptions};
use olts::harness::config::Experiment;
use olts::harness::{training_setup, RunConfig};
use olts::sampler::ParamVector;
use olts::server::{self, ServerHandle};
use olts::solvers::Simulation;
use olts::trainer::ModelMode;

/// Small E2 Lorenz config: direct mode, tiny network, one validation
/// trajectory, so a test server starts in well under a second.
pub fn lorenz_cfg() -> RunConfig {
    let mut cfg = RunConfig::preset(Experiment::E2Lorenz, false);
    cfg.ensemble_size = 1;
    cfg.trainer.mode = ModelMode::Direct;
    cfg.trainer.hidden = vec![8];
    cfg.trainer.batch_size = 32;
    cfg.trainer.max_batches = 1_000_000;
    cfg.trainer.validate_every = 1_000_000;
    cfg.validation.trajectories = 1;
    cfg.buffer.capacity = 4096;
    cfg.server.poll_ms = 5;
    cfg
}

pub fn start(cfg: &RunConfig) -> (ServerHandle, Arc<MemorySink>) {
    let sink = Arc::new(MemorySink::new());
    let handle = start_with(cfg, sink.clone());
    (handle, sink)
}

pub fn start_with(cfg: &RunConfig, sink: Arc<dyn ArtifactSink>) -> ServerHandle {
    let setup = training_setup(cfg).unwrap();
    server::start(cfg.server_config().unwrap(), setup, sink).unwrap()
}

pub fn lorenz_params(cfg: &RunConfig, rho: f64) -> ParamVector {
    let names = cfg.param_space().unwrap().names();
    ParamVector::new(names, vec![rho, 1.0, 2.0, 20.0])
}

pub fn lorenz_trajectory(cfg: &RunConfig, params: &ParamVector) -> Vec<Vec<f64>> {
    Simulation::build(&cfg.solver, params, 0).unwrap().trajectory().unwrap()
}

pub fn quiet() -> ConnectOptions {
    ConnectOptions {
        heartbeat: None,
        ..ConnectOptions::default()
    }
}

/// Streams `steps` (all of them when `None`) and sends `Bye`.
pub fn stream(addr: SocketAddr, sim_id: u64, params: &ParamVector, fields: &[Vec<f64>], steps: Option<usize>) {
    let shape = vec![fields[0].len() as u32];
    let mut s = ClientSession::connect_with(&addr.to_string(), sim_id, params.clone(), shape, &quiet()).unwrap();
    for (t, f) in fields.iter().take(steps.unwrap_or(fields.len())).enumerate() {
        s.send_timestep(t as u32, f).unwrap();
    }
    s.finalize().unwrap();
}

/// Polls `cond` every few milliseconds; false on timeout.
pub fn wait_until(timeout: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let t0 = Instant::now();
    while t0.elapsed() < timeout {
        if cond() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    cond()
}

/// Small E2 config for runs through the `olts` binary: AR mode as in the
/// preset, but a tiny network and a slowed-down client so faults land
/// mid-trajectory.
pub fn launch_cfg(out: &std::path::Path, ensemble: u64, concurrency: u32) -> RunConfig {
    let mut cfg = RunConfig::preset(Experiment::E2Lorenz, false);
    cfg.ensemble_size = ensemble;
    cfg.concurrency = concurrency;
    cfg.trainer.hidden = vec![16];
    cfg.trainer.batch_size = 64;
    cfg.trainer.max_batches = 1_000_000;
    cfg.trainer.validate_every = 200;
    cfg.validation.trajectories = 1;
    cfg.buffer.capacity = 4096;
    cfg.launcher.tick_ms = 20;
    cfg.launcher.step_delay_us = 300;
    cfg.launcher.client_heartbeat_ms = 200;
    cfg.server.poll_ms = 5;
    cfg.out_dir = out.to_path_buf();
    cfg
}

pub fn olts_bin() -> std::path::PathBuf {
    env!("CARGO_BIN_EXE_olts").into()
}
