//! In-process online run: the server plus client threads instead of client
//! processes. Same wire traffic as a launched run, without the supervision.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use super::config::RunConfig;
use super::runner::{run_client, ClientJob};
use super::{sim_seed, training_setup, HarnessError};
use crate::artifacts::ArtifactSink;
use crate::client_api::ConnectOptions;
use crate::launcher::ControlLink;
use crate::sampler::ParamVector;
use crate::server::{self, ServerOutcome};

const CONTROL_TIMEOUT: Duration = Duration::from_secs(30);

/// Runs the whole ensemble through a local server, at most `concurrency`
/// client threads at a time, in sim id order.
pub fn run_local(cfg: &RunConfig, sink: Arc<dyn ArtifactSink>) -> Result<ServerOutcome, HarnessError> {
    let setup = training_setup(cfg)?;
    let handle = server::start(cfg.server_config()?, setup, sink)?;
    let mut ctrl = ControlLink::connect(&handle.ctrl_addr().to_string())?;
    let names = cfg.param_space()?.names();
    let endpoint = handle.data_addr().to_string();
    let assigned = ctrl.request_params(cfg.ensemble_size.min(u32::MAX as u64) as u32, CONTROL_TIMEOUT)?;
    let jobs: VecDeque<ClientJob> = assigned
        .into_iter()
        .map(|(sim_id, values)| ClientJob {
            seed: sim_seed(cfg.seeds.master, sim_id),
            step_delay: Duration::from_micros(cfg.launcher.step_delay_us),
            connect: ConnectOptions {
                heartbeat: Some(Duration::from_millis(cfg.launcher.client_heartbeat_ms)),
                ..ConnectOptions::default()
            },
            ..ClientJob::new(
                endpoint.clone(),
                sim_id,
                ParamVector::new(Arc::clone(&names), values),
                cfg.solver.clone(),
            )
        })
        .collect();
    let queue = Arc::new(Mutex::new(jobs));
    let server_done = Arc::new(AtomicBool::new(false));
    let workers: Vec<_> = (0..cfg.concurrency)
        .map(|_| {
            let queue = Arc::clone(&queue);
            let done = Arc::clone(&server_done);
            thread::spawn(move || {
                while !done.load(Ordering::Acquire) {
                    let Some(job) = queue.lock().unwrap().pop_front() else {
                        return;
                    };
                    if let Err(e) = run_client(&job) {
                        log::warn!("sim {} failed: {e}", job.sim_id);
                    }
                }
            })
        })
        .collect();
    while !workers.iter().all(|w| w.is_finished()) {
        if handle.is_finished() {
            server_done.store(true, Ordering::Release);
        }
        while ctrl.poll_event(Duration::ZERO).is_some() {}
        thread::sleep(Duration::from_millis(5));
    }
    for w in workers {
        let _ = w.join();
    }
    if !handle.is_finished() {
        if let Err(e) = ctrl.shutdown(CONTROL_TIMEOUT) {
            log::debug!("shutdown not acknowledged: {e}");
        }
    }
    let outcome = handle.join()?;
    drop(ctrl);
    Ok(outcome)
}
