//! Runs one solver instance and streams it to the server.

use std::time::Duration;

use thiserror::Error;

use crate::client_api::{ClientError, ClientSession, ConnectOptions};
use crate::sampler::ParamVector;
use crate::solvers::{RunError, Simulation, SolverError, SolverSettings, TrajectorySummary};

#[derive(Debug, Clone)]
pub struct ClientJob {
    pub endpoint: String,
    pub sim_id: u64,
    pub params: ParamVector,
    pub settings: SolverSettings,
    pub seed: u64,
    /// Pause after every sent step.
    pub step_delay: Duration,
    pub connect: ConnectOptions,
    /// Abort without a `Bye` once this many steps were sent.
    pub fail_at_step: Option<u32>,
}

impl ClientJob {
    pub fn new(endpoint: impl Into<String>, sim_id: u64, params: ParamVector, settings: SolverSettings) -> Self {
        Self {
            endpoint: endpoint.into(),
            sim_id,
            params,
            settings,
            seed: 0,
            step_delay: Duration::ZERO,
            connect: ConnectOptions::default(),
            fail_at_step: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ClientRunError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("injected failure after {0} steps")]
    Injected(u32),
}

/// Builds the simulation, streams every step, then finalizes the session.
pub fn run_client(job: &ClientJob) -> Result<TrajectorySummary, ClientRunError> {
    let sim = Simulation::build(&job.settings, &job.params, job.seed)?;
    let mut session = ClientSession::connect_with(
        &job.endpoint,
        job.sim_id,
        job.params.clone(),
        sim.field_shape(),
        &job.connect,
    )?;
    let summary = sim
        .run(|t, field| {
            if job.fail_at_step == Some(t) {
                return Err(ClientRunError::Injected(t));
            }
            session.send_timestep(t, field)?;
            if !job.step_delay.is_zero() {
                std::thread::sleep(job.step_delay);
            }
            Ok(())
        })
        .map_err(|e| match e {
            RunError::Solver(s) => ClientRunError::Solver(s),
            RunError::Sink { source, .. } => source,
        })?;
    session.finalize()?;
    Ok(summary)
}
