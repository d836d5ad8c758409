//! Everything around the core loop: run configuration and presets, the
//! training setup shared by online and offline runs, offline datasets and
//! training, run comparison, and the client runner used by the `olts client`
//! subcommand.

pub mod compare;
pub mod config;
pub mod dataset;
pub mod local;
pub mod offline;
pub mod runner;

use std::io;

use thiserror::Error;

pub use compare::{compare_runs, gain_percent, CompareReport, RunMetrics};
pub use config::{ConfigError, Experiment, RunConfig, RunMode};
pub use dataset::{offline_generate, read_dataset, subsample, write_dataset, Dataset, Manifest, Trajectory};
pub use local::run_local;
pub use offline::{offline_train, OfflineOutcome};
pub use runner::{run_client, ClientJob, ClientRunError};

use crate::buffer::Sample;
use crate::client_api::ClientError;
use crate::sampler::{Sampler, SamplerError, SamplingStrategy};
use crate::server::{ServerError, TrainingSetup};
use crate::solvers::{Simulation, SolverError};
use crate::trainer::{FeatureMap, Mlp, TrainError, ValidationSet};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("{0}")]
    Io(#[from] io::Error),
}

/// Mixes a seed with a domain tag and an index (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, domain: u64, index: u64) -> u64 {
    let mut z = seed
        ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SIM_DOMAIN: u64 = 1;
const MODEL_DOMAIN: u64 = 2;
const VALIDATION_DOMAIN: u64 = 3;
const SHUFFLE_DOMAIN: u64 = 4;

/// Solver seed for one ensemble member; restarts reuse it.
pub fn sim_seed(master: u64, sim_id: u64) -> u64 {
    derive_seed(master, SIM_DOMAIN, sim_id)
}

pub fn shuffle_seed(master: u64) -> u64 {
    derive_seed(master, SHUFFLE_DOMAIN, 0)
}

/// Held-out trajectories, drawn from their own seed.
pub fn validation_samples(cfg: &RunConfig) -> Result<Vec<Sample>, HarnessError> {
    let n = cfg.validation.trajectories as u64;
    let seed = cfg.seeds.validation;
    let sampler = Sampler::new(cfg.param_space()?, SamplingStrategy::MonteCarlo { seed }, n)?;
    (0..n)
        .map(|i| {
            let params = sampler.next_params(i)?;
            let sim = Simulation::build(&cfg.solver, &params, derive_seed(seed, VALIDATION_DOMAIN, i))?;
            let fields = sim.trajectory()?;
            Ok(Sample::trajectory(u64::MAX - i, params, fields).map_err(|e| HarnessError::Dataset(e.to_string()))?)
        })
        .collect()
}

/// Model, feature map and validation set for `cfg`. Field scaling is fitted
/// on the validation trajectories, so online and offline runs of one config
/// share it exactly.
pub fn training_setup(cfg: &RunConfig) -> Result<TrainingSetup, HarnessError> {
    let samples = validation_samples(cfg)?;
    let reference: Vec<Vec<Vec<f64>>> = samples
        .iter()
        .map(|s| match &s.unit {
            crate::buffer::SampleUnit::FullTrajectory { fields } => fields.clone(),
            _ => unreachable!("validation samples are trajectories"),
        })
        .collect();
    let inputs: Vec<&str> = cfg.trainer.inputs.iter().map(String::as_str).collect();
    let features = FeatureMap::fit(
        cfg.trainer.mode,
        &cfg.param_space()?,
        &inputs,
        cfg.solver.n_steps(),
        &reference,
        cfg.trainer.pooled_target_norm,
    )?;
    let validation = ValidationSet::new(&features, &samples)?;
    let mut dims = vec![features.input_dim()];
    dims.extend_from_slice(&cfg.trainer.hidden);
    dims.push(features.output_dim());
    let model = Mlp::new(&dims, cfg.trainer.activation, derive_seed(cfg.seeds.master, MODEL_DOMAIN, 0));
    Ok(TrainingSetup {
        model,
        features,
        validation,
    })
}
