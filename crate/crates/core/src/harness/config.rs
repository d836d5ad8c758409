//! Run configuration: a TOML file layered over a named preset.
//!
//! The file names an `experiment`; its preset supplies every field and the
//! file overrides any of them. Tables merge key by key, except `strategy`
//! and `param_space`, which are replaced whole. Unknown keys are errors.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::buffer::{default_watermark, BufferPolicy, DEFAULT_CAPACITY};
use crate::sampler::{ParamEntry, ParamSpace, Sampler, SamplingStrategy};
use crate::server::{SampleUnitKind, ServerConfig};
use crate::solvers::{Simulation, SolverKind, SolverSettings};
use crate::trainer::{Activation, ModelMode, SgdConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    E1Heat,
    E2Lorenz,
    Advection,
    Custom,
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::E1Heat => "e1_heat",
            Self::E2Lorenz => "e2_lorenz",
            Self::Advection => "advection",
            Self::Custom => "custom",
        })
    }
}

impl FromStr for Experiment {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        Value::String(s.into())
            .try_into()
            .map_err(|_| ConfigError::Invalid(format!("unknown experiment `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    Online,
    OfflineGenerate,
    OfflineTrain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyName {
    Fifo,
    Reservoir,
    ReadOnceRandom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Model init, buffer and batch RNGs, per-sim solver seeds, shuffling.
    pub master: u64,
    /// Held-out validation trajectories. Never used for λ assignment.
    pub validation: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferSection {
    pub policy: PolicyName,
    /// Slots per shard.
    pub capacity: u32,
    /// Read-once policy only; defaults to four batches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub watermark: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSection {
    pub mode: ModelMode,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lr0: f64,
    pub decay_gamma: f64,
    pub batch_size: usize,
    pub max_batches: u64,
    pub validate_every: u64,
    /// 0 writes a checkpoint at exit only.
    pub checkpoint_every: u64,
    /// Parameters fed to the model, in order.
    pub inputs: Vec<String>,
    /// One shared field scaling instead of one per component.
    pub pooled_target_norm: bool,
    pub log_batch_stats: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationSection {
    pub trajectories: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerSection {
    pub host: String,
    pub data_port: u16,
    pub ctrl_port: u16,
    pub poll_ms: u64,
    /// Drain and stop once the whole ensemble has completed.
    pub stop_on_ensemble: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LauncherSection {
    pub max_retries: u32,
    pub heartbeat_timeout_ms: u64,
    pub tick_ms: u64,
    pub ready_timeout_ms: u64,
    pub client_heartbeat_ms: u64,
    /// Artificial pause after each client step, to stretch short runs.
    pub step_delay_us: u64,
    /// How long to wait for the server to exit after `Shutdown`.
    pub server_grace_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSection {
    /// Clients killed once, mid-trajectory, by the launcher.
    pub kill_clients: u32,
    pub kill_delay_min_ms: u64,
    pub kill_delay_max_ms: u64,
    /// Sims whose client fails on every attempt.
    pub fail_always: Vec<u64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfflineSection {
    pub trajectories: u64,
    pub dataset: PathBuf,
    /// Keep every k-th step when generating; 1 keeps all.
    pub subsample_every: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub mode: RunMode,
    pub ensemble_size: u64,
    pub concurrency: u32,
    pub shards: usize,
    pub sample_unit: SampleUnitKind,
    /// Train on the reception thread. Slower, but bitwise reproducible.
    pub serialized: bool,
    pub out_dir: PathBuf,
    pub seeds: Seeds,
    pub strategy: SamplingStrategy,
    pub param_space: Vec<ParamEntry>,
    pub solver: SolverSettings,
    pub buffer: BufferSection,
    pub trainer: TrainerSection,
    pub validation: ValidationSection,
    pub server: ServerSection,
    pub launcher: LauncherSection,
    pub faults: FaultSection,
    pub offline: OfflineSection,
}

fn heat_space() -> Vec<ParamEntry> {
    Simulation::HEAT_PARAMS
        .iter()
        .map(|n| ParamEntry::uniform(n, 100.0, 500.0))
        .collect()
}

/// ρ values used for the Lorenz ensembles.
pub const RHO_VALUES: [f64; 6] = [0.0, 20.0, 40.0, 60.0, 80.0, 100.0];

fn lorenz_space() -> Vec<ParamEntry> {
    vec![
        ParamEntry::discrete("rho", &RHO_VALUES),
        ParamEntry::normal("x0", 15.0, 30.0),
        ParamEntry::normal("y0", 15.0, 30.0),
        ParamEntry::normal("z0", 15.0, 30.0),
    ]
}

impl RunConfig {
    /// The built-in settings for `experiment`, at desk scale unless
    /// `full_scale`.
    pub fn preset(experiment: Experiment, full_scale: bool) -> Self {
        let base = Self {
            experiment,
            mode: RunMode::Online,
            ensemble_size: 500,
            concurrency: 4,
            shards: 1,
            sample_unit: SampleUnitKind::SingleStep,
            serialized: false,
            out_dir: PathBuf::from(format!("runs/{experiment}")),
            seeds: Seeds {
                master: 0,
                validation: 1_000_003,
            },
            strategy: SamplingStrategy::MonteCarlo { seed: 1 },
            param_space: heat_space(),
            solver: SolverSettings::heat(32),
            buffer: BufferSection {
                policy: PolicyName::ReadOnceRandom,
                capacity: DEFAULT_CAPACITY,
                watermark: None,
            },
            trainer: TrainerSection {
                mode: ModelMode::Direct,
                hidden: vec![256, 256, 256],
                activation: Activation::Relu,
                lr0: 1e-3,
                decay_gamma: 0.99995,
                batch_size: 5,
                max_batches: 10_000,
                validate_every: 500,
                checkpoint_every: 0,
                inputs: Simulation::HEAT_PARAMS.iter().map(|s| s.to_string()).collect(),
                pooled_target_norm: true,
                log_batch_stats: false,
            },
            validation: ValidationSection { trajectories: 10 },
            server: ServerSection {
                host: "127.0.0.1".into(),
                data_port: 0,
                ctrl_port: 0,
                poll_ms: 50,
                stop_on_ensemble: true,
            },
            launcher: LauncherSection {
                max_retries: 3,
                heartbeat_timeout_ms: 10_000,
                tick_ms: 1_000,
                ready_timeout_ms: 30_000,
                client_heartbeat_ms: 1_000,
                step_delay_us: 0,
                server_grace_ms: 600_000,
            },
            faults: FaultSection {
                kill_clients: 0,
                kill_delay_min_ms: 50,
                kill_delay_max_ms: 200,
                fail_always: Vec::new(),
                seed: 0,
            },
            offline: OfflineSection {
                trajectories: 50,
                dataset: PathBuf::from(format!("data/{experiment}")),
                subsample_every: 1,
            },
        };
        let mut cfg = match experiment {
            // Plain SGD at 1e-3 barely moves in a desk-length heat run.
            Experiment::E1Heat => Self {
                trainer: TrainerSection {
                    lr0: 3e-2,
                    ..base.trainer.clone()
                },
                ..base
            },
            Experiment::Custom => base,
            Experiment::E2Lorenz => Self {
                ensemble_size: 1_000,
                param_space: lorenz_space(),
                solver: SolverSettings::lorenz(),
                buffer: BufferSection {
                    capacity: 16_384,
                    ..base.buffer.clone()
                },
                trainer: TrainerSection {
                    mode: ModelMode::Autoregressive,
                    hidden: vec![512, 512, 512],
                    activation: Activation::Silu,
                    batch_size: 1024,
                    validate_every: 100,
                    inputs: vec!["rho".into()],
                    pooled_target_norm: false,
                    ..base.trainer.clone()
                },
                offline: OfflineSection {
                    trajectories: 100,
                    ..base.offline.clone()
                },
                ..base
            },
            Experiment::Advection => Self {
                ensemble_size: 200,
                param_space: vec![
                    ParamEntry::uniform("beta", 0.1, 1.0),
                    ParamEntry::uniform("amp", 0.5, 2.0),
                    ParamEntry::uniform("phase", 0.0, std::f64::consts::TAU),
                ],
                solver: SolverSettings::advection(64),
                trainer: TrainerSection {
                    mode: ModelMode::Autoregressive,
                    hidden: vec![128, 128],
                    activation: Activation::Relu,
                    batch_size: 32,
                    validate_every: 200,
                    inputs: vec!["beta".into()],
                    pooled_target_norm: true,
                    ..base.trainer.clone()
                },
                ..base
            },
        };
        if full_scale {
            match experiment {
                Experiment::E1Heat => {
                    cfg.trainer.lr0 = 1e-3;
                    cfg.solver = SolverSettings::heat(100);
                    cfg.ensemble_size = 10_000;
                    cfg.trainer.hidden = vec![1024, 1024, 1024];
                    cfg.trainer.max_batches = 100_000;
                    cfg.trainer.batch_size = 10;
                    cfg.offline.trajectories = 500;
                }
                Experiment::E2Lorenz => {
                    cfg.ensemble_size = 10_000;
                    cfg.buffer.capacity = 65_536;
                }
                _ => {}
            }
        }
        cfg
    }

    /// Parses a config file body layered over its preset.
    pub fn from_toml_str(text: &str, full_scale: bool) -> Result<Self, ConfigError> {
        let user: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let experiment = match user.get("experiment") {
            Some(Value::String(s)) => s.parse()?,
            Some(_) => return Err(ConfigError::Parse("`experiment` must be a string".into())),
            None => return Err(ConfigError::Parse("missing `experiment`".into())),
        };
        let mut merged = if experiment == Experiment::Custom {
            Table::new()
        } else {
            Table::try_from(Self::preset(experiment, full_scale)).map_err(|e| ConfigError::Parse(e.to_string()))?
        };
        merge(&mut merged, user);
        let cfg: Self = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, full_scale: bool) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text, full_scale)
    }

    /// The fully resolved config as TOML; loading it gives back `self`.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn param_space(&self) -> Result<ParamSpace, ConfigError> {
        ParamSpace::new(self.param_space.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn buffer_policy(&self) -> BufferPolicy {
        match self.buffer.policy {
            PolicyName::Fifo => BufferPolicy::Fifo,
            PolicyName::Reservoir => BufferPolicy::ReservoirWeighted,
            PolicyName::ReadOnceRandom => BufferPolicy::ReadOnceRandom {
                watermark: self
                    .buffer
                    .watermark
                    .unwrap_or_else(|| default_watermark(self.trainer.batch_size as u32)),
            },
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr0: self.trainer.lr0,
            decay_gamma: self.trainer.decay_gamma,
            batch_size: self.trainer.batch_size,
            max_batches: self.trainer.max_batches,
        }
    }

    /// Checks every cross-field constraint.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let expected_kind = match self.experiment {
            Experiment::E1Heat => Some(SolverKind::Heat),
            Experiment::E2Lorenz => Some(SolverKind::Lorenz),
            Experiment::Advection => Some(SolverKind::Advection),
            Experiment::Custom => None,
        };
        if let Some(k) = expected_kind {
            if k != self.solver.kind {
                return bad(format!("experiment {} runs the {k} solver, not {}", self.experiment, self.solver.kind));
            }
        }
        if self.ensemble_size == 0 {
            return bad("ensemble_size must be >= 1".into());
        }
        if self.concurrency == 0 {
            return bad("concurrency must be >= 1".into());
        }
        if self.shards == 0 {
            return bad("shards must be >= 1".into());
        }
        if self.buffer.capacity == 0 {
            return bad("buffer.capacity must be >= 1".into());
        }
        if let BufferPolicy::ReadOnceRandom { watermark } = self.buffer_policy() {
            if watermark > self.buffer.capacity {
                return bad(format!(
                    "buffer.watermark {watermark} exceeds capacity {}",
                    self.buffer.capacity
                ));
            }
            if self.trainer.batch_size > self.buffer.capacity as usize {
                return bad("trainer.batch_size exceeds buffer.capacity".into());
            }
        } else if self.buffer.watermark.is_some() {
            return bad("buffer.watermark only applies to read_once_random".into());
        }
        self.sgd().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.trainer.hidden.contains(&0) {
            return bad("trainer.hidden sizes must be >= 1".into());
        }
        if self.launcher.tick_ms == 0 || self.launcher.heartbeat_timeout_ms == 0 {
            return bad("launcher tick and heartbeat timeout must be > 0".into());
        }
        if self.faults.kill_delay_min_ms > self.faults.kill_delay_max_ms {
            return bad("faults.kill_delay_min_ms exceeds kill_delay_max_ms".into());
        }
        if self.offline.subsample_every == 0 {
            return bad("offline.subsample_every must be >= 1".into());
        }
        if self.validation.trajectories == 0 {
            return bad("validation.trajectories must be >= 1".into());
        }
        let space = self.param_space()?;
        for name in &self.trainer.inputs {
            if space.index_of(name).is_none() {
                return bad(format!("trainer input `{name}` is not in param_space"));
            }
        }
        let sampler = Sampler::new(space, self.strategy.clone(), self.ensemble_size)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let probe = sampler
            .next_params(0)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Simulation::build(&self.solver, &probe, 0).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.sample_unit == SampleUnitKind::FullTrajectory && self.serialized {
            return bad("serialized mode is only supported with single_step samples".into());
        }
        Ok(())
    }

    /// Server settings for this run.
    pub fn server_config(&self) -> Result<ServerConfig, ConfigError> {
        let mut s = ServerConfig::new(self.param_space()?, self.strategy.clone(), self.ensemble_size);
        s.data_addr = format!("{}:{}", self.server.host, self.server.data_port);
        s.ctrl_addr = format!("{}:{}", self.server.host, self.server.ctrl_port);
        s.shards = self.shards;
        s.buffer_policy = self.buffer_policy();
        s.buffer_capacity = self.buffer.capacity;
        s.sample_unit = self.sample_unit;
        s.sgd = self.sgd();
        s.validate_every = self.trainer.validate_every;
        s.checkpoint_every = self.trainer.checkpoint_every;
        s.stop_on_ensemble = self.server.stop_on_ensemble;
        s.seed = self.seeds.master;
        s.serialized = self.serialized;
        s.log_batch_stats = self.trainer.log_batch_stats;
        s.poll_interval = Duration::from_millis(self.server.poll_ms.max(1));
        Ok(s)
    }
}

/// Overlays `top` on `base`. Nested tables merge; everything else replaces.
fn merge(base: &mut Table, top: Table) {
    const REPLACE_WHOLE: [&str; 2] = ["strategy", "param_space"];
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) if !REPLACE_WHOLE.contains(&k.as_str()) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for e in [Experiment::E1Heat, Experiment::E2Lorenz, Experiment::Advection] {
            for full in [false, true] {
                let cfg = RunConfig::preset(e, full);
                cfg.validate().unwrap();
                let back = RunConfig::from_toml_str(&cfg.to_toml(), full).unwrap();
                assert_eq!(back, cfg);
            }
        }
    }

    #[test]
    fn full_scale_heat_preset() {
        let cfg = RunConfig::preset(Experiment::E1Heat, true);
        assert_eq!(cfg.trainer.lr0, 1e-3);
        assert_eq!(cfg.trainer.hidden, vec![1024; 3]);
        assert_eq!(cfg.trainer.max_batches, 100_000);
        assert_eq!(cfg.solver.grid, 100);
    }

    #[test]
    fn overrides_merge_into_the_preset() {
        let cfg = RunConfig::from_toml_str(
            "experiment = \"e2_lorenz\"\nensemble_size = 20\n[trainer]\nbatch_size = 64\n[buffer]\nwatermark = 128\n",
            false,
        )
        .unwrap();
        assert_eq!(cfg.ensemble_size, 20);
        assert_eq!(cfg.trainer.batch_size, 64);
        assert_eq!(cfg.trainer.hidden, vec![512, 512, 512]);
        assert_eq!(cfg.buffer_policy(), BufferPolicy::ReadOnceRandom { watermark: 128 });
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "experiment = \"e1_heat\"\nensemble_sise = 3\n",
            "experiment = \"e1_heat\"\n[trainer]\nlr = 0.1\n",
            "experiment = \"e9\"\n",
        ] {
            assert!(RunConfig::from_toml_str(text, false).is_err(), "{text}");
        }
    }

    #[test]
    fn strategy_is_replaced_whole() {
        let cfg = RunConfig::from_toml_str(
            "experiment = \"e2_lorenz\"\n[strategy]\nkind = \"ordered_sweep\"\naxis = \"rho\"\nseed = 4\n",
            false,
        )
        .unwrap();
        assert_eq!(
            cfg.strategy,
            SamplingStrategy::OrderedSweep {
                axis: "rho".into(),
                seed: 4
            }
        );
    }

    #[test]
    fn cross_field_checks() {
        let mut cfg = RunConfig::preset(Experiment::E2Lorenz, false);
        cfg.buffer.watermark = Some(cfg.buffer.capacity + 1);
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::preset(Experiment::E2Lorenz, false);
        cfg.trainer.inputs.push("sigma".into());
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::preset(Experiment::E1Heat, false);
        cfg.solver = SolverSettings::lorenz();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn default_watermark_is_four_batches() {
        let cfg = RunConfig::preset(Experiment::E1Heat, false);
        assert_eq!(cfg.buffer_policy(), BufferPolicy::ReadOnceRandom { watermark: 20 });
    }
}
