//! Deterministic data generators: heat equation, Lorenz system, linear advection.
//!
//! A [`Simulation`] is built from solver settings (grid, time step, horizon)
//! plus a parameter vector, and streamed step by step into a sink with
//! [`Simulation::run`]. The initial condition is emitted as step 0.

pub mod advection;
pub mod heat;
pub mod lorenz;

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use advection::{advect_step, AdvectionParams};
pub use heat::{heat_step, HeatParams, HeatState};
pub use lorenz::{
    lorenz_advance, lorenz_step, seeded_initial_position, LorenzParams, LorenzVariant,
};

use crate::sampler::ParamVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("solution diverged at step {step}")]
    Divergence { step: u32 },
    #[error("conjugate gradient did not converge in {iterations} iterations (residual {residual:e})")]
    CgNotConverged { iterations: usize, residual: f64 },
}

#[derive(Debug, Error)]
pub enum RunError<E> {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("sink failed at step {t_index}: {source}")]
    Sink { t_index: u32, source: E },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Heat,
    Lorenz,
    Advection,
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Heat => "heat",
            Self::Lorenz => "lorenz",
            Self::Advection => "advection",
        })
    }
}

impl FromStr for SolverKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "heat" => Ok(Self::Heat),
            "lorenz" => Ok(Self::Lorenz),
            "advection" => Ok(Self::Advection),
            other => Err(format!("unknown solver kind `{other}`")),
        }
    }
}

/// Everything about a run that is not part of the parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSettings {
    pub kind: SolverKind,
    pub dt: f64,
    pub t_total: f64,
    /// Heat: nodes per side. Advection: periodic grid points. Unused by Lorenz.
    pub grid: u32,
    pub length: f64,
    pub alpha: f64,
    pub lorenz_variant: LorenzVariant,
    /// Lorenz initial position distribution when `x0,y0,z0` are not parameters.
    pub init_mean: f64,
    pub init_std: f64,
    /// Lorenz Euler sub-steps per emitted step.
    pub substeps: u32,
}

impl SolverSettings {
    pub fn heat(grid: u32) -> Self {
        Self {
            kind: SolverKind::Heat,
            dt: 0.01,
            t_total: 1.0,
            grid,
            length: 1.0,
            alpha: 1.0,
            lorenz_variant: LorenzVariant::Standard,
            init_mean: 15.0,
            init_std: 30.0,
            substeps: 1,
        }
    }

    pub fn lorenz() -> Self {
        Self {
            kind: SolverKind::Lorenz,
            dt: 0.01,
            t_total: 20.0,
            grid: 0,
            substeps: 10,
            ..Self::heat(0)
        }
    }

    pub fn advection(grid: u32) -> Self {
        Self {
            kind: SolverKind::Advection,
            dt: 0.5 / grid.max(1) as f64,
            t_total: 1.0,
            grid,
            ..Self::heat(grid)
        }
    }

    pub fn n_steps(&self) -> u32 {
        (self.t_total / self.dt).round() as u32
    }

    pub fn field_shape(&self) -> Vec<u32> {
        match self.kind {
            SolverKind::Heat => vec![self.grid, self.grid],
            SolverKind::Lorenz => vec![3],
            SolverKind::Advection => vec![self.grid],
        }
    }

    pub fn field_len(&self) -> usize {
        self.field_shape().iter().map(|&d| d as usize).product()
    }

    /// `k=v` list passed to client processes (`kind` travels separately).
    pub fn to_kv_string(&self) -> String {
        let variant = match self.lorenz_variant {
            LorenzVariant::Standard => 0,
            LorenzVariant::AsPrinted => 1,
        };
        format!(
            "dt={:?},t_total={:?},grid={},length={:?},alpha={:?},lorenz_variant={},init_mean={:?},init_std={:?},substeps={}",
            self.dt,
            self.t_total,
            self.grid,
            self.length,
            self.alpha,
            variant,
            self.init_mean,
            self.init_std,
            self.substeps
        )
    }

    pub fn apply_kv(&mut self, pairs: &[(String, f64)]) -> Result<(), String> {
        for (k, v) in pairs {
            match k.as_str() {
                "dt" => self.dt = *v,
                "t_total" => self.t_total = *v,
                "grid" => self.grid = *v as u32,
                "length" => self.length = *v,
                "alpha" => self.alpha = *v,
                "lorenz_variant" => {
                    self.lorenz_variant = if *v == 0.0 {
                        LorenzVariant::Standard
                    } else {
                        LorenzVariant::AsPrinted
                    }
                }
                "init_mean" => self.init_mean = *v,
                "init_std" => self.init_std = *v,
                "substeps" => self.substeps = *v as u32,
                other => return Err(format!("unknown solver setting `{other}`")),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySummary {
    pub steps_emitted: u32,
    pub wall_time: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Simulation {
    Heat(HeatParams),
    Lorenz(LorenzParams),
    Advection(AdvectionParams),
}

fn check_keys(params: &ParamVector, allowed: &[&str]) -> Result<(), SolverError> {
    for name in params.names() {
        if !allowed.contains(&name.as_str()) {
            return Err(SolverError::InvalidParams(format!(
                "unexpected parameter `{name}` (allowed: {})",
                allowed.join(", ")
            )));
        }
    }
    Ok(())
}

fn require(params: &ParamVector, name: &str) -> Result<f64, SolverError> {
    params
        .get(name)
        .ok_or_else(|| SolverError::InvalidParams(format!("missing parameter `{name}`")))
}

impl Simulation {
    /// Heat parameter names, in the order used by the presets.
    pub const HEAT_PARAMS: [&'static str; 5] = ["T_ic", "T_x1", "T_x2", "T_y1", "T_y2"];

    /// `seed` only matters for a Lorenz run without `x0,y0,z0` parameters.
    pub fn build(
        settings: &SolverSettings,
        params: &ParamVector,
        seed: u64,
    ) -> Result<Self, SolverError> {
        let sim = match settings.kind {
            SolverKind::Heat => {
                check_keys(params, &["T_ic", "T_x1", "T_x2", "T_y1", "T_y2", "alpha"])?;
                Simulation::Heat(HeatParams {
                    t_ic: require(params, "T_ic")?,
                    t_x1: require(params, "T_x1")?,
                    t_x2: require(params, "T_x2")?,
                    t_y1: require(params, "T_y1")?,
                    t_y2: require(params, "T_y2")?,
                    alpha: params.get("alpha").unwrap_or(settings.alpha),
                    n: settings.grid as usize,
                    dt: settings.dt,
                    t_total: settings.t_total,
                    length: settings.length,
                })
            }
            SolverKind::Lorenz => {
                check_keys(params, &["rho", "x0", "y0", "z0", "sigma", "beta"])?;
                let initial = match (params.get("x0"), params.get("y0"), params.get("z0")) {
                    (Some(x), Some(y), Some(z)) => [x, y, z],
                    (None, None, None) => {
                        seeded_initial_position(seed, settings.init_mean, settings.init_std)
                    }
                    _ => {
                        return Err(SolverError::InvalidParams(
                            "give all of x0, y0, z0 or none".into(),
                        ))
                    }
                };
                Simulation::Lorenz(LorenzParams {
                    sigma: params.get("sigma").unwrap_or(LorenzParams::SIGMA),
                    beta: params.get("beta").unwrap_or(LorenzParams::BETA),
                    rho: require(params, "rho")?,
                    initial,
                    dt: settings.dt,
                    t_total: settings.t_total,
                    variant: settings.lorenz_variant,
                    substeps: settings.substeps,
                })
            }
            SolverKind::Advection => {
                check_keys(params, &["beta", "amp", "phase"])?;
                let n = settings.grid as usize;
                Simulation::Advection(AdvectionParams {
                    beta: require(params, "beta")?,
                    dt: settings.dt,
                    t_total: settings.t_total,
                    length: settings.length,
                    u0: AdvectionParams::sine_profile(
                        n,
                        settings.length,
                        params.get("amp").unwrap_or(1.0),
                        params.get("phase").unwrap_or(0.0),
                    ),
                })
            }
        };
        sim.validate()?;
        Ok(sim)
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        match self {
            Self::Heat(p) => p.validate(),
            Self::Lorenz(p) => p.validate(),
            Self::Advection(p) => p.validate(),
        }
    }

    pub fn kind(&self) -> SolverKind {
        match self {
            Self::Heat(_) => SolverKind::Heat,
            Self::Lorenz(_) => SolverKind::Lorenz,
            Self::Advection(_) => SolverKind::Advection,
        }
    }

    pub fn field_shape(&self) -> Vec<u32> {
        match self {
            Self::Heat(p) => vec![p.n as u32, p.n as u32],
            Self::Lorenz(_) => vec![3],
            Self::Advection(p) => vec![p.n() as u32],
        }
    }

    fn dt_total(&self) -> (f64, f64) {
        match self {
            Self::Heat(p) => (p.dt, p.t_total),
            Self::Lorenz(p) => (p.dt, p.t_total),
            Self::Advection(p) => (p.dt, p.t_total),
        }
    }

    /// Number of steps after the initial condition.
    pub fn n_steps(&self) -> u32 {
        let (dt, total) = self.dt_total();
        (total / dt).round() as u32
    }

    /// Iterates the solver, calling `sink(t_index, field)` for the initial
    /// condition and after every step.
    pub fn run<E, F>(&self, mut sink: F) -> Result<TrajectorySummary, RunError<E>>
    where
        F: FnMut(u32, &[f64]) -> Result<(), E>,
    {
        let start = Instant::now();
        let steps = self.n_steps();
        let mut emit = |t: u32, field: &[f64]| {
            sink(t, field).map_err(|source| RunError::Sink { t_index: t, source })
        };
        match self {
            Self::Heat(p) => {
                let mut state = p.initial_state();
                emit(0, &state.grid)?;
                for t in 1..=steps {
                    state = heat_step(&state, p)?;
                    emit(t, &state.grid)?;
                }
            }
            Self::Lorenz(p) => {
                let mut pos = p.initial;
                emit(0, &pos)?;
                for t in 1..=steps {
                    pos = lorenz_advance(pos, p).map_err(|_| SolverError::Divergence { step: t })?;
                    emit(t, &pos)?;
                }
            }
            Self::Advection(p) => {
                let mut u = p.u0.clone();
                emit(0, &u)?;
                for t in 1..=steps {
                    u = advect_step(&u, p);
                    if u.iter().any(|v| !v.is_finite()) {
                        return Err(SolverError::Divergence { step: t }.into());
                    }
                    emit(t, &u)?;
                }
            }
        }
        Ok(TrajectorySummary {
            steps_emitted: steps + 1,
            wall_time: start.elapsed(),
        })
    }

    /// Runs to completion and collects every emitted field.
    pub fn trajectory(&self) -> Result<Vec<Vec<f64>>, SolverError> {
        let mut out = Vec::with_capacity(self.n_steps() as usize + 1);
        self.run(|_, f| {
            out.push(f.to_vec());
            Ok::<(), std::convert::Infallible>(())
        })
        .map_err(|e| match e {
            RunError::Solver(s) => s,
            RunError::Sink { source, .. } => match source {},
        })?;
        Ok(out)
    }
}
