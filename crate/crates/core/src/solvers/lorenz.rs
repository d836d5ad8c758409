//! Lorenz system integrated with explicit Euler.

use serde::{Deserialize, Serialize};

use super::SolverError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LorenzVariant {
    /// `dx/dt = σ(y − x)`.
    #[default]
    Standard,
    /// `dx/dt = σ(y − z)`, kept only to audit the alternative form.
    AsPrinted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LorenzParams {
    pub sigma: f64,
    pub beta: f64,
    pub rho: f64,
    pub initial: [f64; 3],
    pub dt: f64,
    pub t_total: f64,
    pub variant: LorenzVariant,
    /// Euler sub-steps per emitted step of length `dt`.
    pub substeps: u32,
}

impl LorenzParams {
    pub const SIGMA: f64 = 10.0;
    pub const BETA: f64 = 8.0 / 3.0;

    pub fn new(rho: f64, initial: [f64; 3]) -> Self {
        Self {
            sigma: Self::SIGMA,
            beta: Self::BETA,
            rho,
            initial,
            dt: 0.01,
            t_total: 20.0,
            variant: LorenzVariant::Standard,
            substeps: 1,
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let all = [self.sigma, self.beta, self.rho, self.dt, self.t_total];
        if all.iter().chain(&self.initial).any(|v| !v.is_finite())
            || self.dt <= 0.0
            || self.substeps == 0
        {
            return Err(SolverError::InvalidParams(
                "lorenz needs finite coefficients, dt > 0 and substeps >= 1".into(),
            ));
        }
        Ok(())
    }
}

pub fn lorenz_field(pos: [f64; 3], p: &LorenzParams) -> [f64; 3] {
    let [x, y, z] = pos;
    let dx = match p.variant {
        LorenzVariant::Standard => p.sigma * (y - x),
        LorenzVariant::AsPrinted => p.sigma * (y - z),
    };
    [dx, x * (p.rho - z) - y, x * y - p.beta * z]
}

/// One explicit Euler step `pos + dt·F(pos)`.
pub fn lorenz_step(pos: [f64; 3], p: &LorenzParams) -> Result<[f64; 3], SolverError> {
    let f = lorenz_field(pos, p);
    let next = [
        pos[0] + p.dt * f[0],
        pos[1] + p.dt * f[1],
        pos[2] + p.dt * f[2],
    ];
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(SolverError::Divergence { step: 0 })
    }
}

/// Advances one emitted step of length `dt` with `substeps` Euler steps of
/// length `dt / substeps`. With one sub-step this is exactly [`lorenz_step`].
pub fn lorenz_advance(pos: [f64; 3], p: &LorenzParams) -> Result<[f64; 3], SolverError> {
    if p.substeps <= 1 {
        return lorenz_step(pos, p);
    }
    let h = p.dt / p.substeps as f64;
    let mut cur = pos;
    for _ in 0..p.substeps {
        let f = lorenz_field(cur, p);
        cur = [cur[0] + h * f[0], cur[1] + h * f[1], cur[2] + h * f[2]];
    }
    if cur.iter().all(|v| v.is_finite()) {
        Ok(cur)
    } else {
        Err(SolverError::Divergence { step: 0 })
    }
}

/// Initial position drawn from `N(mean, std)` per coordinate using a small
/// self-contained generator (SplitMix64 + Box–Muller), so that clients in
/// other languages can reproduce it from the seed alone.
pub fn seeded_initial_position(seed: u64, mean: f64, std: f64) -> [f64; 3] {
    let mut state = seed;
    let mut next_unit = || {
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        // 53-bit mantissa in (0, 1].
        ((z >> 11) as f64 + 1.0) / (1u64 << 53) as f64
    };
    let mut out = [0.0; 3];
    for v in out.iter_mut() {
        let u1 = next_unit();
        let u2 = next_unit();
        let g = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        *v = mean + std * g;
    }
    out
}
