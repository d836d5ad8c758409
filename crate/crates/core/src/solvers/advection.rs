//! 1-D linear advection `∂u/∂t + β ∂u/∂x = 0` on a periodic grid, first-order upwind.

use super::SolverError;

#[derive(Debug, Clone, PartialEq)]
pub struct AdvectionParams {
    pub beta: f64,
    pub dt: f64,
    pub t_total: f64,
    pub length: f64,
    pub u0: Vec<f64>,
}

impl AdvectionParams {
    pub fn n(&self) -> usize {
        self.u0.len()
    }

    pub fn dx(&self) -> f64 {
        self.length / self.n() as f64
    }

    /// Signed Courant number `β·dt/dx`.
    pub fn cfl(&self) -> f64 {
        self.beta * self.dt / self.dx()
    }

    /// Profile `amp·sin(2π x/L + phase)` sampled at `x_i = i·L/n`.
    pub fn sine_profile(n: usize, length: f64, amp: f64, phase: f64) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let x = i as f64 * length / n as f64;
                amp * (2.0 * std::f64::consts::PI * x / length + phase).sin()
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if self.u0.len() < 2 {
            return Err(SolverError::InvalidParams(
                "advection grid needs at least 2 points".into(),
            ));
        }
        if !(self.beta.is_finite() && self.dt > 0.0 && self.length > 0.0) {
            return Err(SolverError::InvalidParams(
                "advection needs finite beta, dt > 0, length > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Upwind update written as a convex combination, so `c = 1` is an exact
/// one-cell shift and `|c| ≤ 1` never increases the max norm.
pub fn advect_step(u: &[f64], p: &AdvectionParams) -> Vec<f64> {
    let n = u.len();
    let c = p.cfl();
    if c >= 0.0 {
        (0..n)
            .map(|i| (1.0 - c) * u[i] + c * u[(i + n - 1) % n])
            .collect()
    } else {
        let c = -c;
        (0..n)
            .map(|i| (1.0 - c) * u[i] + c * u[(i + 1) % n])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(beta: f64, dt: f64, u0: Vec<f64>) -> AdvectionParams {
        AdvectionParams {
            beta,
            dt,
            t_total: 1.0,
            length: 1.0,
            u0,
        }
    }

    #[test]
    fn zero_speed_is_identity() {
        let u0 = AdvectionParams::sine_profile(32, 1.0, 2.0, 0.3);
        let p = params(0.0, 0.01, u0.clone());
        assert_eq!(advect_step(&u0, &p), u0);
    }

    #[test]
    fn unit_cfl_is_exact_shift() {
        let u0: Vec<f64> = (0..64).map(|i| ((i * 37) % 11) as f64 * 0.173 - 0.4).collect();
        for beta in [1.0, -1.0] {
            let p = params(beta, 1.0 / 64.0, u0.clone());
            assert_eq!(p.cfl().abs(), 1.0);
            let out = advect_step(&u0, &p);
            for i in 0..64 {
                let src = if beta > 0.0 { (i + 63) % 64 } else { (i + 1) % 64 };
                assert_eq!(out[i], u0[src]);
            }
        }
    }

    #[test]
    fn conserves_mass() {
        let u0 = AdvectionParams::sine_profile(50, 1.0, 1.0, 0.0)
            .iter()
            .map(|v| v + 2.0)
            .collect::<Vec<_>>();
        let p = params(0.7, 0.01, u0.clone());
        let mut u = u0.clone();
        let m0: f64 = u0.iter().sum();
        for _ in 0..100 {
            u = advect_step(&u, &p);
            assert!((u.iter().sum::<f64>() - m0).abs() < 1e-12);
        }
    }
}
