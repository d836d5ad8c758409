//! 2-D heat equation `∂u/∂t = α Δu` on a square with constant Dirichlet edges,
//! integrated with implicit Euler and a matrix-free conjugate gradient solve.

use super::SolverError;

/// Grid is `n × n` nodes including the boundary, spacing `length / (n - 1)`.
/// Node `(i, j)` lives at `grid[j * n + i]`, `i` along x and `j` along y.
/// Corner nodes carry the x-edge temperatures; the 5-point stencil never
/// reads them.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatParams {
    pub t_ic: f64,
    pub t_x1: f64,
    pub t_x2: f64,
    pub t_y1: f64,
    pub t_y2: f64,
    pub alpha: f64,
    pub n: usize,
    pub dt: f64,
    pub t_total: f64,
    pub length: f64,
}

impl HeatParams {
    pub fn validate(&self) -> Result<(), SolverError> {
        let temps = [self.t_ic, self.t_x1, self.t_x2, self.t_y1, self.t_y2];
        if self.n < 3 {
            return Err(SolverError::InvalidParams("heat grid needs n >= 3".into()));
        }
        if !(self.dt > 0.0 && self.alpha > 0.0 && self.length > 0.0 && self.t_total >= 0.0) {
            return Err(SolverError::InvalidParams(
                "heat needs dt > 0, alpha > 0, length > 0, t_total >= 0".into(),
            ));
        }
        if temps.iter().any(|t| !t.is_finite()) {
            return Err(SolverError::InvalidParams("non-finite temperature".into()));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        self.length / (self.n - 1) as f64
    }

    /// Diffusion number `α·dt/dx²`.
    pub fn diffusion_number(&self) -> f64 {
        self.alpha * self.dt / (self.dx() * self.dx())
    }

    fn edge_value(&self, i: usize, j: usize) -> Option<f64> {
        let last = self.n - 1;
        if i == 0 {
            Some(self.t_x1)
        } else if i == last {
            Some(self.t_x2)
        } else if j == 0 {
            Some(self.t_y1)
        } else if j == last {
            Some(self.t_y2)
        } else {
            None
        }
    }

    pub fn initial_state(&self) -> HeatState {
        let n = self.n;
        let mut grid = vec![self.t_ic; n * n];
        for j in 0..n {
            for i in 0..n {
                if let Some(v) = self.edge_value(i, j) {
                    grid[j * n + i] = v;
                }
            }
        }
        HeatState { grid, t_index: 0 }
    }

    /// Lowest and highest of the five prescribed temperatures.
    pub fn bounds(&self) -> (f64, f64) {
        let temps = [self.t_ic, self.t_x1, self.t_x2, self.t_y1, self.t_y2];
        (
            temps.iter().copied().fold(f64::INFINITY, f64::min),
            temps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatState {
    pub grid: Vec<f64>,
    pub t_index: u32,
}

/// Relative residual target of the linear solve.
pub const CG_RTOL: f64 = 1e-10;

/// Advances one implicit Euler step: solves `(I − α·dt·L_h) u' = u` on the
/// interior nodes, boundary rows held at the edge temperatures.
pub fn heat_step(state: &HeatState, p: &HeatParams) -> Result<HeatState, SolverError> {
    let n = p.n;
    if state.grid.len() != n * n {
        return Err(SolverError::InvalidParams(format!(
            "state has {} nodes, params say {}",
            state.grid.len(),
            n * n
        )));
    }
    let m = n - 2;
    let r = p.diffusion_number();
    let idx = |i: usize, j: usize| (j - 1) * m + (i - 1);

    // Right-hand side: previous interior values plus fixed boundary neighbours.
    let mut b = vec![0.0; m * m];
    for j in 1..n - 1 {
        for i in 1..n - 1 {
            let mut rhs = state.grid[j * n + i];
            for (ni, nj) in [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)] {
                if let Some(v) = p.edge_value(ni, nj) {
                    rhs += r * v;
                }
            }
            b[idx(i, j)] = rhs;
        }
    }

    let apply = |x: &[f64], out: &mut [f64]| {
        for j in 0..m {
            for i in 0..m {
                let k = j * m + i;
                let mut s = 0.0;
                if i > 0 {
                    s += x[k - 1];
                }
                if i + 1 < m {
                    s += x[k + 1];
                }
                if j > 0 {
                    s += x[k - m];
                }
                if j + 1 < m {
                    s += x[k + m];
                }
                out[k] = (1.0 + 4.0 * r) * x[k] - r * s;
            }
        }
    };

    // Warm start from the previous step.
    let mut x: Vec<f64> = (1..n - 1)
        .flat_map(|j| (1..n - 1).map(move |i| (i, j)))
        .map(|(i, j)| state.grid[j * n + i])
        .collect();
    conjugate_gradient(apply, &b, &mut x, 10 * n * n)?;

    let mut grid = state.grid.clone();
    for j in 1..n - 1 {
        for i in 1..n - 1 {
            grid[j * n + i] = x[idx(i, j)];
        }
    }
    Ok(HeatState {
        grid,
        t_index: state.t_index + 1,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `A x = b` for symmetric positive definite `A` given as an operator.
///
/// Stops once the residual norm is below `CG_RTOL · min(‖r₀‖, ‖b‖)`, or below
/// the round-off floor `1e-15 · ‖b‖ · √len`.
pub fn conjugate_gradient<F>(
    apply: F,
    b: &[f64],
    x: &mut [f64],
    max_iter: usize,
) -> Result<usize, SolverError>
where
    F: Fn(&[f64], &mut [f64]),
{
    let len = b.len();
    let mut ax = vec![0.0; len];
    apply(x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let b_norm = dot(b, b).sqrt();
    let r0_norm = dot(&r, &r).sqrt();
    let floor = 1e-15 * b_norm * (len as f64).sqrt();
    let tol = (CG_RTOL * r0_norm.min(b_norm)).max(floor);
    let mut rr = r0_norm * r0_norm;
    if rr.sqrt() <= tol {
        return Ok(0);
    }
    let mut p = r.clone();
    let mut ap = vec![0.0; len];
    for it in 1..=max_iter {
        apply(&p, &mut ap);
        let alpha = rr / dot(&p, &ap);
        for k in 0..len {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        let rr_new = dot(&r, &r);
        if !rr_new.is_finite() {
            return Err(SolverError::Divergence { step: 0 });
        }
        if rr_new.sqrt() <= tol {
            return Ok(it);
        }
        let beta = rr_new / rr;
        for k in 0..len {
            p[k] = r[k] + beta * p[k];
        }
        rr = rr_new;
    }
    Err(SolverError::CgNotConverged {
        iterations: max_iter,
        residual: rr.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(temps: [f64; 5], n: usize) -> HeatParams {
        HeatParams {
            t_ic: temps[0],
            t_x1: temps[1],
            t_x2: temps[2],
            t_y1: temps[3],
            t_y2: temps[4],
            alpha: 1.0,
            n,
            dt: 0.01,
            t_total: 1.0,
            length: 1.0,
        }
    }

    #[test]
    fn uniform_field_is_fixed_point() {
        let p = params([321.5; 5], 12);
        let mut s = p.initial_state();
        for _ in 0..20 {
            s = heat_step(&s, &p).unwrap();
            for v in &s.grid {
                assert!((v - 321.5).abs() <= 1e-10 * 321.5, "{v}");
            }
        }
        assert_eq!(s.t_index, 20);
    }

    #[test]
    fn boundary_rows_are_exact() {
        let p = params([300.0, 100.0, 200.0, 400.0, 500.0], 8);
        let s = heat_step(&p.initial_state(), &p).unwrap();
        let n = p.n;
        for j in 0..n {
            assert_eq!(s.grid[j * n], 100.0);
            assert_eq!(s.grid[j * n + n - 1], 200.0);
        }
        for i in 1..n - 1 {
            assert_eq!(s.grid[i], 400.0);
            assert_eq!(s.grid[(n - 1) * n + i], 500.0);
        }
    }

    #[test]
    fn cg_solves_small_spd_system() {
        // [[4,1],[1,3]] x = [1,2] → x = [1/11, 7/11]
        let apply = |x: &[f64], out: &mut [f64]| {
            out[0] = 4.0 * x[0] + x[1];
            out[1] = x[0] + 3.0 * x[1];
        };
        let mut x = vec![0.0, 0.0];
        let iters = conjugate_gradient(apply, &[1.0, 2.0], &mut x, 10).unwrap();
        assert!(iters <= 2);
        assert!((x[0] - 1.0 / 11.0).abs() < 1e-12);
        assert!((x[1] - 7.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_invalid() {
        assert!(params([1.0; 5], 2).validate().is_err());
        let mut p = params([1.0; 5], 4);
        p.dt = 0.0;
        assert!(p.validate().is_err());
    }
}
