//! Finite-difference solver for the exploratory HJB equation with
//! drift-only control:
//!
//! ```text
//! v_t + (1/2) sigma^2 v_xx + gamma log ∫_A exp((b v_x + r) / gamma) da - beta v = 0,
//! v(T, x) = h(x).
//! ```
//!
//! Backward time stepping treats diffusion implicitly and the Gibbs
//! log-integral explicitly. The second derivative is pinned to zero at both
//! ends of the x grid (linear extrapolation).

use serde::Serialize;

use super::ValueSurface;
use crate::error::{Error, Result};
use crate::model::ProblemSpec;

/// Uniform x grid plus the number of time steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HjbGrid {
    pub t_steps: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub x_steps: usize,
}

impl HjbGrid {
    pub fn x_grid(&self) -> Vec<f64> {
        let dx = (self.x_max - self.x_min) / self.x_steps as f64;
        (0..=self.x_steps)
            .map(|j| if j == self.x_steps { self.x_max } else { self.x_min + j as f64 * dx })
            .collect()
    }

    pub fn check(&self, spec: &ProblemSpec) -> Result<()> {
        if !(self.x_min < self.x_max) {
            return Err(Error::invalid("hjb grid needs x_min < x_max"));
        }
        hjb_check(spec, self.t_steps, &self.x_grid()).map(|_| ())
    }

    pub fn solve(&self, spec: &ProblemSpec) -> Result<ValueSurface> {
        self.check(spec)?;
        hjb_solve(spec, self.t_steps, &self.x_grid())
    }
}

/// `gamma log ∫_A exp(g(a) / gamma) da` by the action trapezoid rule.
fn soft_max(spec: &ProblemSpec, g: impl Fn(f64) -> f64, buf: &mut Vec<f64>) -> Result<f64> {
    let space = spec.action_space();
    let gamma = spec.temperature();
    buf.clear();
    buf.extend(space.nodes().map(|a| g(a) / gamma));
    let shift = buf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return Err(Error::Evaluation("non-finite Hamiltonian in the HJB solver".into()));
    }
    let n = buf.len();
    let inner: f64 = buf[1..n - 1].iter().map(|w| (w - shift).exp()).sum();
    let ends = 0.5 * ((buf[0] - shift).exp() + (buf[n - 1] - shift).exp());
    Ok(gamma * (shift + (space.spacing() * (inner + ends)).ln()))
}

/// Largest `|b|` over the grid nodes and action nodes at a few times.
fn drift_bound(spec: &ProblemSpec, xs: &[f64]) -> f64 {
    let horizon = spec.horizon();
    let space = spec.action_space();
    let mut bound = 0.0f64;
    for t in [0.0, 0.5 * horizon, horizon] {
        for &x in xs {
            for a in space.nodes() {
                bound = bound.max(spec.drift(t, x, a).abs());
            }
        }
    }
    bound
}

/// Checks the grid shape and the explicit-step stability limit without
/// solving. Returns the x spacing.
pub fn hjb_check(spec: &ProblemSpec, t_steps: usize, x_grid: &[f64]) -> Result<f64> {
    if t_steps == 0 {
        return Err(Error::invalid("t_steps must be positive"));
    }
    let nx = x_grid.len();
    if nx < 5 {
        return Err(Error::invalid("hjb solver needs at least 5 x nodes"));
    }
    let dx = (x_grid[nx - 1] - x_grid[0]) / (nx - 1) as f64;
    if !(dx > 0.0)
        || x_grid.windows(2).any(|w| ((w[1] - w[0]) - dx).abs() > 1e-9 * dx.max(1.0))
    {
        return Err(Error::invalid("hjb solver needs a uniform, increasing x grid"));
    }

    let horizon = spec.horizon();
    let dt = horizon / t_steps as f64;
    // Explicit treatment of the Hamiltonian: its sensitivity to v_x is the
    // policy-averaged drift, bounded by b_max.
    let b_max = drift_bound(spec, x_grid);
    let sigma_min = x_grid
        .iter()
        .flat_map(|&x| [0.0, horizon].map(|t| spec.diffusion(t, x).abs()))
        .fold(f64::INFINITY, f64::min);
    let mut max_dt = f64::INFINITY;
    if b_max > 0.0 {
        max_dt = max_dt.min(dx / b_max);
        if sigma_min > 0.0 {
            max_dt = max_dt.min(sigma_min * sigma_min / (b_max * b_max));
        }
    }
    if dt > max_dt {
        let required = (horizon / max_dt).ceil() as usize;
        return Err(Error::Config(format!(
            "time step {dt} violates the stability limit {max_dt}; use at least {required} t_steps"
        )));
    }
    Ok(dx)
}

/// Solves for the optimal exploratory value on `[0, T] x x_grid`.
///
/// The returned surface has `t_steps + 1` rows, `t_k = k T / t_steps`.
pub fn hjb_solve(spec: &ProblemSpec, t_steps: usize, x_grid: &[f64]) -> Result<ValueSurface> {
    let dx = hjb_check(spec, t_steps, x_grid)?;
    let nx = x_grid.len();
    let horizon = spec.horizon();
    let dt = horizon / t_steps as f64;
    let beta = spec.discount();

    let mut v: Vec<f64> = x_grid.iter().map(|&x| spec.terminal_reward(x)).collect();
    let mut rows = vec![v.clone()];
    let mut rhs = vec![0.0; nx];
    let mut buf = Vec::with_capacity(spec.action_space().quadrature_points());
    // Thomas-algorithm scratch for unknowns 1..=nx-2
    let mut c_prime = vec![0.0; nx];
    let mut d_prime = vec![0.0; nx];

    for k in (0..t_steps).rev() {
        let t_next = (k + 1) as f64 * dt;
        let t_now = k as f64 * dt;
        for j in 1..nx - 1 {
            let x = x_grid[j];
            let p = (v[j + 1] - v[j - 1]) / (2.0 * dx);
            let h = soft_max(spec, |a| spec.drift(t_next, x, a) * p + spec.running_reward(t_next, x, a), &mut buf)?;
            rhs[j] = v[j] + dt * (h - beta * v[j]);
        }

        // Rows 1 and nx-2 carry zero curvature under the boundary condition,
        // so they are explicit; rows 2..=nx-3 form a tridiagonal system.
        let mut next = vec![0.0; nx];
        next[1] = rhs[1];
        next[nx - 2] = rhs[nx - 2];
        let (lo, hi) = (2, nx - 3);
        if lo <= hi {
            let coef = |j: usize| {
                let s = spec.diffusion(t_now, x_grid[j]);
                0.5 * s * s * dt / (dx * dx)
            };
            for j in lo..=hi {
                let c = coef(j);
                let (a_j, b_j, c_j) = (-c, 1.0 + 2.0 * c, -c);
                let mut d_j = rhs[j];
                if j == lo {
                    d_j -= a_j * next[1];
                }
                if j == hi {
                    d_j -= c_j * next[nx - 2];
                }
                if j == lo {
                    c_prime[j] = c_j / b_j;
                    d_prime[j] = d_j / b_j;
                } else {
                    let m = b_j - a_j * c_prime[j - 1];
                    c_prime[j] = c_j / m;
                    d_prime[j] = (d_j - a_j * d_prime[j - 1]) / m;
                }
            }
            next[hi] = d_prime[hi];
            for j in (lo..hi).rev() {
                next[j] = d_prime[j] - c_prime[j] * next[j + 1];
            }
        }
        next[0] = 2.0 * next[1] - next[2];
        next[nx - 1] = 2.0 * next[nx - 2] - next[nx - 3];
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::Evaluation(format!("hjb solution became non-finite at t = {t_now}")));
        }
        v = next;
        rows.push(v.clone());
    }

    rows.reverse();
    let t_grid: Vec<f64> =
        (0..=t_steps).map(|k| if k == t_steps { horizon } else { k as f64 * dt }).collect();
    ValueSurface::new(t_grid, x_grid.to_vec(), rows.concat())
}
