//! Policy evaluation, tabulated value surfaces and the exploratory HJB
//! oracle.

mod hjb;

pub use hjb::{hjb_check, hjb_solve, HjbGrid};

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ProblemSpec;
use crate::policy::{ActionExponent, GibbsPolicy};
use crate::rng;
use crate::sim::{rollout_from, step_count};

const TIME_TOLERANCE: f64 = 1e-12;

/// Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub sample_count: usize,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate { value, stderr: 0.0, sample_count: 1 }
    }

    /// Sample mean and `sd / sqrt(n)`, summing in index order.
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        let n = samples.len();
        if n == 0 {
            return Err(Error::InsufficientData("no samples".into()));
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Ok(Estimate { value: mean, stderr, sample_count: n })
    }

    /// Whether `target` lies within `k` standard errors.
    pub fn covers(&self, target: f64, k: f64) -> bool {
        (self.value - target).abs() <= k * self.stderr
    }
}

fn evaluate(
    spec: &ProblemSpec,
    policy: &GibbsPolicy,
    t: f64,
    x: f64,
    n_paths: usize,
    dt: f64,
    base_seed: u64,
    entropy_bonus: bool,
) -> Result<Estimate> {
    if n_paths == 0 {
        return Err(Error::invalid("need at least one path"));
    }
    if !(-TIME_TOLERANCE..=spec.horizon() + TIME_TOLERANCE).contains(&t) {
        return Err(Error::invalid(format!("time {t} outside [0, {}]", spec.horizon())));
    }
    if step_count(t, spec.horizon(), dt)? == 0 {
        return Ok(Estimate::exact(spec.terminal_reward(x)));
    }
    let beta = spec.discount();
    let gamma = spec.temperature();
    let returns = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let traj = rollout_from(spec, policy, t, x, dt, &mut rng::stream(base_seed, &[i]))?;
            let mut total = 0.0;
            for k in 0..traj.steps() {
                let mut flow = traj.rewards[k];
                if entropy_bonus {
                    flow -= gamma * traj.log_densities[k];
                }
                total += (-beta * (traj.times[k] - t)).exp() * flow * dt;
            }
            Ok(total + (-beta * (spec.horizon() - t)).exp() * traj.terminal_value)
        })
        .collect::<Result<Vec<f64>>>()?;
    Estimate::from_samples(&returns)
}

/// Entropy-regularized value `J(t, x; pi)` by Monte Carlo:
/// `E[sum_k e^{-beta(t_k - t)} (r_k - gamma log pi(a_k)) dt + e^{-beta(T - t)} h(X_N)]`.
pub fn mc_evaluate(
    spec: &ProblemSpec,
    policy: &GibbsPolicy,
    t: f64,
    x: f64,
    n_paths: usize,
    dt: f64,
    base_seed: u64,
) -> Result<Estimate> {
    evaluate(spec, policy, t, x, n_paths, dt, base_seed, true)
}

/// Value of `pi` for the original (unregularized) objective.
pub fn mc_evaluate_original(
    spec: &ProblemSpec,
    policy: &GibbsPolicy,
    t: f64,
    x: f64,
    n_paths: usize,
    dt: f64,
    base_seed: u64,
) -> Result<Estimate> {
    evaluate(spec, policy, t, x, n_paths, dt, base_seed, false)
}

/// Value function tabulated on a rectangular `(t, x)` grid, bilinear in
/// between.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSurface {
    t_grid: Vec<f64>,
    x_grid: Vec<f64>,
    /// Row-major, one row per time.
    values: Vec<f64>,
}

fn check_increasing(name: &str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid(format!("{name} grid is empty")));
    }
    if grid.iter().any(|v| !v.is_finite()) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(format!("{name} grid must be finite and strictly increasing")));
    }
    Ok(())
}

/// Cell index and weight of `v` in `grid`, or `None` outside.
fn locate(grid: &[f64], v: f64) -> Option<(usize, f64)> {
    let (first, last) = (grid[0], grid[grid.len() - 1]);
    if !(v >= first - TIME_TOLERANCE && v <= last + TIME_TOLERANCE) {
        return None;
    }
    if grid.len() == 1 {
        return Some((0, 0.0));
    }
    let i = grid.partition_point(|&g| g <= v).clamp(1, grid.len() - 1) - 1;
    let w = ((v - grid[i]) / (grid[i + 1] - grid[i])).clamp(0.0, 1.0);
    Some((i, w))
}

impl ValueSurface {
    pub fn new(t_grid: Vec<f64>, x_grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        check_increasing("t", &t_grid)?;
        check_increasing("x", &x_grid)?;
        if values.len() != t_grid.len() * x_grid.len() {
            return Err(Error::invalid("surface values do not match the grid shape"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Evaluation("surface has non-finite values".into()));
        }
        Ok(ValueSurface { t_grid, x_grid, values })
    }

    /// Tabulates `f` on the grid.
    pub fn from_fn(t_grid: Vec<f64>, x_grid: Vec<f64>, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let values = t_grid
            .iter()
            .flat_map(|&t| x_grid.iter().map(move |&x| (t, x)))
            .map(|(t, x)| f(t, x))
            .collect();
        Self::new(t_grid, x_grid, values)
    }

    pub fn t_grid(&self) -> &[f64] {
        &self.t_grid
    }

    pub fn x_grid(&self) -> &[f64] {
        &self.x_grid
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.x_grid.len() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.x_grid.len();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn contains(&self, t: f64, x: f64) -> bool {
        locate(&self.t_grid, t).is_some() && locate(&self.x_grid, x).is_some()
    }

    /// Clamps `x` into the grid's x-range.
    pub fn clamp_x(&self, x: f64) -> f64 {
        x.clamp(self.x_grid[0], self.x_grid[self.x_grid.len() - 1])
    }

    fn time_row(&self, t: f64, x: f64) -> Result<impl Fn(usize) -> f64 + '_> {
        let (i, w) = locate(&self.t_grid, t).ok_or(Error::OutOfDomain { t, x })?;
        let next = (i + 1).min(self.t_grid.len() - 1);
        Ok(move |j| (1.0 - w) * self.at(i, j) + w * self.at(next, j))
    }

    /// Bilinear interpolation.
    pub fn value(&self, t: f64, x: f64) -> Result<f64> {
        let row = self.time_row(t, x)?;
        let (j, w) = locate(&self.x_grid, x).ok_or(Error::OutOfDomain { t, x })?;
        let next = (j + 1).min(self.x_grid.len() - 1);
        Ok((1.0 - w) * row(j) + w * row(next))
    }

    /// `∂v/∂x` at `(t, x)`: time-interpolated row, node-centered central
    /// differences (one-sided at the two ends), linear in x between nodes.
    pub fn gradient(&self, t: f64, x: f64) -> Result<f64> {
        let n = self.x_grid.len();
        if n < 2 {
            return Err(Error::invalid("gradient needs at least two x nodes"));
        }
        let row = self.time_row(t, x)?;
        let (j, w) = locate(&self.x_grid, x).ok_or(Error::OutOfDomain { t, x })?;
        let xs = &self.x_grid;
        let node_gradient = |k: usize| {
            let (lo, hi) = (k.saturating_sub(1), (k + 1).min(n - 1));
            (row(hi) - row(lo)) / (xs[hi] - xs[lo])
        };
        let g0 = node_gradient(j);
        Ok(if w == 0.0 { g0 } else { (1.0 - w) * g0 + w * node_gradient(j + 1) })
    }

    /// Long-format CSV `t,x,v`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "x", "v"])?;
        for (i, &t) in self.t_grid.iter().enumerate() {
            for (j, &x) in self.x_grid.iter().enumerate() {
                w.write_record([
                    crate::io::fmt_f64(t),
                    crate::io::fmt_f64(x),
                    crate::io::fmt_f64(self.at(i, j)),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Tabulates [`mc_evaluate`] on `t_grid x x_grid`.
///
/// All nodes of one time row share the row's random streams (common random
/// numbers), which keeps finite differences in x from amplifying Monte
/// Carlo noise. Rows at the horizon hold `h` exactly.
pub fn fit_surface(
    spec: &ProblemSpec,
    policy: &GibbsPolicy,
    t_grid: &[f64],
    x_grid: &[f64],
    n_paths: usize,
    dt: f64,
    base_seed: u64,
) -> Result<ValueSurface> {
    check_increasing("t", t_grid)?;
    check_increasing("x", x_grid)?;
    let horizon = spec.horizon();
    if t_grid[0] < -TIME_TOLERANCE || t_grid[t_grid.len() - 1] > horizon + TIME_TOLERANCE {
        return Err(Error::invalid(format!("t grid must lie in [0, {horizon}]")));
    }
    let nodes: Vec<(usize, f64, f64)> = t_grid
        .iter()
        .enumerate()
        .flat_map(|(i, &t)| x_grid.iter().map(move |&x| (i, t, x)))
        .collect();
    let values = nodes
        .par_iter()
        .map(|&(i, t, x)| {
            if (horizon - t).abs() <= TIME_TOLERANCE {
                Ok(spec.terminal_reward(x))
            } else {
                let seed = rng::derive_seed(base_seed, &[i as u64]);
                mc_evaluate(spec, policy, t, x, n_paths, dt, seed).map(|e| e.value)
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    ValueSurface::new(t_grid.to_vec(), x_grid.to_vec(), values)
}

/// What a surface-derived policy does at states outside the surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EdgeRule {
    /// Report [`Error::OutOfDomain`].
    #[default]
    Strict,
    /// Use the gradient at the nearest x inside the grid.
    ClampX,
}

/// Gibbs policy with exponent `b(t, x, a) ∂_x v(t, x) + r(t, x, a)`.
pub fn gibbs_policy_from_surface(spec: &ProblemSpec, surface: &ValueSurface) -> Result<GibbsPolicy> {
    gibbs_policy_from_surface_with(spec, surface, EdgeRule::Strict)
}

pub fn gibbs_policy_from_surface_with(
    spec: &ProblemSpec,
    surface: &ValueSurface,
    edge: EdgeRule,
) -> Result<GibbsPolicy> {
    let surface = std::sync::Arc::new(surface.clone());
    let problem = spec.clone();
    GibbsPolicy::staged(
        move |t, x| {
            let probe_x = match edge {
                EdgeRule::Strict => x,
                EdgeRule::ClampX => surface.clamp_x(x),
            };
            let p = surface.gradient(t, probe_x)?;
            let problem = problem.clone();
            Ok(Box::new(move |a| problem.drift(t, x, a) * p + problem.running_reward(t, x, a))
                as ActionExponent)
        },
        spec.temperature(),
        spec.action_space(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{linear_example, ActionSpace};
    use crate::policy::tv_distance;
    use std::f64::consts::E;

    fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn estimate_from_samples() {
        let e = Estimate::from_samples(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(e.value, 2.5);
        assert!((e.stderr - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(e.sample_count, 4);
        assert!(Estimate::from_samples(&[]).is_err());
    }

    #[test]
    fn uniform_policy_value_on_linear_example() {
        let spec = linear_example(1.0, 1.0).unwrap();
        let pi = GibbsPolicy::uniform(spec.action_space());
        let e = mc_evaluate(&spec, &pi, 0.0, 0.0, 10_000, 0.01, 5).unwrap();
        assert!(e.covers(0.5, 3.0), "{e:?}");
        let o = mc_evaluate_original(&spec, &pi, 0.0, 0.0, 10_000, 0.01, 5).unwrap();
        assert!(o.covers(0.5, 3.0), "{o:?}");
    }

    #[test]
    fn tilted_policy_value_is_its_entropy() {
        let spec = linear_example(0.0, 1.0).unwrap();
        let pi = GibbsPolicy::state_independent(|a| a, 1.0, spec.action_space()).unwrap();
        let ent = pi.stats(0.0, 0.0).unwrap().entropy;
        let e = mc_evaluate(&spec, &pi, 0.0, 0.0, 10_000, 0.01, 6).unwrap();
        assert!(e.covers(ent, 3.0), "{e:?} vs {ent}");
        let o = mc_evaluate_original(&spec, &pi, 0.0, 0.0, 10_000, 0.01, 6).unwrap();
        assert!(o.covers(0.0, 3.0), "{o:?}");
    }

    #[test]
    fn evaluation_at_horizon_is_exact() {
        let spec = linear_example(1.0, 1.0).unwrap();
        let pi = GibbsPolicy::uniform(spec.action_space());
        let e = mc_evaluate(&spec, &pi, 1.0, 2.5, 100, 0.01, 0).unwrap();
        assert_eq!((e.value, e.stderr), (2.5, 0.0));
        let o = mc_evaluate_original(&spec, &pi, 1.0, -1.0, 100, 0.01, 0).unwrap();
        assert_eq!((o.value, o.stderr), (-1.0, 0.0));
        assert!(mc_evaluate(&spec, &pi, 1.5, 0.0, 10, 0.01, 0).is_err());
    }

    #[test]
    fn surface_interpolation_and_gradient() {
        let linear = ValueSurface::from_fn(grid(0.0, 1.0, 5), grid(-1.0, 1.0, 21), |_, x| x).unwrap();
        for &(t, x) in &[(0.0, 0.0), (0.33, 0.517), (1.0, -1.0), (0.5, 1.0)] {
            assert!((linear.gradient(t, x).unwrap() - 1.0).abs() < 1e-10);
            assert!((linear.value(t, x).unwrap() - x).abs() < 1e-12);
        }

        let square = ValueSurface::from_fn(vec![0.0, 1.0], grid(0.0, 2.0, 201), |_, x| x * x).unwrap();
        assert!((square.gradient(0.5, 1.0).unwrap() - 2.0).abs() < 1e-3);

        let flat = ValueSurface::from_fn(vec![0.0, 1.0], grid(0.0, 1.0, 5), |_, _| 3.0).unwrap();
        assert_eq!(flat.gradient(0.2, 0.7).unwrap(), 0.0);

        assert!(matches!(linear.gradient(0.5, 1.5), Err(Error::OutOfDomain { .. })));
        assert!(matches!(linear.value(-0.5, 0.0), Err(Error::OutOfDomain { .. })));
    }

    #[test]
    fn fitted_surface_terminal_row_is_exact() {
        let spec = linear_example(1.0, 1.0).unwrap();
        let pi = GibbsPolicy::uniform(spec.action_space());
        let single = fit_surface(&spec, &pi, &[1.0], &[0.7], 10, 0.1, 1).unwrap();
        assert_eq!(single.at(0, 0), 0.7);

        let ts = grid(0.0, 1.0, 3);
        let xs = grid(-1.0, 1.0, 5);
        let s = fit_surface(&spec, &pi, &ts, &xs, 4000, 0.05, 2).unwrap();
        assert_eq!(s, fit_surface(&spec, &pi, &ts, &xs, 4000, 0.05, 2).unwrap());
        for (j, &x) in xs.iter().enumerate() {
            assert_eq!(s.at(2, j), x);
        }
        // common random numbers make the x-slope exact for this fixture
        for &t in &[0.0, 0.3, 0.5] {
            assert!((s.gradient(t, 0.2).unwrap() - 1.0).abs() < 1e-9);
        }
        let stderr = (1.0f64 / 4000.0).sqrt();
        for (i, &t) in ts.iter().enumerate() {
            for (j, &x) in xs.iter().enumerate() {
                assert!((s.at(i, j) - (x + 0.5 * (1.0 - t))).abs() < 3.5 * stderr);
            }
        }
    }

    #[test]
    fn policy_from_affine_surface_is_optimal_tilt() {
        let spec = linear_example(1.0, 1.0).unwrap();
        let surface = ValueSurface::from_fn(grid(0.0, 1.0, 3), grid(-2.0, 2.0, 9), |t, x| x + 0.3 * (1.0 - t)).unwrap();
        let pi = gibbs_policy_from_surface(&spec, &surface).unwrap();
        let target = GibbsPolicy::state_independent(|a| a, 1.0, spec.action_space()).unwrap();
        assert!(tv_distance(&pi, &target, 0.5, 0.1).unwrap() < 1e-12);
        assert!((pi.density(0.0, 0.0, 0.0).unwrap() - 1.0 / (E - 1.0)).abs() < 1e-6);
        assert!(matches!(pi.density(0.0, 3.0, 0.5), Err(Error::OutOfDomain { .. })));

        let clamped = gibbs_policy_from_surface_with(&spec, &surface, EdgeRule::ClampX).unwrap();
        assert!(clamped.density(0.0, 3.0, 0.5).is_ok());

        let flat = linear_example(0.0, 1.0).unwrap();
        let uni = gibbs_policy_from_surface(&flat, &surface).unwrap();
        assert!(tv_distance(&uni, &GibbsPolicy::uniform(flat.action_space()), 0.2, 0.0).unwrap() < 1e-15);
    }

    #[test]
    fn doubling_temperature_halves_tilt() {
        let space = ActionSpace::new(0.0, 1.0).unwrap();
        let surface = ValueSurface::from_fn(vec![0.0, 1.0], grid(-1.0, 1.0, 3), |_, x| x).unwrap();
        let hot = linear_example(1.0, 1.0).unwrap().with_temperature(2.0).unwrap();
        let pi = gibbs_policy_from_surface(&hot, &surface).unwrap();
        let half = GibbsPolicy::new(|_, _, a| a / 2.0, 1.0, space).unwrap();
        assert!(tv_distance(&pi, &half, 0.0, 0.0).unwrap() < 1e-14);
    }
}
