//! Model-based exploratory policy improvement.
//!
//! Each iteration evaluates the current policy on a `(t, x)` grid, takes the
//! x-gradient of the fitted value, and moves to the Gibbs policy
//! `pi^{n+1} ∝ exp((b ∂_x J^n + r) / gamma)`. Gaps are measured at a single
//! probe point against the HJB oracle.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fit::fit_line;
use crate::model::ProblemSpec;
use crate::policy::{tv_distance, GibbsPolicy};
use crate::rng;
use crate::value::{
    fit_surface, gibbs_policy_from_surface_with, mc_evaluate, EdgeRule, Estimate, HjbGrid,
};

/// Monte Carlo and grid settings for policy iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PiConfig {
    pub t_grid: Vec<f64>,
    pub x_grid: Vec<f64>,
    /// Paths per surface node.
    pub surface_paths: usize,
    /// Paths for the value at the probe.
    pub probe_paths: usize,
    /// Step for the probe evaluation.
    pub dt: f64,
    /// Step for surface fits; gaps are second order in surface errors, so
    /// this can be coarser than `dt`.
    pub surface_dt: f64,
    #[serde(skip)]
    pub edge: EdgeRule,
    pub hjb: HjbGrid,
}

impl PiConfig {
    /// Uniform grids `t ∈ [0, T]` with `t_points` nodes and `x ∈ [x_min, x_max]`
    /// with `x_points` nodes; policies clamp x to the surface.
    #[allow(clippy::too_many_arguments)]
    pub fn uniform(
        horizon: f64,
        t_points: usize,
        (x_min, x_max): (f64, f64),
        x_points: usize,
        surface_paths: usize,
        probe_paths: usize,
        dt: f64,
        hjb: HjbGrid,
    ) -> Result<Self> {
        if t_points < 2 || x_points < 2 {
            return Err(Error::invalid("policy iteration grids need at least two points per axis"));
        }
        let lin = |lo: f64, hi: f64, n: usize| {
            (0..n)
                .map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
                .collect::<Vec<_>>()
        };
        Ok(PiConfig {
            t_grid: lin(0.0, horizon, t_points),
            x_grid: lin(x_min, x_max, x_points),
            surface_paths,
            probe_paths,
            dt,
            surface_dt: dt,
            edge: EdgeRule::ClampX,
            hjb,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PiRecord {
    pub n: usize,
    /// `J^n(t0, x0)`.
    pub value: Estimate,
    /// `|J*(t0, x0) - J^n(t0, x0)|`.
    pub gap: f64,
    pub tv_to_optimal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PiTrace {
    pub probe: (f64, f64),
    pub optimal_value: f64,
    pub records: Vec<PiRecord>,
}

impl PiTrace {
    pub fn gaps(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.gap).collect()
    }

    /// CSV `n,J_n,stderr,gap,tv_to_opt`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        use crate::io::fmt_f64;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["n", "J_n", "stderr", "gap", "tv_to_opt"])?;
        for r in &self.records {
            w.write_record([
                r.n.to_string(),
                fmt_f64(r.value.value),
                fmt_f64(r.value.stderr),
                fmt_f64(r.gap),
                fmt_f64(r.tv_to_optimal),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One improvement: fit `J` for `current` on the configured grid, then
/// return the Gibbs policy built from its gradient.
pub fn improvement_step(
    spec: &ProblemSpec,
    current: &GibbsPolicy,
    config: &PiConfig,
    seed: u64,
) -> Result<GibbsPolicy> {
    let surface = fit_surface(
        spec,
        current,
        &config.t_grid,
        &config.x_grid,
        config.surface_paths,
        config.surface_dt,
        seed,
    )?;
    gibbs_policy_from_surface_with(spec, &surface, config.edge)
}

/// Runs `n_iters` evaluations interleaved with `n_iters - 1` improvements.
///
/// Iteration `n` uses fresh streams derived from `(base_seed, n)`, so no
/// Monte Carlo samples are shared between iterations.
pub fn run_pi(
    spec: &ProblemSpec,
    initial: &GibbsPolicy,
    n_iters: usize,
    probe: (f64, f64),
    config: &PiConfig,
    base_seed: u64,
) -> Result<PiTrace> {
    if n_iters == 0 {
        return Err(Error::invalid("policy iteration needs at least one iteration"));
    }
    let (t0, x0) = probe;
    let oracle = config.hjb.solve(spec)?;
    let optimal_value = oracle.value(t0, x0)?;
    let optimal_policy = gibbs_policy_from_surface_with(spec, &oracle, EdgeRule::ClampX)?;

    let mut policy = initial.clone();
    let mut records = Vec::with_capacity(n_iters);
    for n in 1..=n_iters {
        let eval_seed = rng::derive_seed(base_seed, &[n as u64, 0]);
        let value = mc_evaluate(spec, &policy, t0, x0, config.probe_paths, config.dt, eval_seed)?;
        records.push(PiRecord {
            n,
            value,
            gap: (optimal_value - value.value).abs(),
            tv_to_optimal: tv_distance(&policy, &optimal_policy, t0, x0)?,
        });
        if n < n_iters {
            let surface_seed = rng::derive_seed(base_seed, &[n as u64, 1]);
            policy = improvement_step(spec, &policy, config, surface_seed)?;
        }
    }
    Ok(PiTrace { probe, optimal_value, records })
}

/// Geometric-rate fit of a gap sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContractionFit {
    /// Fitted per-iteration factor of the squared gap.
    pub eta_hat: f64,
    pub r_squared: f64,
    pub used_points: usize,
    pub contractive: bool,
}

/// Least squares of `log(gap_n^2)` on `n`; `eta_hat = exp(slope)`.
///
/// Gaps not exceeding three standard errors of their value estimate are
/// treated as noise and dropped.
pub fn fit_contraction(trace: &PiTrace) -> Result<ContractionFit> {
    let (ns, logs): (Vec<f64>, Vec<f64>) = trace
        .records
        .iter()
        .filter(|r| r.gap > 0.0 && r.gap > 3.0 * r.value.stderr)
        .map(|r| (r.n as f64, (r.gap * r.gap).ln()))
        .unzip();
    if ns.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "contraction fit needs 4 gaps above the noise floor, got {}",
            ns.len()
        )));
    }
    let line = fit_line(&ns, &logs)?;
    let eta_hat = line.slope.exp();
    Ok(ContractionFit {
        eta_hat,
        r_squared: line.r_squared,
        used_points: ns.len(),
        contractive: eta_hat < 1.0,
    })
}
