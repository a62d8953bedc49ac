//! Martingale-loss q-learning.
//!
//! For a trajectory on a uniform grid, the discretized martingale residual is
//!
//! ```text
//! G_k = e^{-beta(T - t_k)} h(X_N) - J(t_k, X_k)
//!       + sum_{j >= k} e^{-beta(t_j - t_k)} (r_j - q(t_j, X_j, a_j)) dt
//! ```
//!
//! and the stochastic-gradient increments are
//!
//! ```text
//! theta: sum_k dt  ∂_theta J(t_k, X_k) G_k
//! phi:   sum_k dt  [sum_{j >= k} e^{-beta(t_j - t_k)} ∂_phi q(t_j, X_j, a_j) dt] G_k
//! ```
//!
//! Semi-q-learning replaces `J^theta` with an oracle for the value of the
//! current policy; full q-learning learns both parameter vectors from the
//! same residuals.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{log_unit_tilt_partition, ActionSpace, ProblemSpec};
use crate::policy::GibbsPolicy;
use crate::rng::{self, Stream};
use crate::sim::{rollout, rollout_batch, Trajectory};
use crate::value::Estimate;

/// Step for central finite-difference parameter gradients.
pub const FD_STEP: f64 = 1e-5;

/// Parameters are clamped to `[-PARAM_CLAMP, PARAM_CLAMP]` after each update.
pub const PARAM_CLAMP: f64 = 50.0;

pub type ValueFn = Arc<dyn Fn(&[f64], f64, f64) -> f64 + Send + Sync>;
pub type QFn = Arc<dyn Fn(&[f64], f64, f64, f64) -> f64 + Send + Sync>;
/// Writes `∂J^theta/∂theta (t, x)` into the output slice.
pub type ValueGradFn = Arc<dyn Fn(&[f64], f64, f64, &mut [f64]) + Send + Sync>;
/// Writes `∂q^phi/∂phi (t, x, a)` into the output slice.
pub type QGradFn = Arc<dyn Fn(&[f64], f64, f64, f64, &mut [f64]) + Send + Sync>;
/// Value of the policy `pi^phi`, `(phi, t, x) -> J(t, x; pi^phi)`.
pub type ValueOracle = Arc<dyn Fn(&[f64], f64, f64) -> f64 + Send + Sync>;

/// Parametric pair `(J^theta, q^phi)` with optional analytic gradients.
#[derive(Clone)]
pub struct ParamFamily {
    theta_dim: usize,
    phi_dim: usize,
    value: ValueFn,
    q: QFn,
    value_grad: Option<ValueGradFn>,
    q_grad: Option<QGradFn>,
    q_state_free: bool,
}

impl fmt::Debug for ParamFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParamFamily")
            .field("theta_dim", &self.theta_dim)
            .field("phi_dim", &self.phi_dim)
            .field("analytic_value_grad", &self.value_grad.is_some())
            .field("analytic_q_grad", &self.q_grad.is_some())
            .field("q_state_free", &self.q_state_free)
            .finish()
    }
}

impl ParamFamily {
    pub fn new(
        theta_dim: usize,
        phi_dim: usize,
        value: impl Fn(&[f64], f64, f64) -> f64 + Send + Sync + 'static,
        q: impl Fn(&[f64], f64, f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        ParamFamily {
            theta_dim,
            phi_dim,
            value: Arc::new(value),
            q: Arc::new(q),
            value_grad: None,
            q_grad: None,
            q_state_free: false,
        }
    }

    pub fn with_value_gradient(
        mut self,
        grad: impl Fn(&[f64], f64, f64, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.value_grad = Some(Arc::new(grad));
        self
    }

    pub fn with_q_gradient(
        mut self,
        grad: impl Fn(&[f64], f64, f64, f64, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.q_grad = Some(Arc::new(grad));
        self
    }

    /// Declares that `q^phi` does not depend on `(t, x)`, which lets
    /// `pi^phi` tabulate its density once.
    pub fn with_state_free_q(mut self) -> Self {
        self.q_state_free = true;
        self
    }

    pub fn theta_dim(&self) -> usize {
        self.theta_dim
    }

    pub fn phi_dim(&self) -> usize {
        self.phi_dim
    }

    pub fn value(&self, theta: &[f64], t: f64, x: f64) -> f64 {
        (self.value)(theta, t, x)
    }

    pub fn q(&self, phi: &[f64], t: f64, x: f64, a: f64) -> f64 {
        (self.q)(phi, t, x, a)
    }

    pub fn value_gradient(&self, theta: &[f64], t: f64, x: f64, out: &mut [f64]) {
        match &self.value_grad {
            Some(g) => g(theta, t, x, out),
            None => self.fd_value_gradient(theta, t, x, out),
        }
    }

    pub fn q_gradient(&self, phi: &[f64], t: f64, x: f64, a: f64, out: &mut [f64]) {
        match &self.q_grad {
            Some(g) => g(phi, t, x, a, out),
            None => self.fd_q_gradient(phi, t, x, a, out),
        }
    }

    /// Central differences with step [`FD_STEP`].
    pub fn fd_value_gradient(&self, theta: &[f64], t: f64, x: f64, out: &mut [f64]) {
        central_difference(theta, out, |p| self.value(p, t, x));
    }

    pub fn fd_q_gradient(&self, phi: &[f64], t: f64, x: f64, a: f64, out: &mut [f64]) {
        central_difference(phi, out, |p| self.q(p, t, x, a));
    }

    /// `pi^phi ∝ exp(q^phi / gamma)`.
    pub fn policy(&self, phi: &[f64], gamma: f64, space: ActionSpace) -> Result<GibbsPolicy> {
        let phi = phi.to_vec();
        let q = Arc::clone(&self.q);
        if self.q_state_free {
            GibbsPolicy::state_independent(move |a| q(&phi, 0.0, 0.0, a), gamma, space)
        } else {
            GibbsPolicy::new(move |t, x, a| q(&phi, t, x, a), gamma, space)
        }
    }

    /// Largest relative disagreement between the analytic and
    /// finite-difference gradients over the probe points.
    pub fn gradient_mismatch(
        &self,
        theta: &[f64],
        phi: &[f64],
        probes: &[(f64, f64, f64)],
    ) -> f64 {
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);
        let mut worst = 0.0f64;
        let (mut ga, mut gf) = (vec![0.0; self.theta_dim], vec![0.0; self.theta_dim]);
        let (mut qa, mut qf) = (vec![0.0; self.phi_dim], vec![0.0; self.phi_dim]);
        for &(t, x, a) in probes {
            if self.value_grad.is_some() {
                self.value_gradient(theta, t, x, &mut ga);
                self.fd_value_gradient(theta, t, x, &mut gf);
                worst = ga.iter().zip(&gf).fold(worst, |w, (a, b)| w.max(rel(*a, *b)));
            }
            if self.q_grad.is_some() {
                self.q_gradient(phi, t, x, a, &mut qa);
                self.fd_q_gradient(phi, t, x, a, &mut qf);
                worst = qa.iter().zip(&qf).fold(worst, |w, (a, b)| w.max(rel(*a, *b)));
            }
        }
        worst
    }
}

fn central_difference(params: &[f64], out: &mut [f64], f: impl Fn(&[f64]) -> f64) {
    let mut p = params.to_vec();
    for i in 0..params.len() {
        p[i] = params[i] + FD_STEP;
        let up = f(&p);
        p[i] = params[i] - FD_STEP;
        let down = f(&p);
        p[i] = params[i];
        out[i] = (up - down) / (2.0 * FD_STEP);
    }
}

/// `log(phi / (e^phi - 1))`, the log-normalizer of the unit-interval tilt.
pub fn tilt_log_normalizer(phi: f64) -> f64 {
    if phi.abs() < 1e-4 {
        (1.0 - phi / 2.0 + phi * phi / 12.0).ln()
    } else {
        -log_unit_tilt_partition(phi)
    }
}

/// Mean of `pi^phi(a) = phi e^{phi a} / (e^phi - 1)` on `[0, 1]`.
pub fn tilt_mean(phi: f64) -> f64 {
    if phi.abs() < 1e-4 {
        0.5 + phi / 12.0
    } else {
        1.0 / (-(-phi).exp_m1()) - 1.0 / phi
    }
}

/// Variance of the unit-interval tilt, `1/phi^2 - e^phi / (e^phi - 1)^2`.
pub fn tilt_variance(phi: f64) -> f64 {
    if phi.abs() < 1e-2 {
        let p2 = phi * phi;
        1.0 / 12.0 - p2 / 240.0 + p2 * p2 / 6048.0
    } else {
        let s = (0.5 * phi).sinh();
        1.0 / (phi * phi) - 1.0 / (4.0 * s * s)
    }
}

/// Differential entropy of the unit-interval tilt.
pub fn tilt_entropy(phi: f64) -> f64 {
    -(phi * tilt_mean(phi) + tilt_log_normalizer(phi))
}

/// Example family on `A = [0, 1]`:
/// `q^phi(t, x, a) = phi a + log(phi / (e^phi - 1))`, an exact log-density,
/// with `∂q/∂phi = a - E(pi^phi)`, and `J^theta(t, x) = x + theta (T - t)`.
pub fn example_q_family(horizon: f64) -> ParamFamily {
    ParamFamily::new(
        1,
        1,
        move |theta, t, x| x + theta[0] * (horizon - t),
        |phi, _, _, a| phi[0] * a + tilt_log_normalizer(phi[0]),
    )
    .with_value_gradient(move |_, t, _, out| out[0] = horizon - t)
    .with_q_gradient(|phi, _, _, a, out| out[0] = a - tilt_mean(phi[0]))
    .with_state_free_q()
}

/// Closed-form value of `pi^phi` on the linear example with drift
/// coefficient `b`: `x + (b E + Ent)(T - t)`.
pub fn example_value_oracle(b: f64, horizon: f64) -> ValueOracle {
    Arc::new(move |phi, t, x| x + (b * tilt_mean(phi[0]) + tilt_entropy(phi[0])) * (horizon - t))
}

/// Robbins–Monro learning rate `alpha_n = A / (n^nu + B)`, `n >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Schedule {
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    pub nu: f64,
}

impl Schedule {
    pub fn new(a: f64, b: f64, nu: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::invalid(format!("schedule A must be positive, got {a}")));
        }
        if !(b >= 0.0 && b.is_finite()) {
            return Err(Error::invalid(format!("schedule B must be nonnegative, got {b}")));
        }
        if !(nu > 0.0 && nu <= 1.0) {
            return Err(Error::invalid(format!("schedule nu must lie in (0, 1], got {nu}")));
        }
        Ok(Schedule { a, b, nu })
    }

    pub fn rate(&self, n: usize) -> f64 {
        self.a / ((n.max(1) as f64).powf(self.nu) + self.b)
    }
}

/// Discounted suffix sums `S_k = sum_{j >= k} e^{-beta(t_j - t_k)} f_j dt`,
/// with `S_N = 0`.
fn discounted_suffix(values: &[f64], dt: f64, beta: f64) -> Vec<f64> {
    let decay = (-beta * dt).exp();
    let mut out = vec![0.0; values.len() + 1];
    for k in (0..values.len()).rev() {
        out[k] = values[k] * dt + decay * out[k + 1];
    }
    out
}

/// All residuals `G_0, ..., G_N` of one trajectory.
pub fn martingale_residuals(
    trajectory: &Trajectory,
    value: impl Fn(f64, f64) -> f64,
    q: impl Fn(f64, f64, f64) -> f64,
    beta: f64,
) -> Vec<f64> {
    let n = trajectory.steps();
    let horizon = trajectory.times[n];
    let flows: Vec<f64> = (0..n)
        .map(|j| {
            let (t, x, a) = (trajectory.times[j], trajectory.states[j], trajectory.actions[j]);
            trajectory.rewards[j] - q(t, x, a)
        })
        .collect();
    let suffix = discounted_suffix(&flows, trajectory.dt, beta);
    (0..=n)
        .map(|k| {
            let (t, x) = (trajectory.times[k], trajectory.states[k]);
            (-beta * (horizon - t)).exp() * trajectory.terminal_value - value(t, x) + suffix[k]
        })
        .collect()
}

/// Residual `G_k`, summed directly from its definition.
pub fn martingale_residual(
    trajectory: &Trajectory,
    value: impl Fn(f64, f64) -> f64,
    q: impl Fn(f64, f64, f64) -> f64,
    beta: f64,
    k: usize,
) -> Result<f64> {
    let n = trajectory.steps();
    if k > n {
        return Err(Error::invalid(format!("time index {k} outside 0..={n}")));
    }
    let times = &trajectory.times;
    let mut integral = 0.0;
    for j in k..n {
        let flow = trajectory.rewards[j] - q(times[j], trajectory.states[j], trajectory.actions[j]);
        integral += (-beta * (times[j] - times[k])).exp() * flow * trajectory.dt;
    }
    Ok((-beta * (times[n] - times[k])).exp() * trajectory.terminal_value
        - value(times[k], trajectory.states[k])
        + integral)
}

/// `sum_k dt I_k G_k` with `I_k` the discounted tail integral of `∂q/∂phi`.
fn phi_increment(
    family: &ParamFamily,
    phi: &[f64],
    trajectory: &Trajectory,
    residuals: &[f64],
    beta: f64,
) -> Vec<f64> {
    let n = trajectory.steps();
    let dim = family.phi_dim();
    let dt = trajectory.dt;
    let decay = (-beta * dt).exp();
    let mut grad = vec![0.0; dim];
    let mut tail = vec![0.0; dim];
    let mut increment = vec![0.0; dim];
    for k in (0..n).rev() {
        family.q_gradient(phi, trajectory.times[k], trajectory.states[k], trajectory.actions[k], &mut grad);
        for i in 0..dim {
            tail[i] = grad[i] * dt + decay * tail[i];
        }
        for i in 0..dim {
            increment[i] += dt * tail[i] * residuals[k];
        }
    }
    increment
}

fn theta_increment(
    family: &ParamFamily,
    theta: &[f64],
    trajectory: &Trajectory,
    residuals: &[f64],
) -> Vec<f64> {
    let dim = family.theta_dim();
    let mut grad = vec![0.0; dim];
    let mut increment = vec![0.0; dim];
    for k in 0..trajectory.steps() {
        family.value_gradient(theta, trajectory.times[k], trajectory.states[k], &mut grad);
        for i in 0..dim {
            increment[i] += trajectory.dt * grad[i] * residuals[k];
        }
    }
    increment
}

/// Semi-q update direction `H(phi, U)` for one trajectory (the step divided
/// by the learning rate).
pub fn semi_increment(
    phi: &[f64],
    family: &ParamFamily,
    value_oracle: &(dyn Fn(&[f64], f64, f64) -> f64 + Send + Sync),
    trajectory: &Trajectory,
    beta: f64,
) -> Vec<f64> {
    let residuals = martingale_residuals(
        trajectory,
        |t, x| value_oracle(phi, t, x),
        |t, x, a| family.q(phi, t, x, a),
        beta,
    );
    phi_increment(family, phi, trajectory, &residuals, beta)
}

/// Full q-learning update directions `(H_theta, H_phi)` for one trajectory.
pub fn full_increment(
    theta: &[f64],
    phi: &[f64],
    family: &ParamFamily,
    trajectory: &Trajectory,
    beta: f64,
) -> (Vec<f64>, Vec<f64>) {
    let residuals = martingale_residuals(
        trajectory,
        |t, x| family.value(theta, t, x),
        |t, x, a| family.q(phi, t, x, a),
        beta,
    );
    (
        theta_increment(family, theta, trajectory, &residuals),
        phi_increment(family, phi, trajectory, &residuals, beta),
    )
}

fn apply(params: &[f64], increment: &[f64], alpha: f64) -> Result<Vec<f64>> {
    let next: Vec<f64> = params.iter().zip(increment).map(|(p, d)| p + alpha * d).collect();
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { iteration: 0, params: next });
    }
    Ok(next)
}

/// `phi + alpha_n H(phi, U)` with `J` given by the oracle.
pub fn sgd_step_semi(
    phi: &[f64],
    family: &ParamFamily,
    value_oracle: &(dyn Fn(&[f64], f64, f64) -> f64 + Send + Sync),
    trajectory: &Trajectory,
    alpha: f64,
    beta: f64,
) -> Result<Vec<f64>> {
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("learning rate must be positive, got {alpha}")));
    }
    apply(phi, &semi_increment(phi, family, value_oracle, trajectory, beta), alpha)
}

/// Joint `(theta, phi)` step from the same trajectory and residuals.
pub fn sgd_step_full(
    theta: &[f64],
    phi: &[f64],
    family: &ParamFamily,
    trajectory: &Trajectory,
    alpha_theta: f64,
    alpha_phi: f64,
    beta: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(alpha_theta > 0.0 && alpha_phi > 0.0) {
        return Err(Error::invalid("learning rates must be positive"));
    }
    let (d_theta, d_phi) = full_increment(theta, phi, family, trajectory, beta);
    Ok((apply(theta, &d_theta, alpha_theta)?, apply(phi, &d_phi, alpha_phi)?))
}

/// Settings shared by the semi-q and full q-learning loops.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LearnConfig {
    pub schedule_theta: Schedule,
    pub schedule_phi: Schedule,
    pub n_iters: usize,
    pub dt: f64,
    /// `(t0, x0)` where value gaps are measured.
    pub probe: (f64, f64),
    /// Episodes start at `(0, x_start)`.
    pub x_start: f64,
    /// Episodes averaged per update.
    pub batch: usize,
    pub base_seed: u64,
    /// Drawn uniformly from `[-1, 1]` per coordinate when absent.
    pub theta_init: Option<Vec<f64>>,
    pub phi_init: Option<Vec<f64>>,
    /// `J*(t0, x0)`, for the gap column.
    pub optimal_value: Option<f64>,
    pub phi_star: Option<Vec<f64>>,
}

impl LearnConfig {
    pub fn new(schedule: Schedule, n_iters: usize, dt: f64, probe: (f64, f64), base_seed: u64) -> Self {
        LearnConfig {
            schedule_theta: schedule,
            schedule_phi: schedule,
            n_iters,
            dt,
            probe,
            x_start: probe.1,
            batch: 1,
            base_seed,
            theta_init: None,
            phi_init: None,
            optimal_value: None,
            phi_star: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnMode {
    SemiQ,
    QLearning,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LearnRecord {
    pub n: usize,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub value_gap: f64,
    pub phi_error: f64,
    pub alpha_theta: f64,
    pub alpha_phi: f64,
    /// Whether `(theta_n, phi_n)` was produced by a clamped update.
    pub clamped: bool,
}

/// Iterates of one learning run. A run that fails mid-way keeps the rows it
/// produced and stores the error in `failure`.
#[derive(Debug)]
pub struct LearnTrace {
    pub mode: LearnMode,
    pub schedule_theta: Schedule,
    pub schedule_phi: Schedule,
    pub records: Vec<LearnRecord>,
    pub failure: Option<Error>,
}

impl LearnTrace {
    pub fn gaps(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.value_gap).collect()
    }

    /// CSV `n, theta_0.., phi_0.., value_gap, phi_error, alpha_n, clamped`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        use crate::io::fmt_f64;
        let mut w = csv::Writer::from_writer(out);
        let (td, pd) = self
            .records
            .first()
            .map(|r| (r.theta.len(), r.phi.len()))
            .unwrap_or((0, 0));
        let mut header = vec!["n".to_string()];
        header.extend((0..td).map(|i| format!("theta_{i}")));
        header.extend((0..pd).map(|i| format!("phi_{i}")));
        header.extend(["value_gap", "phi_error", "alpha_n", "clamped"].map(String::from));
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.n.to_string()];
            row.extend(r.theta.iter().map(|&v| fmt_f64(v)));
            row.extend(r.phi.iter().map(|&v| fmt_f64(v)));
            row.push(fmt_f64(r.value_gap));
            row.push(fmt_f64(r.phi_error));
            row.push(fmt_f64(r.alpha_phi));
            row.push(r.clamped.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn clamp_params(params: &mut [f64]) -> bool {
    let mut hit = false;
    for p in params.iter_mut() {
        if p.abs() > PARAM_CLAMP {
            *p = p.clamp(-PARAM_CLAMP, PARAM_CLAMP);
            hit = true;
        }
    }
    hit
}

fn initial_params(config: &LearnConfig, family: &ParamFamily) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut stream = rng::stream(config.base_seed, &[u64::MAX]);
    let mut draw = |dim: usize| (0..dim).map(|_| 2.0 * stream.random::<f64>() - 1.0).collect::<Vec<_>>();
    // phi first, so semi-q and full runs with the same seed share phi_1
    let phi_drawn = draw(family.phi_dim());
    let theta_drawn = draw(family.theta_dim());
    let phi = config.phi_init.clone().unwrap_or(phi_drawn);
    let theta = config.theta_init.clone().unwrap_or(theta_drawn);
    if phi.len() != family.phi_dim() || theta.len() != family.theta_dim() {
        return Err(Error::invalid("initial parameters do not match the family dimensions"));
    }
    Ok((theta, phi))
}

fn check_config(config: &LearnConfig) -> Result<()> {
    if config.n_iters == 0 {
        return Err(Error::invalid("learning needs at least one iteration"));
    }
    if config.batch == 0 {
        return Err(Error::invalid("batch must be at least 1"));
    }
    Ok(())
}

fn distance(a: &[f64], b: Option<&Vec<f64>>) -> f64 {
    match b {
        Some(b) => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
        None => f64::NAN,
    }
}

fn mean_of(increments: Vec<Vec<f64>>) -> Vec<f64> {
    let count = increments.len() as f64;
    let mut total = vec![0.0; increments[0].len()];
    for inc in &increments {
        for (t, v) in total.iter_mut().zip(inc) {
            *t += v;
        }
    }
    total.iter().map(|t| t / count).collect()
}

/// Shared loop. `value_at_probe` gives the current estimate of the value at
/// the probe; `step` maps the iteration's episodes to parameter increments.
fn learn_loop(
    mode: LearnMode,
    spec: &ProblemSpec,
    family: &ParamFamily,
    config: &LearnConfig,
    value_at_probe: impl Fn(&[f64], &[f64]) -> f64,
    increments: impl Fn(&[f64], &[f64], &Trajectory) -> (Vec<f64>, Vec<f64>) + Sync,
) -> Result<LearnTrace> {
    check_config(config)?;
    let (mut theta, mut phi) = initial_params(config, family)?;
    let mut trace = LearnTrace {
        mode,
        schedule_theta: config.schedule_theta,
        schedule_phi: config.schedule_phi,
        records: Vec::with_capacity(config.n_iters),
        failure: None,
    };
    let mut clamped = false;
    for n in 1..=config.n_iters {
        let alpha_theta = config.schedule_theta.rate(n);
        let alpha_phi = config.schedule_phi.rate(n);
        let gap = config
            .optimal_value
            .map_or(f64::NAN, |opt| (opt - value_at_probe(&theta, &phi)).abs());
        trace.records.push(LearnRecord {
            n,
            theta: if mode == LearnMode::QLearning { theta.clone() } else { Vec::new() },
            phi: phi.clone(),
            value_gap: gap,
            phi_error: distance(&phi, config.phi_star.as_ref()),
            alpha_theta,
            alpha_phi,
            clamped,
        });

        let step = || -> Result<(Vec<f64>, Vec<f64>, bool)> {
            let policy = family.policy(&phi, spec.temperature(), spec.action_space())?;
            let seed = rng::derive_seed(config.base_seed, &[n as u64]);
            let episodes = if config.batch == 1 {
                vec![rollout(spec, &policy, config.x_start, config.dt, &mut rng::stream(seed, &[0]))?]
            } else {
                rollout_batch(spec, &policy, config.x_start, config.dt, config.batch, seed)?
            };
            let parts: Vec<(Vec<f64>, Vec<f64>)> =
                episodes.par_iter().map(|traj| increments(&theta, &phi, traj)).collect();
            let (d_theta, d_phi): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
            let mut next_theta = if family.theta_dim() > 0 && mode == LearnMode::QLearning {
                apply(&theta, &mean_of(d_theta), alpha_theta)?
            } else {
                theta.clone()
            };
            let mut next_phi = apply(&phi, &mean_of(d_phi), alpha_phi)?;
            let hit = clamp_params(&mut next_theta) | clamp_params(&mut next_phi);
            Ok((next_theta, next_phi, hit))
        };
        match step() {
            Ok((t, p, hit)) => {
                clamped = hit;
                theta = t;
                phi = p;
            }
            Err(Error::Divergence { params, .. }) => {
                trace.failure = Some(Error::Divergence { iteration: n, params });
                break;
            }
            Err(e) => {
                trace.failure = Some(e);
                break;
            }
        }
    }
    Ok(trace)
}

/// Semi-q-learning: `J` of the current policy comes from `value_oracle`,
/// only `phi` is learned.
pub fn run_semi_q(
    spec: &ProblemSpec,
    family: &ParamFamily,
    value_oracle: ValueOracle,
    config: &LearnConfig,
) -> Result<LearnTrace> {
    let beta = spec.discount();
    let (t0, x0) = config.probe;
    let probe_oracle = Arc::clone(&value_oracle);
    learn_loop(
        LearnMode::SemiQ,
        spec,
        family,
        config,
        move |_, phi| probe_oracle(phi, t0, x0),
        move |_, phi, traj| (Vec::new(), semi_increment(phi, family, value_oracle.as_ref(), traj, beta)),
    )
}

/// Full q-learning of `(theta, phi)`.
pub fn run_q_learning(
    spec: &ProblemSpec,
    family: &ParamFamily,
    config: &LearnConfig,
) -> Result<LearnTrace> {
    let beta = spec.discount();
    let (t0, x0) = config.probe;
    learn_loop(
        LearnMode::QLearning,
        spec,
        family,
        config,
        |theta, _| family.value(theta, t0, x0),
        |theta, phi, traj| full_increment(theta, phi, family, traj, beta),
    )
}

/// Monte Carlo estimate of the mean-field drift `h(phi) = E[H(phi, U)]`
/// under `pi^phi`, episodes from `(0, x_start)`.
#[allow(clippy::too_many_arguments)]
pub fn mean_field_h_mc(
    phi: &[f64],
    spec: &ProblemSpec,
    family: &ParamFamily,
    value_oracle: &(dyn Fn(&[f64], f64, f64) -> f64 + Send + Sync),
    x_start: f64,
    n_episodes: usize,
    dt: f64,
    base_seed: u64,
) -> Result<Estimate> {
    if n_episodes == 0 {
        return Err(Error::invalid("need at least one episode"));
    }
    if family.phi_dim() != 1 {
        return Err(Error::invalid("mean-field drift estimate supports scalar phi"));
    }
    let policy = family.policy(phi, spec.temperature(), spec.action_space())?;
    let beta = spec.discount();
    let samples = (0..n_episodes as u64)
        .into_par_iter()
        .map(|i| {
            let traj = rollout(spec, &policy, x_start, dt, &mut rng::stream(base_seed, &[i]))?;
            Ok(semi_increment(phi, family, value_oracle, &traj, beta)[0])
        })
        .collect::<Result<Vec<f64>>>()?;
    Estimate::from_samples(&samples)
}

/// `h(phi) = -(phi / 2)(1/phi^2 - e^phi / (e^phi - 1)^2) T`, the mean-field
/// drift of the example family.
pub fn mean_field_h_closed(phi: f64, horizon: f64) -> f64 {
    if phi.abs() < 1e-4 {
        -(phi / 24.0) * (1.0 - phi * phi / 20.0) * horizon
    } else {
        let s = (0.5 * phi).sinh();
        -(phi / 2.0) * (1.0 / (phi * phi) - 1.0 / (4.0 * s * s)) * horizon
    }
}

/// Stochastic approximation on the closed-form drift:
/// `phi_{n+1} = phi_n + alpha_n (h(phi_n) + noise_sd xi_n)`. Returns
/// `phi_1, ..., phi_{n_iters}`.
pub fn robbins_monro_closed_form(
    phi_init: f64,
    schedule: &Schedule,
    noise_sd: f64,
    n_iters: usize,
    horizon: f64,
    stream: &mut Stream,
) -> Vec<f64> {
    let mut phi = phi_init;
    let mut path = Vec::with_capacity(n_iters);
    for n in 1..=n_iters {
        path.push(phi);
        let xi: f64 = StandardNormal.sample(stream);
        phi += schedule.rate(n) * (mean_field_h_closed(phi, horizon) + noise_sd * xi);
        phi = phi.clamp(-PARAM_CLAMP, PARAM_CLAMP);
    }
    path
}

/// Sup-norm gap between a reference `q` and `q^{phi*}` over grid points.
pub fn approximation_gap(
    family: &ParamFamily,
    phi_star: &[f64],
    reference_q: impl Fn(f64, f64, f64) -> f64,
    points: &[(f64, f64, f64)],
) -> f64 {
    points
        .iter()
        .map(|&(t, x, a)| (reference_q(t, x, a) - family.q(phi_star, t, x, a)).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::linear_example;
    use std::f64::consts::E;

    fn unit() -> ActionSpace {
        ActionSpace::new(0.0, 1.0).unwrap()
    }

    #[test]
    fn example_family_limits_and_gradient() {
        let fam = example_q_family(1.0);
        for a in [0.0, 0.5, 1.0] {
            assert!(fam.q(&[0.0], 0.0, 0.0, a).abs() < 1e-15);
            assert!(fam.q(&[1e-9], 0.0, 0.0, a).abs() < 1e-8);
        }
        let mut g = [0.0];
        fam.q_gradient(&[1.0], 0.0, 0.0, 1.0, &mut g);
        assert!((g[0] - (1.0 - 1.0 / (E - 1.0))).abs() < 1e-12);
        assert!((g[0] - 0.418_023).abs() < 1e-6);
    }

    #[test]
    fn example_q_is_normalized_log_density() {
        let space = unit().refined(4097).unwrap();
        for phi in [-2.0, -1.0, 1.0, 2.0] {
            let pi = GibbsPolicy::state_independent(move |a| phi * a, 1.0, space).unwrap();
            let z = pi.stats(0.0, 0.0).unwrap().normalizing_constant;
            // ∫ exp(q^phi) = Z(phi) * phi / (e^phi - 1)
            assert!((z * tilt_log_normalizer(phi).exp() - 1.0).abs() < 1e-6, "phi = {phi}");
            let fam = example_q_family(1.0);
            let q_pi = fam.policy(&[phi], 1.0, space).unwrap();
            let q_z = q_pi.stats(0.0, 0.0).unwrap().normalizing_constant;
            assert!((q_z - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn tilt_closed_forms_match_quadrature() {
        let space = unit().refined(1 << 14 | 1).unwrap();
        for phi in [-3.0, -0.5, 0.2, 1.0, 2.5] {
            let s = GibbsPolicy::state_independent(move |a| phi * a, 1.0, space)
                .unwrap()
                .stats(0.0, 0.0)
                .unwrap();
            assert!((s.mean - tilt_mean(phi)).abs() < 1e-8);
            assert!((s.variance - tilt_variance(phi)).abs() < 1e-8);
            assert!((s.entropy - tilt_entropy(phi)).abs() < 1e-8);
        }
        // series branches are continuous with the closed forms
        for phi in [1e-4, -1e-4, 1e-2, -1e-2] {
            let eps = 1e-12;
            assert!((tilt_mean(phi * (1.0 - eps)) - tilt_mean(phi * (1.0 + eps))).abs() < 1e-10);
            assert!((tilt_variance(phi * (1.0 - eps)) - tilt_variance(phi * (1.0 + eps))).abs() < 1e-10);
            assert!((tilt_log_normalizer(phi * (1.0 - eps)) - tilt_log_normalizer(phi * (1.0 + eps))).abs() < 1e-10);
        }
    }

    #[test]
    fn fd_and_analytic_gradients_agree() {
        let fam = example_q_family(2.0);
        let probes = [(0.0, 0.0, 0.1), (0.5, 1.0, 0.9), (1.9, -2.0, 0.5)];
        for phi in [-2.0, -0.3, 0.0, 0.7, 3.0] {
            assert!(fam.gradient_mismatch(&[0.4], &[phi], &probes) < 1e-4, "phi = {phi}");
        }
    }

    #[test]
    fn schedule_contract() {
        let s = Schedule::new(2.0, 10.0, 0.75).unwrap();
        let rates: Vec<f64> = (1..2000).map(|n| s.rate(n)).collect();
        assert!(rates.iter().all(|&r| r > 0.0));
        assert!(rates.windows(2).all(|w| w[1] <= w[0]));
        let big = 1e12 as usize;
        assert!((s.rate(big) * (big as f64).powf(0.75) - 2.0).abs() < 1e-6);
        assert!(Schedule::new(0.0, 1.0, 1.0).is_err());
        assert!(Schedule::new(1.0, -1.0, 1.0).is_err());
        assert!(Schedule::new(1.0, 1.0, 1.5).is_err());
        assert!(Schedule::new(1.0, 1.0, 0.0).is_err());
    }

    fn hand_trajectory() -> Trajectory {
        Trajectory {
            dt: 0.5,
            times: vec![0.0, 0.5, 1.0],
            states: vec![0.2, -0.1, 0.4],
            actions: vec![0.3, 0.8],
            rewards: vec![0.05, -0.2],
            log_densities: vec![0.0, 0.0],
            terminal_value: 0.4,
        }
    }

    #[test]
    fn residuals_match_direct_sums() {
        let traj = hand_trajectory();
        let value = |t: f64, x: f64| x * x + t;
        let q = |t: f64, x: f64, a: f64| a - x + 0.1 * t;
        for beta in [0.0, 0.7] {
            let all = martingale_residuals(&traj, value, q, beta);
            for k in 0..=2 {
                let direct = martingale_residual(&traj, value, q, beta, k).unwrap();
                assert!((all[k] - direct).abs() < 1e-14);
            }
        }
        assert!(martingale_residual(&traj, value, q, 0.0, 3).is_err());
        // terminal consistency: J(T, .) = h gives G_N = 0
        let g_n = martingale_residual(&traj, |_, x| x, q, 0.3, 2).unwrap();
        assert_eq!(g_n, 0.0);
    }

    #[test]
    fn constant_q_shift_moves_residual_linearly() {
        let traj = hand_trajectory();
        let beta = 0.4;
        let c = 0.37;
        let base = martingale_residuals(&traj, |_, x| x, |_, _, a| a, beta);
        let shifted = martingale_residuals(&traj, |_, x| x, |_, _, a| a + c, beta);
        for k in 0..=2 {
            let weight: f64 =
                (k..2).map(|j| (-beta * (traj.times[j] - traj.times[k])).exp() * traj.dt).sum();
            assert!((shifted[k] - (base[k] - c * weight)).abs() < 1e-14);
        }
    }

    /// Brute-force expansion of the two-level sum for a one-step trajectory:
    /// `H = dt * (dq(t0) dt) * G_0`.
    #[test]
    fn one_step_update_matches_hand_expansion() {
        let traj = Trajectory {
            dt: 1.0,
            times: vec![0.0, 1.0],
            states: vec![0.3, 1.1],
            actions: vec![0.6],
            rewards: vec![0.0],
            log_densities: vec![0.0],
            terminal_value: 1.1,
        };
        let fam = example_q_family(1.0);
        let phi = [0.8];
        let oracle = example_value_oracle(0.0, 1.0);
        let alpha = 0.1;
        let next = sgd_step_semi(&phi, &fam, oracle.as_ref(), &traj, alpha, 0.0).unwrap();

        let q0 = 0.8 * 0.6 + tilt_log_normalizer(0.8);
        let j0 = 0.3 + tilt_entropy(0.8) * 1.0;
        let g0 = 1.1 - j0 + (0.0 - q0) * 1.0;
        let dq = 0.6 - tilt_mean(0.8);
        let expected = 0.8 + alpha * (1.0 * (dq * 1.0) * g0);
        assert!((next[0] - expected).abs() < 1e-12);

        // alpha enters linearly
        let double = sgd_step_semi(&phi, &fam, oracle.as_ref(), &traj, 2.0 * alpha, 0.0).unwrap();
        assert!(((double[0] - phi[0]) - 2.0 * (next[0] - phi[0])).abs() < 1e-15);

        // full step: theta weighted by ∂J/∂theta = T - t0 = 1
        let theta = [0.25];
        let (nt, np) = sgd_step_full(&theta, &phi, &fam, &traj, 0.3, alpha, 0.0).unwrap();
        let g0_full = 1.1 - (0.3 + 0.25) - q0;
        assert!((nt[0] - (0.25 + 0.3 * 1.0 * g0_full)).abs() < 1e-12);
        assert!((np[0] - (0.8 + alpha * dq * g0_full)).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_or_zero_residual_leaves_parameters() {
        let traj = hand_trajectory();
        let flat = ParamFamily::new(1, 1, |_, _, x| x, |_, _, _, _| 0.0)
            .with_value_gradient(|_, _, _, out| out[0] = 0.0)
            .with_q_gradient(|_, _, _, _, out| out[0] = 0.0);
        let oracle: ValueOracle = Arc::new(|_, _, x| x);
        assert_eq!(sgd_step_semi(&[0.4], &flat, oracle.as_ref(), &traj, 0.5, 0.0).unwrap(), vec![0.4]);
        let (t, p) = sgd_step_full(&[1.0], &[0.4], &flat, &traj, 0.5, 0.5, 0.0).unwrap();
        assert_eq!((t, p), (vec![1.0], vec![0.4]));

        // J and q that reproduce the trajectory exactly give G = 0
        let exact = ParamFamily::new(
            1,
            1,
            |theta, t, _| theta[0] * t,
            |phi, _, _, a| phi[0] * a,
        );
        let zero_traj = Trajectory {
            dt: 0.5,
            times: vec![0.0, 0.5, 1.0],
            states: vec![0.0, 0.0, 0.0],
            actions: vec![0.5, 0.5],
            rewards: vec![0.0, 0.0],
            log_densities: vec![0.0, 0.0],
            terminal_value: 0.0,
        };
        let (t, p) = sgd_step_full(&[0.0], &[0.0], &exact, &zero_traj, 1.0, 1.0, 0.0).unwrap();
        assert!(t[0].abs() < 1e-15 && p[0].abs() < 1e-15);
    }

    #[test]
    fn non_finite_update_is_divergence() {
        let traj = hand_trajectory();
        let fam = ParamFamily::new(0, 1, |_, _, _| 0.0, |_, _, _, _| f64::INFINITY)
            .with_q_gradient(|_, _, _, _, out| out[0] = 1.0);
        let oracle: ValueOracle = Arc::new(|_, _, _| 0.0);
        assert!(matches!(
            sgd_step_semi(&[0.0], &fam, oracle.as_ref(), &traj, 0.1, 0.0),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn closed_form_drift_properties() {
        assert_eq!(mean_field_h_closed(0.0, 1.0), 0.0);
        let eps = 1e-5;
        for horizon in [1.0, 2.0] {
            let slope = (mean_field_h_closed(eps, horizon) - mean_field_h_closed(-eps, horizon)) / (2.0 * eps);
            assert!((slope + horizon / 24.0).abs() < 1e-6);
        }
        assert!((mean_field_h_closed(1.0, 1.0) - (-0.039_663)).abs() < 1e-6);
        for phi in [0.3, 1.0, 4.0, 30.0] {
            assert_eq!(mean_field_h_closed(-phi, 1.0), -mean_field_h_closed(phi, 1.0));
            assert!((mean_field_h_closed(phi, 1.0) + 0.5 * phi * tilt_variance(phi)).abs() < 1e-12);
        }
        assert!(mean_field_h_closed(800.0, 1.0).is_finite());
    }

    #[test]
    fn semi_q_runs_are_reproducible() {
        let spec = linear_example(0.0, 1.0).unwrap();
        let fam = example_q_family(1.0);
        let oracle = example_value_oracle(0.0, 1.0);
        let mut cfg = LearnConfig::new(Schedule::new(1.0, 10.0, 1.0).unwrap(), 30, 0.1, (0.0, 0.0), 9);
        cfg.optimal_value = Some(0.0);
        cfg.phi_star = Some(vec![0.0]);
        let a = run_semi_q(&spec, &fam, Arc::clone(&oracle), &cfg).unwrap();
        let b = run_semi_q(&spec, &fam, Arc::clone(&oracle), &cfg).unwrap();
        assert!(a.failure.is_none());
        assert_eq!(a.records, b.records);
        assert_eq!(a.records.len(), 30);
        for r in &a.records {
            assert!((r.value_gap - (-tilt_entropy(r.phi[0]))).abs() < 1e-12);
            assert_eq!(r.phi_error, r.phi[0].abs());
        }

        cfg.n_iters = 1;
        cfg.phi_init = Some(vec![0.7]);
        let one = run_semi_q(&spec, &fam, oracle, &cfg).unwrap();
        assert_eq!(one.records.len(), 1);
        assert_eq!(one.records[0].phi, vec![0.7]);
    }

    #[test]
    fn frozen_value_family_reduces_full_to_semi() {
        let spec = linear_example(0.0, 1.0).unwrap();
        let base = example_q_family(1.0);
        let frozen = ParamFamily::new(1, 1, |_, _, x| x, move |phi, t, x, a| base.q(phi, t, x, a))
            .with_value_gradient(|_, _, _, out| out[0] = 0.0)
            .with_q_gradient(|phi, _, _, a, out| out[0] = a - tilt_mean(phi[0]))
            .with_state_free_q();
        let oracle: ValueOracle = Arc::new(|_, _, x| x);
        let mut cfg = LearnConfig::new(Schedule::new(1.0, 10.0, 1.0).unwrap(), 40, 0.05, (0.0, 0.0), 4);
        cfg.batch = 3;
        let semi = run_semi_q(&spec, &frozen, oracle, &cfg).unwrap();
        let full = run_q_learning(&spec, &frozen, &cfg).unwrap();
        let phis = |t: &LearnTrace| t.records.iter().map(|r| r.phi.clone()).collect::<Vec<_>>();
        assert_eq!(phis(&semi), phis(&full));
        assert!(full.records.iter().all(|r| r.theta == full.records[0].theta));
    }

    #[test]
    fn clamp_engages_on_escaping_iterates() {
        let spec = linear_example(0.0, 1.0).unwrap();
        let fam = ParamFamily::new(0, 1, |_, _, x| x, |phi, _, _, a| phi[0] * a)
            .with_q_gradient(|_, _, _, _, out| out[0] = 1000.0);
        let oracle: ValueOracle = Arc::new(|_, _, _| -1e3);
        let mut cfg = LearnConfig::new(Schedule::new(100.0, 0.0, 1.0).unwrap(), 3, 0.1, (0.0, 0.0), 1);
        cfg.phi_init = Some(vec![0.0]);
        let trace = run_semi_q(&spec, &fam, oracle, &cfg).unwrap();
        assert!(trace.records[1].clamped);
        assert_eq!(trace.records[1].phi[0].abs(), PARAM_CLAMP);
    }

    #[test]
    fn learn_trace_csv_layout() {
        let spec = linear_example(0.0, 1.0).unwrap();
        let fam = example_q_family(1.0);
        let cfg = LearnConfig::new(Schedule::new(1.0, 1.0, 1.0).unwrap(), 3, 0.5, (0.0, 0.0), 2);
        let trace = run_q_learning(&spec, &fam, &cfg).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "n,theta_0,phi_0,value_gap,phi_error,alpha_n,clamped");
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn robbins_monro_iterates_are_reproducible() {
        let s = Schedule::new(30.0, 10.0, 1.0).unwrap();
        let a = robbins_monro_closed_form(0.5, &s, 0.1, 100, 1.0, &mut rng::stream(1, &[]));
        let b = robbins_monro_closed_form(0.5, &s, 0.1, 100, 1.0, &mut rng::stream(1, &[]));
        assert_eq!(a, b);
        assert_eq!(a[0], 0.5);
        assert!(a.last().unwrap().abs() < 0.5);
    }

    #[test]
    fn approximation_gap_is_zero_for_exact_family() {
        let fam = example_q_family(1.0);
        let pts: Vec<(f64, f64, f64)> = (0..=10).map(|i| (0.0, 0.0, i as f64 / 10.0)).collect();
        // at B = 0 the optimum is uniform: q(.; pi*) = 0
        assert!(approximation_gap(&fam, &[0.0], |_, _, _| 0.0, &pts) < 1e-15);
        assert!((approximation_gap(&fam, &[0.0], |_, _, a| a, &pts) - 1.0).abs() < 1e-15);
    }
}
