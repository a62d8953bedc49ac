//! Euler–Maruyama episodes of the controlled state process.
//!
//! Actions are resampled independently from the policy at every grid time
//! and held over the following step:
//!
//! ```text
//! a_k ~ pi(. | t_k, X_k)
//! X_{k+1} = X_k + b(t_k, X_k, a_k) dt + sigma(t_k, X_k) sqrt(dt) xi_k
//! ```

use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::ProblemSpec;
use crate::policy::GibbsPolicy;
use crate::rng::{self, Stream};

/// States beyond this magnitude abort the episode.
pub const BLOW_UP_LEVEL: f64 = 1e8;

const GRID_TOLERANCE: f64 = 1e-9;

/// One discretized episode on `t_0 < ... < t_N = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<f64>,
    /// `actions[k]` is applied on `[t_k, t_{k+1})`.
    pub actions: Vec<f64>,
    /// `r(t_k, X_k, a_k)`.
    pub rewards: Vec<f64>,
    /// `log pi(a_k | t_k, X_k)` under the behavior policy.
    pub log_densities: Vec<f64>,
    pub terminal_value: f64,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.actions.len()
    }

    pub fn final_state(&self) -> f64 {
        *self.states.last().expect("trajectory has at least one state")
    }
}

/// Number of steps of size `dt` covering `[t0, horizon]`.
pub fn step_count(t0: f64, horizon: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    let span = horizon - t0;
    if span < -GRID_TOLERANCE {
        return Err(Error::invalid(format!("start time {t0} lies beyond the horizon {horizon}")));
    }
    let steps = (span / dt).round();
    if (steps * dt - span).abs() > GRID_TOLERANCE {
        return Err(Error::invalid(format!("dt = {dt} does not divide the interval [{t0}, {horizon}]")));
    }
    Ok(steps as usize)
}

/// Episode from `(0, x0)` to the horizon.
pub fn rollout(
    spec: &ProblemSpec,
    policy: &GibbsPolicy,
    x0: f64,
    dt: f64,
    rng: &mut Stream,
) -> Result<Trajectory> {
    rollout_from(spec, policy, 0.0, x0, dt, rng)
}

/// Episode from `(t0, x0)` to the horizon.
pub fn rollout_from(
    spec: &ProblemSpec,
    policy: &GibbsPolicy,
    t0: f64,
    x0: f64,
    dt: f64,
    rng: &mut Stream,
) -> Result<Trajectory> {
    let horizon = spec.horizon();
    let n = step_count(t0, horizon, dt)?;
    let sqrt_dt = dt.sqrt();

    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    let mut actions = Vec::with_capacity(n);
    let mut rewards = Vec::with_capacity(n);
    let mut log_densities = Vec::with_capacity(n);

    let mut x = x0;
    times.push(t0);
    states.push(x);
    for k in 0..n {
        let t = t0 + k as f64 * dt;
        let (a, log_pi) = policy.sample_with_log_density(t, x, rng)?;
        let xi: f64 = StandardNormal.sample(rng);
        rewards.push(spec.running_reward(t, x, a));
        actions.push(a);
        log_densities.push(log_pi);

        x += spec.drift(t, x, a) * dt + spec.diffusion(t, x) * sqrt_dt * xi;
        let t_next = if k + 1 == n { horizon } else { t0 + (k + 1) as f64 * dt };
        if !x.is_finite() || x.abs() > BLOW_UP_LEVEL {
            return Err(Error::BlowUp { step: k + 1, time: t_next, state: x });
        }
        times.push(t_next);
        states.push(x);
    }

    Ok(Trajectory {
        dt,
        times,
        states,
        actions,
        rewards,
        log_densities,
        terminal_value: spec.terminal_reward(x),
    })
}

/// `count` episodes from `(0, x0)`; episode `i` draws from the stream
/// derived from `(base_seed, i)`.
pub fn rollout_batch(
    spec: &ProblemSpec,
    policy: &GibbsPolicy,
    x0: f64,
    dt: f64,
    count: usize,
    base_seed: u64,
) -> Result<Vec<Trajectory>> {
    if count == 0 {
        return Err(Error::invalid("batch needs at least one trajectory"));
    }
    (0..count as u64)
        .into_par_iter()
        .map(|i| rollout(spec, policy, x0, dt, &mut rng::stream(base_seed, &[i])))
        .collect()
}

/// Long-format CSV: `traj_id,k,t,x,a,r`. The terminal row of each
/// trajectory leaves `a` and `r` empty.
pub fn write_trajectories_csv<W: Write>(out: W, trajectories: &[Trajectory]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["traj_id", "k", "t", "x", "a", "r"])?;
    for (id, traj) in trajectories.iter().enumerate() {
        for k in 0..traj.states.len() {
            let (a, r) = match (traj.actions.get(k), traj.rewards.get(k)) {
                (Some(a), Some(r)) => (crate::io::fmt_f64(*a), crate::io::fmt_f64(*r)),
                _ => (String::new(), String::new()),
            };
            w.write_record([
                id.to_string(),
                k.to_string(),
                crate::io::fmt_f64(traj.times[k]),
                crate::io::fmt_f64(traj.states[k]),
                a,
                r,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
