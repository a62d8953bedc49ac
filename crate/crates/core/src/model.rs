//! Control problem data: coefficients, rewards, horizon, temperature and the
//! compact action box, plus the built-in fixtures.
//!
//! The state equation is the one-dimensional controlled diffusion
//!
//! ```text
//! dX_t = b(t, X_t, a_t) dt + sigma(t, X_t) dW_t
//! ```
//!
//! with running reward `r(t, x, a)`, terminal reward `h(x)`, discount `beta`
//! and entropy temperature `gamma`. Control enters the drift only.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng;

pub type StateActionFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;
pub type StateFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Default number of quadrature nodes on the action interval.
pub const DEFAULT_QUADRATURE_POINTS: usize = 513;

/// Window on which assumption probes are drawn in x.
pub const PROBE_X_RANGE: (f64, f64) = (-5.0, 5.0);

/// Compact action interval `[lower, upper]` with its quadrature resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ActionSpace {
    lower: f64,
    upper: f64,
    dimension: usize,
    quadrature_points: usize,
}

impl ActionSpace {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        Self::with_quadrature(lower, upper, DEFAULT_QUADRATURE_POINTS)
    }

    pub fn with_quadrature(lower: f64, upper: f64, quadrature_points: usize) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite() && lower < upper) {
            return Err(Error::invalid(format!(
                "action space needs finite lower < upper, got [{lower}, {upper}]"
            )));
        }
        if quadrature_points < 2 {
            return Err(Error::invalid("action quadrature needs at least 2 points"));
        }
        Ok(ActionSpace { lower, upper, dimension: 1, quadrature_points })
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn quadrature_points(&self) -> usize {
        self.quadrature_points
    }

    pub fn volume(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, a: f64) -> bool {
        a >= self.lower && a <= self.upper
    }

    /// Node spacing of the uniform quadrature grid.
    pub fn spacing(&self) -> f64 {
        self.volume() / (self.quadrature_points - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.quadrature_points {
            self.upper
        } else {
            self.lower + i as f64 * self.spacing()
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.quadrature_points).map(move |i| self.node(i))
    }

    /// Same interval, different quadrature resolution.
    pub fn refined(&self, quadrature_points: usize) -> Result<Self> {
        Self::with_quadrature(self.lower, self.upper, quadrature_points)
    }
}

/// Which built-in problem a spec came from, with its defining constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "problem", rename_all = "snake_case")]
pub enum Fixture {
    LinearExample { b: f64, horizon: f64 },
    Lq { a_max: f64, state_cost: f64, action_cost: f64, horizon: f64, gamma: f64 },
    Custom,
}

/// Declared global bounds, checked numerically on a probe window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeclaredBounds {
    pub drift: f64,
    pub sigma: f64,
    pub reward: f64,
    pub lipschitz: f64,
}

/// A one-dimensional entropy-regularized control problem.
///
/// Coefficient closures must be pure and deterministic; the spec is shared
/// read-only across worker threads.
#[derive(Clone)]
pub struct ProblemSpec {
    drift: StateActionFn,
    diffusion: StateFn,
    running_reward: StateActionFn,
    terminal_reward: TerminalFn,
    discount: f64,
    horizon: f64,
    temperature: f64,
    action_space: ActionSpace,
    state_dimension: usize,
    bounds: Option<DeclaredBounds>,
    fixture: Fixture,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("discount", &self.discount)
            .field("horizon", &self.horizon)
            .field("temperature", &self.temperature)
            .field("action_space", &self.action_space)
            .field("fixture", &self.fixture)
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    pub fn builder(action_space: ActionSpace) -> ProblemSpecBuilder {
        ProblemSpecBuilder {
            drift: Arc::new(|_, _, _| 0.0),
            diffusion: Arc::new(|_, _| 1.0),
            running_reward: Arc::new(|_, _, _| 0.0),
            terminal_reward: Arc::new(|_| 0.0),
            discount: 0.0,
            horizon: 1.0,
            temperature: 1.0,
            action_space,
            bounds: None,
            fixture: Fixture::Custom,
        }
    }

    pub fn drift(&self, t: f64, x: f64, a: f64) -> f64 {
        (self.drift)(t, x, a)
    }

    pub fn diffusion(&self, t: f64, x: f64) -> f64 {
        (self.diffusion)(t, x)
    }

    pub fn running_reward(&self, t: f64, x: f64, a: f64) -> f64 {
        (self.running_reward)(t, x, a)
    }

    pub fn terminal_reward(&self, x: f64) -> f64 {
        (self.terminal_reward)(x)
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn action_space(&self) -> ActionSpace {
        self.action_space
    }

    pub fn state_dimension(&self) -> usize {
        self.state_dimension
    }

    pub fn declared_bounds(&self) -> Option<DeclaredBounds> {
        self.bounds
    }

    pub fn fixture(&self) -> Fixture {
        self.fixture
    }

    /// Copy of this problem with a different action quadrature resolution.
    pub fn with_quadrature_points(&self, points: usize) -> Result<Self> {
        let mut spec = self.clone();
        spec.action_space = self.action_space.refined(points)?;
        Ok(spec)
    }

    /// Copy of this problem with a different temperature.
    pub fn with_temperature(&self, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::invalid(format!("temperature must be positive, got {gamma}")));
        }
        let mut spec = self.clone();
        spec.temperature = gamma;
        Ok(spec)
    }

    /// Closed-form helpers when this is the linear example.
    pub fn linear_example_closed_form(&self) -> Option<LinearExample> {
        match self.fixture {
            Fixture::LinearExample { b, horizon } => Some(LinearExample { b, horizon }),
            _ => None,
        }
    }
}

pub struct ProblemSpecBuilder {
    drift: StateActionFn,
    diffusion: StateFn,
    running_reward: StateActionFn,
    terminal_reward: TerminalFn,
    discount: f64,
    horizon: f64,
    temperature: f64,
    action_space: ActionSpace,
    bounds: Option<DeclaredBounds>,
    fixture: Fixture,
}

impl ProblemSpecBuilder {
    pub fn drift(mut self, f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.drift = Arc::new(f);
        self
    }

    pub fn diffusion(mut self, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.diffusion = Arc::new(f);
        self
    }

    pub fn running_reward(
        mut self,
        f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.running_reward = Arc::new(f);
        self
    }

    pub fn terminal_reward(mut self, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.terminal_reward = Arc::new(f);
        self
    }

    pub fn discount(mut self, beta: f64) -> Self {
        self.discount = beta;
        self
    }

    pub fn horizon(mut self, t: f64) -> Self {
        self.horizon = t;
        self
    }

    pub fn temperature(mut self, gamma: f64) -> Self {
        self.temperature = gamma;
        self
    }

    pub fn bounds(mut self, bounds: DeclaredBounds) -> Self {
        self.bounds = Some(bounds);
        self
    }

    fn fixture(mut self, fixture: Fixture) -> Self {
        self.fixture = fixture;
        self
    }

    pub fn build(self) -> Result<ProblemSpec> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::invalid(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.discount >= 0.0 && self.discount.is_finite()) {
            return Err(Error::invalid(format!("discount must be nonnegative, got {}", self.discount)));
        }
        Ok(ProblemSpec {
            drift: self.drift,
            diffusion: self.diffusion,
            running_reward: self.running_reward,
            terminal_reward: self.terminal_reward,
            discount: self.discount,
            horizon: self.horizon,
            temperature: self.temperature,
            action_space: self.action_space,
            state_dimension: 1,
            bounds: self.bounds,
            fixture: self.fixture,
        })
    }
}

/// One-dimensional linear example: `b = B a`, `sigma = 1`, `r = 0`,
/// `h(x) = x`, `beta = 0`, `gamma = 1`, `A = [0, 1]`.
pub fn linear_example(b: f64, horizon: f64) -> Result<ProblemSpec> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
    }
    if !b.is_finite() {
        return Err(Error::invalid("drift coefficient B must be finite"));
    }
    ProblemSpec::builder(ActionSpace::new(0.0, 1.0)?)
        .drift(move |_, _, a| b * a)
        .diffusion(|_, _| 1.0)
        .running_reward(|_, _, _| 0.0)
        .terminal_reward(|x| x)
        .discount(0.0)
        .horizon(horizon)
        .temperature(1.0)
        .bounds(DeclaredBounds { drift: b.abs(), sigma: 1.0, reward: 0.0, lipschitz: 1.0 })
        .fixture(Fixture::LinearExample { b, horizon })
        .build()
}

/// Linear-quadratic regulator on a truncated action box:
/// `b = a`, `sigma = 1`, `r = -(state_cost x^2 + action_cost a^2) / 2`,
/// `h = 0`, `beta = 0`, `A = [-a_max, a_max]`.
///
/// Differs from the classical LQ problem only through the truncation of the
/// action space, which makes `A` compact.
pub fn lq_fixture(
    a_max: f64,
    state_cost: f64,
    action_cost: f64,
    horizon: f64,
    gamma: f64,
) -> Result<ProblemSpec> {
    let positive = |name: &str, v: f64| {
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(Error::invalid(format!("{name} must be positive, got {v}")))
        }
    };
    positive("a_max", a_max)?;
    positive("action_cost", action_cost)?;
    positive("T", horizon)?;
    positive("gamma", gamma)?;
    if !(state_cost >= 0.0 && state_cost.is_finite()) {
        return Err(Error::invalid(format!("state_cost must be nonnegative, got {state_cost}")));
    }
    let x_edge = PROBE_X_RANGE.1.max(-PROBE_X_RANGE.0);
    let bounds = DeclaredBounds {
        drift: a_max,
        sigma: 1.0,
        reward: 0.5 * (state_cost * x_edge * x_edge + action_cost * a_max * a_max),
        lipschitz: (state_cost * x_edge).max(f64::MIN_POSITIVE),
    };
    ProblemSpec::builder(ActionSpace::new(-a_max, a_max)?)
        .drift(|_, _, a| a)
        .diffusion(|_, _| 1.0)
        .running_reward(move |_, x, a| -0.5 * (state_cost * x * x + action_cost * a * a))
        .terminal_reward(|_| 0.0)
        .discount(0.0)
        .horizon(horizon)
        .temperature(gamma)
        .bounds(bounds)
        .fixture(Fixture::Lq { a_max, state_cost, action_cost, horizon, gamma })
        .build()
}

/// Closed forms attached to the linear example.
///
/// For any state-independent policy with mean `E` and differential entropy
/// `Ent` on `[0, 1]`:
/// `J(t, x) = x + (B E + Ent)(T - t)` and `q(t, x, a) = B (a - E) - Ent`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearExample {
    pub b: f64,
    pub horizon: f64,
}

impl LinearExample {
    pub fn value(&self, t: f64, x: f64, mean: f64, entropy: f64) -> f64 {
        x + (self.b * mean + entropy) * (self.horizon - t)
    }

    pub fn q(&self, a: f64, mean: f64, entropy: f64) -> f64 {
        self.b * (a - mean) - entropy
    }

    /// Exponent of the optimal Gibbs policy, `pi* ∝ exp(B a)`.
    pub fn optimal_exponent(&self, a: f64) -> f64 {
        self.b * a
    }

    /// Optimal value `x + (T - t) log ∫_0^1 e^{B a} da`.
    pub fn optimal_value(&self, t: f64, x: f64) -> f64 {
        x + (self.horizon - t) * log_unit_tilt_partition(self.b)
    }
}

/// `log ∫_0^1 e^{c a} da = log((e^c - 1) / c)`, continuous at `c = 0`.
pub fn log_unit_tilt_partition(c: f64) -> f64 {
    if c.abs() < 1e-4 {
        // log(1 + c/2 + c^2/6 + ...) = c/2 + c^2/24 + O(c^4)
        c / 2.0 + c * c / 24.0
    } else if c > 0.0 {
        c + (-(-c).exp_m1() / c).ln()
    } else {
        (c.exp_m1() / c).ln()
    }
}

/// Numerical spot-check of the boundedness and Lipschitz requirements.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub max_abs_b: f64,
    pub min_abs_sigma: f64,
    pub max_abs_sigma: f64,
    pub max_abs_r: f64,
    pub max_lipschitz_quotient: f64,
    pub passed: bool,
    pub failures: Vec<String>,
}

/// Probes `b, sigma, r, h` on `probe_count` points of `[0,T] x [-5,5] x A`
/// and every pair of probes for Lipschitz quotients in `x`.
///
/// The quotient for a pair `(i, j)` holds `(t_i, a_i)` fixed and moves `x`
/// from `x_i` to `x_j`. Pairs with coincident `x` are skipped.
pub fn check_assumptions(spec: &ProblemSpec, probe_count: usize, seed: u64) -> AssumptionReport {
    let mut stream = rng::stream(seed, &[0xA55]);
    let space = spec.action_space();
    let probes: Vec<(f64, f64, f64)> = (0..probe_count.max(2))
        .map(|_| {
            let t = stream.random::<f64>() * spec.horizon();
            let x = PROBE_X_RANGE.0 + stream.random::<f64>() * (PROBE_X_RANGE.1 - PROBE_X_RANGE.0);
            let a = space.lower() + stream.random::<f64>() * space.volume();
            (t, x, a)
        })
        .collect();

    let mut max_abs_b = 0.0f64;
    let mut min_abs_sigma = f64::INFINITY;
    let mut max_abs_sigma = 0.0f64;
    let mut max_abs_r = 0.0f64;
    let mut all_finite = true;
    for &(t, x, a) in &probes {
        let (b, s, r, h) = (spec.drift(t, x, a), spec.diffusion(t, x), spec.running_reward(t, x, a), spec.terminal_reward(x));
        all_finite &= b.is_finite() && s.is_finite() && r.is_finite() && h.is_finite();
        max_abs_b = max_abs_b.max(b.abs());
        min_abs_sigma = min_abs_sigma.min(s.abs());
        max_abs_sigma = max_abs_sigma.max(s.abs());
        max_abs_r = max_abs_r.max(r.abs());
    }

    let mut max_lipschitz_quotient = 0.0f64;
    for (i, &(ti, xi, ai)) in probes.iter().enumerate() {
        for &(_, xj, _) in &probes[i + 1..] {
            let dx = (xi - xj).abs();
            if dx == 0.0 {
                continue;
            }
            let quotients = [
                (spec.drift(ti, xi, ai) - spec.drift(ti, xj, ai)).abs(),
                (spec.diffusion(ti, xi) - spec.diffusion(ti, xj)).abs(),
                (spec.running_reward(ti, xi, ai) - spec.running_reward(ti, xj, ai)).abs(),
                (spec.terminal_reward(xi) - spec.terminal_reward(xj)).abs(),
            ];
            for q in quotients {
                max_lipschitz_quotient = max_lipschitz_quotient.max(q / dx);
            }
        }
    }

    let mut failures = Vec::new();
    if !all_finite {
        failures.push("non-finite coefficient on the probe set".to_string());
    }
    if min_abs_sigma <= 0.0 {
        failures.push("diffusion vanishes on the probe set".to_string());
    }
    match spec.declared_bounds() {
        Some(bounds) => {
            // small slack for rounding in the closures themselves
            let slack = |v: f64| v * (1.0 + 1e-12) + 1e-12;
            if max_abs_b > slack(bounds.drift) {
                failures.push(format!("|b| = {max_abs_b} exceeds declared {}", bounds.drift));
            }
            if max_abs_sigma > slack(bounds.sigma) || min_abs_sigma * slack(bounds.sigma) < 1.0 - 1e-12 {
                failures.push(format!(
                    "|sigma| in [{min_abs_sigma}, {max_abs_sigma}] violates declared bound {}",
                    bounds.sigma
                ));
            }
            if max_abs_r > slack(bounds.reward) {
                failures.push(format!("|r| = {max_abs_r} exceeds declared {}", bounds.reward));
            }
            if max_lipschitz_quotient > slack(bounds.lipschitz) {
                failures.push(format!(
                    "Lipschitz quotient {max_lipschitz_quotient} exceeds declared {}",
                    bounds.lipschitz
                ));
            }
        }
        None => failures.push("no declared bounds to check against".to_string()),
    }

    AssumptionReport {
        max_abs_b,
        min_abs_sigma,
        max_abs_sigma,
        max_abs_r,
        max_lipschitz_quotient,
        passed: failures.is_empty(),
        failures,
    }
}
