//! Gibbs (relaxed) feedback policies on a compact action interval.
//!
//! A policy is `pi(a | t, x) ∝ exp(g(t, x, a) / gamma)`. Normalization,
//! moments and sampling all use the same composite trapezoid rule on the
//! action space's uniform quadrature grid, so a density evaluated here
//! integrates to one under that rule exactly up to rounding.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ActionSpace;

/// Mean, differential entropy (nats), variance and normalizing constant of
/// a policy at one `(t, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PolicyStats {
    pub mean: f64,
    pub entropy: f64,
    pub variance: f64,
    pub normalizing_constant: f64,
}

/// Tabulated density at one `(t, x)`.
#[derive(Debug, Clone)]
pub struct GibbsTable {
    space: ActionSpace,
    /// `g / gamma - shift` at each node; the maximum is 0.
    log_weights: Vec<f64>,
    weights: Vec<f64>,
    /// Normalized trapezoid CDF at the nodes, `cdf[0] = 0`, `cdf[M-1] = 1`.
    cdf: Vec<f64>,
    shift: f64,
    /// Trapezoid integral of `weights`.
    scaled_mass: f64,
}

impl GibbsTable {
    fn build(space: ActionSpace, gamma: f64, g: impl Fn(f64) -> f64) -> Result<Self> {
        let mut log_weights = Vec::with_capacity(space.quadrature_points());
        for a in space.nodes() {
            let v = g(a) / gamma;
            if !v.is_finite() {
                return Err(Error::Evaluation(format!("non-finite policy exponent at a = {a}")));
            }
            log_weights.push(v);
        }
        let shift = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut weights = Vec::with_capacity(log_weights.len());
        for w in log_weights.iter_mut() {
            *w -= shift;
            weights.push(w.exp());
        }
        let half_h = 0.5 * space.spacing();
        let mut cdf = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        cdf.push(0.0);
        for pair in weights.windows(2) {
            acc += half_h * (pair[0] + pair[1]);
            cdf.push(acc);
        }
        let scaled_mass = acc;
        for c in cdf.iter_mut() {
            *c /= scaled_mass;
        }
        *cdf.last_mut().expect("at least two nodes") = 1.0;
        Ok(GibbsTable { space, log_weights, weights, cdf, shift, scaled_mass })
    }

    /// `log Z` where `Z = ∫ exp(g / gamma) da`.
    pub fn log_normalizer(&self) -> f64 {
        self.shift + self.scaled_mass.ln()
    }

    /// Normalized density at quadrature node `i`.
    pub fn node_density(&self, i: usize) -> f64 {
        self.weights[i] / self.scaled_mass
    }

    fn node_log_density(&self, i: usize) -> f64 {
        self.log_weights[i] - self.scaled_mass.ln()
    }

    /// Inverts the node CDF with linear interpolation inside the cell.
    pub fn invert(&self, u: f64) -> f64 {
        let cells = self.cdf.len() - 1;
        let i = self.cdf.partition_point(|&c| c <= u).clamp(1, cells) - 1;
        let (lo, hi) = (self.cdf[i], self.cdf[i + 1]);
        let frac = if hi > lo { ((u - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
        let a = self.space.node(i) + frac * self.space.spacing();
        a.min(self.space.upper())
    }

    pub fn cdf_at_nodes(&self) -> &[f64] {
        &self.cdf
    }

    /// Piecewise-linear interpolation of the node CDF, matching [`Self::invert`].
    pub fn cdf(&self, a: f64) -> f64 {
        if a <= self.space.lower() {
            return 0.0;
        }
        if a >= self.space.upper() {
            return 1.0;
        }
        let pos = (a - self.space.lower()) / self.space.spacing();
        let i = (pos.floor() as usize).min(self.cdf.len() - 2);
        let frac = pos - i as f64;
        self.cdf[i] + frac * (self.cdf[i + 1] - self.cdf[i])
    }

    pub fn stats(&self) -> PolicyStats {
        let h = self.space.spacing();
        let trapz = |f: &dyn Fn(usize) -> f64| {
            let n = self.weights.len();
            let inner: f64 = (1..n - 1).map(f).sum();
            h * (inner + 0.5 * (f(0) + f(n - 1)))
        };
        let mean = trapz(&|i| self.space.node(i) * self.node_density(i));
        let variance = trapz(&|i| {
            let d = self.space.node(i) - mean;
            d * d * self.node_density(i)
        });
        let entropy = -trapz(&|i| self.node_density(i) * self.node_log_density(i));
        PolicyStats {
            mean,
            entropy,
            variance,
            normalizing_constant: self.log_normalizer().exp(),
        }
    }
}

/// Exponent restricted to one state, `a -> g(t, x, a)`.
pub type ActionExponent = Box<dyn Fn(f64) -> f64 + Send + Sync>;

/// Exponent staged by state: `(t, x) -> (a -> g(t, x, a))`. Work that
/// depends on `(t, x)` only is done once per state, and the staging step may
/// fail (e.g. a state outside a value grid).
pub type StagedExponent = Arc<dyn Fn(f64, f64) -> Result<ActionExponent> + Send + Sync>;

/// Relaxed feedback policy `pi(a | t, x) ∝ exp(g(t, x, a) / gamma)`.
#[derive(Clone)]
pub struct GibbsPolicy {
    exponent: StagedExponent,
    temperature: f64,
    action_space: ActionSpace,
    /// Present when the exponent does not depend on `(t, x)`.
    fixed_table: Option<Arc<GibbsTable>>,
}

impl fmt::Debug for GibbsPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GibbsPolicy")
            .field("temperature", &self.temperature)
            .field("action_space", &self.action_space)
            .field("state_independent", &self.fixed_table.is_some())
            .finish_non_exhaustive()
    }
}

fn check_temperature(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive, got {gamma}")))
    }
}

impl GibbsPolicy {
    pub fn new(
        exponent: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        temperature: f64,
        action_space: ActionSpace,
    ) -> Result<Self> {
        let g = Arc::new(exponent);
        Self::staged(
            move |t, x| {
                let g = Arc::clone(&g);
                Ok(Box::new(move |a| g(t, x, a)) as ActionExponent)
            },
            temperature,
            action_space,
        )
    }

    pub fn staged(
        exponent: impl Fn(f64, f64) -> Result<ActionExponent> + Send + Sync + 'static,
        temperature: f64,
        action_space: ActionSpace,
    ) -> Result<Self> {
        check_temperature(temperature)?;
        Ok(GibbsPolicy {
            exponent: Arc::new(exponent),
            temperature,
            action_space,
            fixed_table: None,
        })
    }

    /// Policy whose exponent depends on the action only. The density table
    /// is built once, which makes sampling a binary search.
    pub fn state_independent(
        exponent: impl Fn(f64) -> f64 + Send + Sync + 'static,
        temperature: f64,
        action_space: ActionSpace,
    ) -> Result<Self> {
        check_temperature(temperature)?;
        let g = Arc::new(exponent);
        let table = GibbsTable::build(action_space, temperature, |a| g(a))?;
        Ok(GibbsPolicy {
            exponent: Arc::new(move |_, _| {
                let g = Arc::clone(&g);
                Ok(Box::new(move |a| g(a)) as ActionExponent)
            }),
            temperature,
            action_space,
            fixed_table: Some(Arc::new(table)),
        })
    }

    pub fn uniform(action_space: ActionSpace) -> Self {
        Self::state_independent(|_| 0.0, 1.0, action_space).expect("zero exponent is finite")
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn action_space(&self) -> ActionSpace {
        self.action_space
    }

    pub fn is_state_independent(&self) -> bool {
        self.fixed_table.is_some()
    }

    pub fn exponent(&self, t: f64, x: f64, a: f64) -> Result<f64> {
        Ok((self.exponent)(t, x)?(a))
    }

    fn stage(&self, t: f64, x: f64) -> Result<(ActionExponent, Arc<GibbsTable>)> {
        let g = (self.exponent)(t, x)?;
        let table = match &self.fixed_table {
            Some(table) => Arc::clone(table),
            None => Arc::new(GibbsTable::build(self.action_space, self.temperature, &g)?),
        };
        Ok((g, table))
    }

    /// Density table at `(t, x)`.
    pub fn table(&self, t: f64, x: f64) -> Result<Arc<GibbsTable>> {
        match &self.fixed_table {
            Some(table) => Ok(Arc::clone(table)),
            None => self.stage(t, x).map(|(_, table)| table),
        }
    }

    fn log_density_with(&self, g: &ActionExponent, table: &GibbsTable, a: f64) -> Result<f64> {
        let v = g(a) / self.temperature;
        if !v.is_finite() {
            return Err(Error::Evaluation(format!("non-finite policy exponent at a = {a}")));
        }
        Ok(v - table.log_normalizer())
    }

    pub fn log_density(&self, t: f64, x: f64, a: f64) -> Result<f64> {
        if !self.action_space.contains(a) {
            return Err(Error::invalid(format!(
                "action {a} outside [{}, {}]",
                self.action_space.lower(),
                self.action_space.upper()
            )));
        }
        let (g, table) = self.stage(t, x)?;
        self.log_density_with(&g, &table, a)
    }

    /// `exp(g(t, x, a) / gamma) / Z(t, x)`.
    pub fn density(&self, t: f64, x: f64, a: f64) -> Result<f64> {
        self.log_density(t, x, a).map(f64::exp)
    }

    pub fn sample<R: Rng + ?Sized>(&self, t: f64, x: f64, rng: &mut R) -> Result<f64> {
        let table = self.table(t, x)?;
        Ok(table.invert(rng.random::<f64>()))
    }

    /// Draws an action and returns it with its exact log-density.
    pub fn sample_with_log_density<R: Rng + ?Sized>(
        &self,
        t: f64,
        x: f64,
        rng: &mut R,
    ) -> Result<(f64, f64)> {
        let (g, table) = self.stage(t, x)?;
        let a = table.invert(rng.random::<f64>());
        Ok((a, self.log_density_with(&g, &table, a)?))
    }

    pub fn stats(&self, t: f64, x: f64) -> Result<PolicyStats> {
        Ok(self.table(t, x)?.stats())
    }
}

/// `(1/2) ∫_A |p - q| da` by the shared trapezoid rule.
pub fn tv_distance(p: &GibbsPolicy, q: &GibbsPolicy, t: f64, x: f64) -> Result<f64> {
    if p.action_space() != q.action_space() {
        return Err(Error::invalid("policies live on different action spaces"));
    }
    let (tp, tq) = (p.table(t, x)?, q.table(t, x)?);
    let space = p.action_space();
    let n = space.quadrature_points();
    let diff = |i: usize| (tp.node_density(i) - tq.node_density(i)).abs();
    let inner: f64 = (1..n - 1).map(diff).sum();
    let tv = 0.5 * space.spacing() * (inner + 0.5 * (diff(0) + diff(n - 1)));
    Ok(tv.clamp(0.0, 1.0))
}
