//! Regret curves, empirical rate exponents and theoretical envelopes.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fit::fit_line;

/// Running prefix sum of nonnegative gaps.
pub fn accumulate(gaps: &[f64]) -> Result<Vec<f64>> {
    if let Some((k, g)) = gaps.iter().enumerate().find(|(_, g)| !(**g >= 0.0)) {
        return Err(Error::invalid(format!("gap {k} is {g}; gaps must be nonnegative")));
    }
    let mut total = 0.0;
    Ok(gaps
        .iter()
        .map(|g| {
            total += g;
            total
        })
        .collect())
}

/// Slope of `log cumulative[k]` against `log k` for `k` in the inclusive,
/// 1-based window. Returns `(exponent, r_squared)`.
pub fn fit_exponent(cumulative: &[f64], window: (usize, usize)) -> Result<(f64, f64)> {
    let (k_min, k_max) = window;
    if k_min == 0 || k_min > k_max {
        return Err(Error::invalid(format!("bad fit window [{k_min}, {k_max}]")));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = (k_min..=k_max.min(cumulative.len()))
        .map(|k| (k, cumulative[k - 1]))
        .filter(|(_, c)| *c > 0.0 && c.is_finite())
        .map(|(k, c)| ((k as f64).ln(), c.ln()))
        .unzip();
    if xs.len() < 10 {
        return Err(Error::InsufficientData(format!(
            "exponent fit needs 10 positive points in the window, got {}",
            xs.len()
        )));
    }
    let line = fit_line(&xs, &ys)?;
    Ok((line.slope, line.r_squared))
}

/// `[n/10, n]`, the default fit window for a curve of length `n`.
pub fn default_window(n: usize) -> (usize, usize) {
    ((n / 10).max(1), n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum EnvelopeMode {
    SemiQ,
    QValue,
    /// Value of the original (unregularized) problem: the q-value envelope
    /// plus `slope * n`, with the slope standing in for the model-mismatch,
    /// discount and exploration-bias terms.
    Original { slope: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    SublinearPower,
    Polylog,
    Bounded,
}

/// Shape of a theoretical regret bound, without constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Envelope {
    pub mode: EnvelopeMode,
    pub regime: Regime,
    /// Power of `n`, ignoring log factors.
    pub exponent: f64,
    /// Power of `ln n`.
    pub log_power: f64,
}

impl Envelope {
    pub fn new(nu: f64, rho: f64, mode: EnvelopeMode) -> Result<Self> {
        if !(nu > 0.0 && nu <= 1.0) {
            return Err(Error::invalid(format!("nu must lie in (0, 1], got {nu}")));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::invalid(format!("rho must be positive, got {rho}")));
        }
        if let EnvelopeMode::Original { slope } = mode {
            if !(slope >= 0.0 && slope.is_finite()) {
                return Err(Error::invalid(format!("linear slope must be nonnegative, got {slope}")));
            }
        }
        let r = nu * rho;
        let (regime, exponent, log_power) = match mode {
            EnvelopeMode::SemiQ => {
                if r < 4.0 {
                    (Regime::SublinearPower, 1.0 - r / 4.0, 0.5)
                } else if r == 4.0 {
                    (Regime::Polylog, 0.0, 1.5)
                } else {
                    (Regime::Bounded, 0.0, 0.0)
                }
            }
            EnvelopeMode::QValue | EnvelopeMode::Original { .. } => {
                if r < 2.0 {
                    (Regime::SublinearPower, 1.0 - r / 2.0, 0.0)
                } else if r == 2.0 {
                    (Regime::Polylog, 0.0, 1.0)
                } else {
                    (Regime::Bounded, 0.0, 0.0)
                }
            }
        };
        Ok(Envelope { mode, regime, exponent, log_power })
    }

    pub fn at(&self, n: f64) -> f64 {
        let core = match self.regime {
            Regime::Bounded => 1.0,
            _ => n.powf(self.exponent) * n.ln().max(0.0).powf(self.log_power),
        };
        match self.mode {
            EnvelopeMode::Original { slope } => core + slope * n,
            _ => core,
        }
    }
}

/// Unnormalized envelope values at each `n`.
pub fn envelope(nu: f64, rho: f64, n_values: &[f64], mode: EnvelopeMode) -> Result<Vec<f64>> {
    let env = Envelope::new(nu, rho, mode)?;
    Ok(n_values.iter().map(|&n| env.at(n)).collect())
}

/// Regret curve of one gap sequence with its fit and overlaid envelope.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegretReport {
    #[serde(skip)]
    pub gaps: Vec<f64>,
    #[serde(skip)]
    pub cumulative: Vec<f64>,
    /// Envelope scaled to the empirical curve at the window midpoint.
    #[serde(skip)]
    pub envelope: Vec<f64>,
    pub window: (usize, usize),
    pub fitted_exponent: f64,
    pub r_squared: f64,
    pub envelope_exponent: f64,
    pub regime: Regime,
}

impl RegretReport {
    pub fn new(gaps: &[f64], window: (usize, usize), env: Envelope) -> Result<Self> {
        let cumulative = accumulate(gaps)?;
        let (fitted_exponent, r_squared) = fit_exponent(&cumulative, window)?;
        let mid = ((window.0 + window.1.min(cumulative.len())) / 2).max(1);
        let scale = cumulative[mid - 1] / env.at(mid as f64);
        let envelope = (1..=cumulative.len()).map(|k| scale * env.at(k as f64)).collect();
        Ok(RegretReport {
            gaps: gaps.to_vec(),
            cumulative,
            envelope,
            window,
            fitted_exponent,
            r_squared,
            envelope_exponent: env.exponent,
            regime: env.regime,
        })
    }

    /// CSV `k,gap,cumulative,envelope`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        use crate::io::fmt_f64;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "gap", "cumulative", "envelope"])?;
        for k in 0..self.gaps.len() {
            w.write_record([
                (k + 1).to_string(),
                fmt_f64(self.gaps[k]),
                fmt_f64(self.cumulative[k]),
                fmt_f64(self.envelope[k]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Pointwise `level`-quantile across equally long curves (linear
/// interpolation between order statistics). The result does not depend on
/// the order of `curves`.
pub fn quantile_curve(curves: &[Vec<f64>], level: f64) -> Result<Vec<f64>> {
    if curves.is_empty() {
        return Err(Error::invalid("quantile curve needs at least one curve"));
    }
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::invalid(format!("quantile level must lie in [0, 1], got {level}")));
    }
    let len = curves[0].len();
    if curves.iter().any(|c| c.len() != len) {
        return Err(Error::invalid("quantile curves must have equal lengths"));
    }
    let mut column = vec![0.0; curves.len()];
    Ok((0..len)
        .map(|k| {
            for (slot, c) in column.iter_mut().zip(curves) {
                *slot = c[k];
            }
            column.sort_by(f64::total_cmp);
            quantile_sorted(&column, level)
        })
        .collect())
}

fn quantile_sorted(sorted: &[f64], level: f64) -> f64 {
    let pos = level * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}
