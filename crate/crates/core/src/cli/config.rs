//! Experiment configuration: TOML (or JSON) file, then `CTRL_RL_*`
//! environment overrides, then command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{linear_example, lq_fixture, LinearExample, ProblemSpec};
use crate::qlearn::Schedule;
use crate::regret::EnvelopeMode;
use crate::value::HjbGrid;

/// Environment variables `CTRL_RL_<KEY>` or `CTRL_RL_<SECTION>__<KEY>`
/// override config keys; names match case-insensitively.
pub const ENV_PREFIX: &str = "CTRL_RL_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// `linear_example` or `lq`.
    pub problem: String,
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub a_max: f64,
    pub state_cost: f64,
    pub action_cost: f64,
    pub gamma: f64,
    pub quadrature_points: usize,
    pub run: RunSection,
    pub schedule: ScheduleSection,
    /// Defaults to `schedule`.
    pub schedule_theta: Option<ScheduleSection>,
    pub improve: ImproveSection,
    pub hjb: HjbSection,
    pub regret: RegretSection,
    pub meanfield: MeanfieldSection,
    pub sweep: SweepSection,
    pub check: CheckSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            problem: "linear_example".into(),
            b: 1.0,
            horizon: 1.0,
            a_max: 2.0,
            state_cost: 1.0,
            action_cost: 1.0,
            gamma: 1.0,
            quadrature_points: crate::model::DEFAULT_QUADRATURE_POINTS,
            run: RunSection::default(),
            schedule: ScheduleSection::default(),
            schedule_theta: None,
            improve: ImproveSection::default(),
            hjb: HjbSection::default(),
            regret: RegretSection::default(),
            meanfield: MeanfieldSection::default(),
            sweep: SweepSection::default(),
            check: CheckSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub n_iters: usize,
    pub dt: f64,
    /// `[t0, x0]`.
    pub probe: [f64; 2],
    pub batch: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seeds: vec![0], n_iters: 10, dt: 0.01, probe: [0.0, 0.0], batch: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    pub nu: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection { a: 1.0, b: 10.0, nu: 1.0 }
    }
}

impl ScheduleSection {
    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(self.a, self.b, self.nu)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImproveSection {
    pub t_points: usize,
    pub x_points: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub surface_paths: usize,
    pub probe_paths: usize,
    /// Defaults to `run.dt`.
    pub surface_dt: Option<f64>,
    /// Fail instead of clamping when a trajectory leaves the surface.
    pub strict_edges: bool,
}

impl Default for ImproveSection {
    fn default() -> Self {
        ImproveSection {
            t_points: 6,
            x_points: 17,
            x_min: -2.0,
            x_max: 2.0,
            surface_paths: 200,
            probe_paths: 10_000,
            surface_dt: None,
            strict_edges: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HjbSection {
    pub t_steps: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub x_steps: usize,
}

impl Default for HjbSection {
    fn default() -> Self {
        HjbSection { t_steps: 1000, x_min: -3.0, x_max: 3.0, x_steps: 300 }
    }
}

impl HjbSection {
    pub fn grid(&self) -> HjbGrid {
        HjbGrid { t_steps: self.t_steps, x_min: self.x_min, x_max: self.x_max, x_steps: self.x_steps }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegretSection {
    /// Trace CSVs with a `value_gap` or `gap` column.
    pub inputs: Vec<String>,
    pub nu: f64,
    pub rho: f64,
    /// `semi_q`, `q_value` or `original`.
    pub mode: String,
    /// Linear coefficient for `original` mode.
    pub slope: f64,
    /// 1-based inclusive window; defaults to `[n/10, n]`.
    pub window: Option<[usize; 2]>,
    /// With several inputs, the `(1 - eps)`-quantile gap curve is used.
    pub eps: f64,
}

impl Default for RegretSection {
    fn default() -> Self {
        RegretSection {
            inputs: Vec::new(),
            nu: 1.0,
            rho: 1.0,
            mode: "semi_q".into(),
            slope: 0.0,
            window: None,
            eps: 0.1,
        }
    }
}

impl RegretSection {
    pub fn envelope_mode(&self) -> Result<EnvelopeMode> {
        match self.mode.as_str() {
            "semi_q" => Ok(EnvelopeMode::SemiQ),
            "q_value" => Ok(EnvelopeMode::QValue),
            "original" => Ok(EnvelopeMode::Original { slope: self.slope }),
            other => Err(Error::Config(format!(
                "regret.mode must be semi_q, q_value or original, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeanfieldSection {
    pub phis: Vec<f64>,
    pub dts: Vec<f64>,
    pub episodes: usize,
}

impl Default for MeanfieldSection {
    fn default() -> Self {
        MeanfieldSection {
            phis: vec![-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0],
            dts: vec![0.1, 0.05, 0.01, 0.005],
            episodes: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Quantile curves are reported at levels `1 - eps`.
    pub eps: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection { eps: vec![0.1] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckSection {
    pub probes: usize,
}

impl Default for CheckSection {
    fn default() -> Self {
        CheckSection { probes: 1000 }
    }
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Reads a config file: `.json` files as JSON, everything else as TOML.
pub fn read_table(path: &Path) -> Result<toml::Table> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| cfg_err(format!("cannot read config {}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
        let value = strip_nulls(value);
        to_table(&value).map_err(|e| cfg_err(format!("{}: {e}", path.display())))
    } else {
        text.parse::<toml::Table>().map_err(|e| cfg_err(format!("{}: {e}", path.display())))
    }
}

// TOML has no null; absent optional keys serialize as null in JSON.
fn strip_nulls(value: serde_json::Value) -> serde_json::Value {
    match value {
        serde_json::Value::Object(map) => serde_json::Value::Object(
            map.into_iter().filter(|(_, v)| !v.is_null()).map(|(k, v)| (k, strip_nulls(v))).collect(),
        ),
        serde_json::Value::Array(items) => {
            serde_json::Value::Array(items.into_iter().map(strip_nulls).collect())
        }
        other => other,
    }
}

/// Serializes `value` into a TOML table.
pub fn to_table<T: Serialize>(value: &T) -> Result<toml::Table> {
    match toml::Value::try_from(value) {
        Ok(toml::Value::Table(t)) => Ok(t),
        Ok(_) => Err(cfg_err("config root must be a table")),
        Err(e) => Err(cfg_err(e.to_string())),
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Key names known at the top level and in each section, taken from the
/// default config (optional sections included).
fn known_keys() -> toml::Table {
    let mut cfg = ExperimentConfig::default();
    cfg.schedule_theta = Some(ScheduleSection::default());
    cfg.improve.surface_dt = Some(0.0);
    cfg.regret.window = Some([1, 1]);
    to_table(&cfg).expect("default config serializes")
}

fn find_key<'a>(table: &'a toml::Table, name: &str) -> Option<&'a String> {
    table.keys().find(|k| k.eq_ignore_ascii_case(name))
}

/// Applies `CTRL_RL_*` overrides from `vars` to `table`.
pub fn apply_env(
    table: &mut toml::Table,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<()> {
    let known = known_keys();
    let mut vars: Vec<(String, String)> =
        vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (name, raw) in vars {
        let path = &name[ENV_PREFIX.len()..];
        let value = parse_scalar(&raw);
        match path.split_once("__") {
            None => {
                let key = find_key(&known, path)
                    .filter(|k| !known[k.as_str()].is_table())
                    .ok_or_else(|| cfg_err(format!("{name} names no config key")))?;
                table.insert(key.clone(), value);
            }
            Some((section, key)) => {
                let sec_name = find_key(&known, section)
                    .filter(|k| known[k.as_str()].is_table())
                    .ok_or_else(|| cfg_err(format!("{name} names no config section")))?;
                let key = find_key(known[sec_name.as_str()].as_table().unwrap(), key)
                    .ok_or_else(|| cfg_err(format!("{name} names no config key")))?
                    .clone();
                let entry = table
                    .entry(sec_name.clone())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                entry
                    .as_table_mut()
                    .ok_or_else(|| cfg_err(format!("{sec_name} must be a section")))?
                    .insert(key, value);
            }
        }
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_table(table: toml::Table) -> Result<Self> {
        toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| cfg_err(e.message().to_string()))
    }

    /// Fills derived defaults and sorts the seed list, so equal inputs give
    /// equal configs regardless of seed order.
    pub fn resolve(mut self) -> Self {
        if self.schedule_theta.is_none() {
            self.schedule_theta = Some(self.schedule);
        }
        if self.improve.surface_dt.is_none() {
            self.improve.surface_dt = Some(self.run.dt);
        }
        self.run.seeds.sort_unstable();
        self.run.seeds.dedup();
        self
    }

    pub fn problem_spec(&self) -> Result<ProblemSpec> {
        let spec = match self.problem.as_str() {
            "linear_example" => {
                if self.gamma != 1.0 {
                    return Err(cfg_err("problem linear_example fixes gamma = 1"));
                }
                linear_example(self.b, self.horizon)?
            }
            "lq" => lq_fixture(self.a_max, self.state_cost, self.action_cost, self.horizon, self.gamma)?,
            other => {
                return Err(cfg_err(format!("problem must be linear_example or lq, got {other:?}")))
            }
        };
        spec.with_quadrature_points(self.quadrature_points)
    }

    pub fn linear_example(&self) -> Option<LinearExample> {
        (self.problem == "linear_example").then_some(LinearExample { b: self.b, horizon: self.horizon })
    }

    pub fn schedule_theta(&self) -> ScheduleSection {
        self.schedule_theta.unwrap_or(self.schedule)
    }

    /// Checks the keys shared by every command.
    pub fn validate_common(&self) -> Result<()> {
        self.problem_spec()?;
        if self.run.seeds.is_empty() {
            return Err(cfg_err("run.seeds must not be empty"));
        }
        if !(self.run.dt > 0.0 && self.run.dt.is_finite()) {
            return Err(cfg_err(format!("run.dt must be positive, got {}", self.run.dt)));
        }
        let [t0, _] = self.run.probe;
        if !(0.0..=self.horizon).contains(&t0) {
            return Err(cfg_err(format!("probe time {t0} outside [0, {}]", self.horizon)));
        }
        if self.run.n_iters == 0 {
            return Err(cfg_err("run.n_iters must be at least 1"));
        }
        if self.run.batch == 0 {
            return Err(cfg_err("run.batch must be at least 1"));
        }
        for &e in &self.sweep.eps {
            if !(e > 0.0 && e < 1.0) {
                return Err(cfg_err(format!("sweep.eps entries must lie in (0, 1), got {e}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default().resolve();
        let text = toml::to_string(&cfg).unwrap();
        let back = ExperimentConfig::from_table(text.parse().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let table: toml::Table = "problem = \"lq\"\nbogus = 1\n".parse().unwrap();
        assert!(matches!(ExperimentConfig::from_table(table), Err(Error::Config(_))));
        let table: toml::Table = "[run]\ndtt = 0.1\n".parse().unwrap();
        assert!(ExperimentConfig::from_table(table).is_err());
    }

    #[test]
    fn env_overrides() {
        let mut table: toml::Table = "B = 0.0\n[run]\ndt = 0.1\n".parse().unwrap();
        let vars = [
            ("CTRL_RL_b".to_string(), "2.5".to_string()),
            ("CTRL_RL_RUN__DT".to_string(), "0.05".to_string()),
            ("CTRL_RL_RUN__SEEDS".to_string(), "[3, 1]".to_string()),
            ("CTRL_RL_SCHEDULE__a".to_string(), "4".to_string()),
            ("UNRELATED".to_string(), "x".to_string()),
        ];
        apply_env(&mut table, vars).unwrap();
        let cfg = ExperimentConfig::from_table(table).unwrap().resolve();
        assert_eq!(cfg.b, 2.5);
        assert_eq!(cfg.run.dt, 0.05);
        assert_eq!(cfg.run.seeds, vec![1, 3]);
        // integers are accepted for real-valued keys
        assert_eq!(cfg.schedule.a, 4.0);

        let mut table = toml::Table::new();
        let bad = [("CTRL_RL_RUN__NOPE".to_string(), "1".to_string())];
        assert!(apply_env(&mut table, bad).is_err());
        let bad = [("CTRL_RL_RUN".to_string(), "1".to_string())];
        assert!(apply_env(&mut table, bad).is_err());
    }

    #[test]
    fn problem_selection() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.problem_spec().unwrap().linear_example_closed_form().is_some());
        cfg.gamma = 0.5;
        assert!(cfg.problem_spec().is_err());
        cfg.problem = "lq".into();
        assert_eq!(cfg.problem_spec().unwrap().temperature(), 0.5);
        cfg.problem = "merton".into();
        assert!(cfg.problem_spec().is_err());
    }
}
