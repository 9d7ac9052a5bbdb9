//! Experiment files: a TOML document with `scenario`, `congestion`,
//! `marginals` and `solver` sections (plus an optional `reference` section).
//! Unknown keys are errors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::SfwConfig;
use crate::inner::{InnerSettings, Schedule};
use crate::scenario::{CellShape, MarginalSpec, ScenarioConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub horizon: f64,
    pub nx: usize,
    pub ny: usize,
    pub departure_times: Vec<f64>,
    pub arrival_times: Vec<f64>,
    pub lambda: f64,
    pub beta: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CongestionSection {
    pub gamma: f64,
    pub cells: CellShape,
    /// Time samples per trajectory when computing cell occupancy.
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarginalsSection {
    pub source: MarginalSpec,
    pub target: MarginalSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub alpha: f64,
    pub max_outer: usize,
    pub outer_tol: f64,
    pub inner_tol: f64,
    pub inner_max_iters: usize,
    pub schedule: Schedule,
    pub record_entropies: bool,
}

/// The long run used to estimate the minimal energy for the gap column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceSection {
    pub enabled: bool,
    pub alpha: f64,
    pub max_outer: usize,
    pub inner_tol: f64,
    pub inner_max_iters: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSection,
    pub congestion: CongestionSection,
    pub marginals: MarginalsSection,
    pub solver: SolverSection,
    pub reference: ReferenceSection,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        let s = ScenarioConfig::default();
        Self {
            horizon: s.horizon,
            nx: s.nx,
            ny: s.ny,
            departure_times: s.departure_times,
            arrival_times: s.arrival_times,
            lambda: s.lambda,
            beta: s.beta,
            epsilon: s.epsilon,
        }
    }
}

impl Default for CongestionSection {
    fn default() -> Self {
        let s = ScenarioConfig::default();
        Self { gamma: s.gamma, cells: s.cells, sample_count: s.sample_count }
    }
}

impl Default for MarginalsSection {
    fn default() -> Self {
        Self { source: MarginalSpec::default_source(), target: MarginalSpec::default_target() }
    }
}

impl Default for SolverSection {
    fn default() -> Self {
        let s = SfwConfig::default();
        Self {
            alpha: s.alpha,
            max_outer: s.max_outer,
            outer_tol: s.outer_tol,
            inner_tol: s.inner.tol,
            inner_max_iters: s.inner.max_iters,
            schedule: s.inner.schedule,
            record_entropies: s.record_entropies,
        }
    }
}

impl Default for ReferenceSection {
    fn default() -> Self {
        let s = SfwConfig::reference();
        Self {
            enabled: true,
            alpha: s.alpha,
            max_outer: s.max_outer,
            inner_tol: s.inner.tol,
            inner_max_iters: s.inner.max_iters,
        }
    }
}

impl ExperimentConfig {
    /// Parses a config document. Errors carry the offending key and line.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a document and applies `key=value` overrides on top of it.
    /// Keys are `section.key` paths; a bare key is accepted when exactly one
    /// section has it.
    pub fn from_toml_str_with_overrides<S: AsRef<str>>(text: &str, overrides: &[S]) -> Result<Self> {
        // Parse once as-is so that errors in the file itself keep their line numbers.
        let base: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if overrides.is_empty() {
            base.validate()?;
            return Ok(base);
        }
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o.as_ref())?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("after overrides: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario_config().validate()?;
        self.sfw_config().validate()?;
        if self.reference.enabled {
            self.reference_config().validate()?;
        }
        Ok(())
    }

    pub fn scenario_config(&self) -> ScenarioConfig {
        let s = &self.scenario;
        ScenarioConfig {
            horizon: s.horizon,
            nx: s.nx,
            ny: s.ny,
            departure_times: s.departure_times.clone(),
            arrival_times: s.arrival_times.clone(),
            lambda: s.lambda,
            beta: s.beta,
            epsilon: s.epsilon,
            gamma: self.congestion.gamma,
            cells: self.congestion.cells,
            sample_count: self.congestion.sample_count,
            source: self.marginals.source.clone(),
            target: self.marginals.target.clone(),
        }
    }

    pub fn sfw_config(&self) -> SfwConfig {
        let s = &self.solver;
        SfwConfig {
            alpha: s.alpha,
            max_outer: s.max_outer,
            outer_tol: s.outer_tol,
            inner: InnerSettings { tol: s.inner_tol, max_iters: s.inner_max_iters, schedule: s.schedule },
            record_entropies: s.record_entropies,
        }
    }

    pub fn reference_config(&self) -> SfwConfig {
        let r = &self.reference;
        SfwConfig {
            alpha: r.alpha,
            max_outer: r.max_outer,
            inner: InnerSettings { tol: r.inner_tol, max_iters: r.inner_max_iters, schedule: self.solver.schedule },
            ..SfwConfig::reference()
        }
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    let value = parse_value(raw);
    let path: Vec<String> = if key.contains('.') {
        key.split('.').map(str::to_owned).collect()
    } else {
        resolve_bare_key(key)?
    };
    let (last, parents) = path.split_last().ok_or_else(|| Error::Config("empty override key".into()))?;
    let mut node = table;
    for p in parents {
        node = node
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    node.insert(last.clone(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_owned())),
        Err(_) => toml::Value::String(raw.to_owned()),
    }
}

fn resolve_bare_key(key: &str) -> Result<Vec<String>> {
    let defaults = toml::Table::try_from(ExperimentConfig::default()).expect("defaults serialize");
    let owners: Vec<&String> = defaults
        .iter()
        .filter(|(_, v)| v.as_table().is_some_and(|t| t.contains_key(key)))
        .map(|(k, _)| k)
        .collect();
    match owners.as_slice() {
        [one] => Ok(vec![(*one).clone(), key.to_owned()]),
        [] => Err(Error::Config(format!("unknown override key `{key}`"))),
        many => Err(Error::Config(format!(
            "override key `{key}` is ambiguous; qualify it with one of {}",
            many.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[scenario]
nx = 20
ny = 15

[congestion]
gamma = 5.0
cells = { t = 1, x = 2, y = 2 }

[marginals.source]
kind = "uniform"

[solver]
alpha = 0.04
schedule = "jacobi"
"#;

    #[test]
    fn parses_sections_and_keeps_defaults() {
        let cfg = ExperimentConfig::from_toml_str(SAMPLE).unwrap();
        assert_eq!(cfg.scenario.nx, 20);
        assert_eq!(cfg.scenario.epsilon, 0.1);
        assert_eq!(cfg.congestion.cells, CellShape { t: 1, x: 2, y: 2 });
        assert_eq!(cfg.marginals.source, MarginalSpec::Uniform);
        assert_eq!(cfg.marginals.target, MarginalSpec::default_target());
        assert_eq!(cfg.sfw_config().inner.schedule, Schedule::Jacobi);
        assert_eq!(cfg.scenario_config().gamma, 5.0);
    }

    #[test]
    fn empty_document_is_the_published_setup() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg.scenario_config(), ScenarioConfig::default());
        assert_eq!(cfg.sfw_config(), SfwConfig::default());
    }

    #[test]
    fn unknown_keys_name_the_key_and_line() {
        let err = ExperimentConfig::from_toml_str("[scenario]\nnx = 3\ngama = 1\n").unwrap_err().to_string();
        assert!(err.contains("gama"), "{err}");
        assert!(err.contains("line 3"), "{err}");
        let err = ExperimentConfig::from_toml_str("[solvr]\nalpha = 0.1\n").unwrap_err().to_string();
        assert!(err.contains("solvr"), "{err}");
    }

    #[test]
    fn overrides_apply_and_validate() {
        let cfg = ExperimentConfig::from_toml_str_with_overrides(SAMPLE, &["gamma=0", "solver.max_outer=7"]).unwrap();
        assert_eq!(cfg.congestion.gamma, 0.0);
        assert_eq!(cfg.solver.max_outer, 7);
        let err = ExperimentConfig::from_toml_str_with_overrides(SAMPLE, &["alpha=1.5"]).unwrap_err();
        assert!(err.to_string().contains("alpha"));
        assert!(ExperimentConfig::from_toml_str_with_overrides(SAMPLE, &["nope=1"]).is_err());
        assert!(ExperimentConfig::from_toml_str_with_overrides(SAMPLE, &["max_outer=3"]).is_err());
        assert!(ExperimentConfig::from_toml_str_with_overrides(SAMPLE, &["solver.alpha"]).is_err());
        let sched = ExperimentConfig::from_toml_str_with_overrides(SAMPLE, &["schedule=gauss_seidel"]).unwrap();
        assert_eq!(sched.solver.schedule, Schedule::GaussSeidel);
    }

    #[test]
    fn echo_round_trips() {
        let cfg = ExperimentConfig::from_toml_str_with_overrides(SAMPLE, &["gamma=2.5"]).unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, back);
    }
}
