use std::collections::BTreeMap;
use std::sync::Arc;

use eqsel_core::bench::{get_problem, ProblemSpec};
use eqsel_core::dynamics::{BoxDomain, Polynomial1D, VectorFieldSystem};
use eqsel_core::hjb::GridPolicy;
use eqsel_core::simulate::ControlKind;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Analyze,
    Solve,
    Simulate,
    Sweep,
    Riccati,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Analyze => "analyze",
            Mode::Solve => "solve",
            Mode::Simulate => "simulate",
            Mode::Sweep => "sweep",
            Mode::Riccati => "riccati",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemConfig {
    Builtin {
        name: String,
        #[serde(default)]
        params: BTreeMap<String, f64>,
    },
    /// Ascending coefficients of `m` and `ℓ` on the interval `domain`.
    Polynomial {
        drift: Vec<f64>,
        penalty: Vec<f64>,
        domain: [f64; 2],
    },
}

impl SystemConfig {
    pub fn build(&self) -> Result<VectorFieldSystem, CliError> {
        match self {
            SystemConfig::Builtin { name, params } => {
                let spec = ProblemSpec::parse(name, params).map_err(CliError::config)?;
                Ok(get_problem(&spec).map_err(CliError::config)?.system)
            }
            SystemConfig::Polynomial {
                drift,
                penalty,
                domain,
            } => {
                let field = Polynomial1D::new(drift.clone(), penalty.clone()).map_err(CliError::config)?;
                let domain = BoxDomain::interval(domain[0], domain[1]).map_err(CliError::config)?;
                VectorFieldSystem::new("polynomial", Arc::new(field), domain).map_err(CliError::config)
            }
        }
    }
}

fn default_dt() -> f64 {
    1e-3
}
fn default_horizon() -> f64 {
    1000.0
}
fn default_replicas() -> usize {
    8
}
fn default_stride() -> usize {
    10
}
fn default_bins() -> usize {
    100
}
fn default_control() -> ControlKind {
    ControlKind::HjbFeedback
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimOptions {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub burn_in: Option<f64>,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    /// Defaults to the first predicted stochastically stable equilibrium.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default = "default_stride")]
    pub sample_stride: usize,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    #[serde(default = "default_control")]
    pub control: ControlKind,
    /// Equilibrium used by `barv`, `tube` and `gradient_shaping`.
    #[serde(default)]
    pub target: Option<Vec<f64>>,
    #[serde(default)]
    pub far_radius: Option<f64>,
    /// Write a binary trace of replica 0 next to the estimates.
    #[serde(default)]
    pub trace: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub system: Option<SystemConfig>,
    /// Must agree with the subcommand when given.
    #[serde(default)]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub epsilon: Vec<f64>,
    #[serde(default)]
    pub nu: Vec<f64>,
    #[serde(default)]
    pub grid: GridPolicy,
    #[serde(default)]
    pub sim: Option<SimOptions>,
    /// Row-major matrix for `riccati`.
    #[serde(default)]
    pub matrix: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub kappa: Option<f64>,
    #[serde(default)]
    pub output: Option<std::path::PathBuf>,
    #[serde(default)]
    pub seed: u64,
    /// Ball radius for per-equilibrium masses; defaults to 0.3 × the smallest gap.
    #[serde(default)]
    pub mass_radius: Option<f64>,
    /// `solve` only: rerun each point with policy iteration and report both values.
    #[serde(default)]
    pub policy_check: bool,
}

fn positive(name: &str, values: &[f64]) -> Result<(), CliError> {
    if values.is_empty() {
        return Err(CliError::Config(format!("'{name}' must list at least one value")));
    }
    if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(CliError::Config(format!("'{name}' values must be positive, got {v}")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    /// Schema checks that need the mode; run before any computation.
    pub fn validate(&self, mode: Mode) -> Result<(), CliError> {
        if let Some(m) = self.mode {
            if m != mode {
                return Err(CliError::Config(format!(
                    "config mode '{}' does not match subcommand '{}'",
                    m.name(),
                    mode.name()
                )));
            }
        }
        if mode == Mode::Riccati {
            let rows = self
                .matrix
                .as_ref()
                .ok_or_else(|| CliError::Config("riccati needs 'matrix'".into()))?;
            if rows.is_empty() || rows.iter().any(|r| r.len() != rows.len()) {
                return Err(CliError::Config("'matrix' must be square and non-empty".into()));
            }
            if let Some(k) = self.kappa {
                if !(k > 0.0 && k.is_finite()) {
                    return Err(CliError::Config("'kappa' must be positive".into()));
                }
            }
            return Ok(());
        }
        if self.system.is_none() {
            return Err(CliError::Config(format!("{} needs 'system'", mode.name())));
        }
        positive("nu", &self.nu)?;
        if mode != Mode::Analyze {
            positive("epsilon", &self.epsilon)?;
        }
        if mode == Mode::Sweep && self.epsilon.len() < 2 {
            return Err(CliError::Config("sweep needs at least two values of 'epsilon'".into()));
        }
        if let Some(r) = self.mass_radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(CliError::Config("'mass_radius' must be positive".into()));
            }
        }
        if let Some(sim) = &self.sim {
            if sim.control == ControlKind::Custom {
                return Err(CliError::Config("control 'custom' is not available from a config".into()));
            }
            if !(sim.dt > 0.0 && sim.horizon > sim.dt) || sim.replicas == 0 {
                return Err(CliError::Config("sim needs 0 < dt < horizon and replicas ≥ 1".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unknown_keys_at_every_level() {
        assert!(ExperimentConfig::parse(r#"{"sytem": {}}"#).is_err());
        assert!(ExperimentConfig::parse(r#"{"grid": {"points": 3}}"#).is_err());
        assert!(ExperimentConfig::parse(r#"{"sim": {"steps": 3}}"#).is_err());
        assert!(ExperimentConfig::parse(r#"{"system": {"builtin": {"name": "x", "c": 1}}}"#).is_err());
    }

    #[test]
    fn mode_mismatch_is_a_config_error() {
        let c = ExperimentConfig::parse(
            r#"{"mode": "solve", "system": {"builtin": {"name": "double_well_2"}}, "nu": [1], "epsilon": [0.1]}"#,
        )
        .unwrap();
        assert!(c.validate(Mode::Solve).is_ok());
        assert!(matches!(c.validate(Mode::Simulate), Err(CliError::Config(_))));
    }

    #[test]
    fn builtin_parameters_are_checked() {
        let bad = SystemConfig::Builtin {
            name: "double_well_1".into(),
            params: [("k".to_string(), 1.0)].into(),
        };
        assert!(matches!(bad.build(), Err(CliError::Config(_))));
        let poly = SystemConfig::Polynomial {
            drift: vec![0.0, -1.0],
            penalty: vec![0.0, 0.0, 1.0],
            domain: [-3.0, 3.0],
        };
        assert_eq!(poly.build().unwrap().dim(), 1);
    }

    #[test]
    fn sim_defaults() {
        let s = SimOptions::default();
        assert_eq!(s.replicas, 8);
        assert_eq!(s.control, ControlKind::HjbFeedback);
    }
}
