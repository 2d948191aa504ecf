//! Run configuration: a strictly validated TOML file with one section per
//! physical ingredient. Unknown keys are rejected everywhere so a typo
//! cannot silently fall back to a default, and the parsed structure
//! serializes back into the output metadata verbatim.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrators::{IntegratorConfig, Splitting};
use crate::model::Penalty;

/// Full description of one experiment run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// One of the experiment names understood by the command-line tool.
    pub experiment: String,
    pub seed: u64,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    pub steps: usize,
    #[serde(default)]
    pub burn_in: usize,
    #[serde(default = "default_thinning")]
    pub thinning: usize,
    /// Directory the run writes its CSV and JSON files into.
    pub output: PathBuf,
    #[serde(default = "default_threads")]
    pub threads: usize,
    pub model: ModelSection,
    pub integrator: IntegratorSection,
    pub penalty: PenaltySection,
    pub thermostat: ThermostatSection,
    #[serde(default)]
    pub grid: GridSection,
}

fn default_replicas() -> usize {
    1
}

fn default_thinning() -> usize {
    1
}

fn default_threads() -> usize {
    1
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidConfig(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.is_empty() {
            return Err(Error::InvalidConfig("experiment name is empty".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be positive".into()));
        }
        if self.burn_in >= self.steps {
            return Err(Error::InvalidConfig(format!(
                "burn_in {} must be smaller than steps {}",
                self.burn_in, self.steps
            )));
        }
        if self.thinning == 0 {
            return Err(Error::InvalidConfig("thinning must be at least 1".into()));
        }
        if self.replicas == 0 {
            return Err(Error::InvalidConfig("replicas must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::InvalidConfig("threads must be at least 1".into()));
        }
        self.model.validate()?;
        self.integrator.to_config()?;
        self.penalty.validate()?;
        self.thermostat.validate()?;
        Ok(())
    }

    /// The configuration as canonical TOML, for echoing into outputs.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("validated config serializes")
    }
}

/// Model choice plus its physical parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSection {
    /// Discretized particle chain with difference constraints.
    Chain(ChainParams),
    /// One-dimensional quartic double well with the coordinate penalized.
    DoubleWell(DoubleWellParams),
    /// Two-mode angular potential on the unit circle.
    Circle(CircleParams),
    /// Two-scale ring energy with a stiff fiber.
    Stiff(StiffParams),
}

impl ModelSection {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSection::Chain(p) => {
                if p.n_beads < 2 {
                    return Err(Error::InvalidConfig(format!(
                        "chain needs at least 2 beads, got {}",
                        p.n_beads
                    )));
                }
                if !(p.nubar >= 0.0 && p.nubar.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "chain nubar must be finite and nonnegative, got {}",
                        p.nubar
                    )));
                }
            }
            ModelSection::DoubleWell(p) => {
                if !(p.amp >= 0.0 && p.amp.is_finite() && p.width.is_finite()) {
                    return Err(Error::InvalidConfig(
                        "double well needs finite width and nonnegative amplitude".into(),
                    ));
                }
            }
            ModelSection::Circle(p) => {
                if !(p.barrier >= 0.0 && p.barrier.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "circle barrier must be finite and nonnegative, got {}",
                        p.barrier
                    )));
                }
            }
            ModelSection::Stiff(p) => {
                if !(p.epsilon > 0.0 && p.epsilon.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "stiff epsilon must be positive, got {}",
                        p.epsilon
                    )));
                }
                if !(p.nubar > 0.0 && p.nubar.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "stiff nubar must be positive, got {}",
                        p.nubar
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ModelSection::Chain(_) => "chain",
            ModelSection::DoubleWell(_) => "double_well",
            ModelSection::Circle(_) => "circle",
            ModelSection::Stiff(_) => "stiff",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainParams {
    pub n_beads: usize,
    /// Rescaled penalty; the physical strength is `nubar * n_beads`.
    pub nubar: f64,
    #[serde(default)]
    pub continuous_cutoff: bool,
    #[serde(default)]
    pub harmonic: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoubleWellParams {
    /// `V(q) = amp (q^2 - width^2)^2`.
    pub amp: f64,
    pub width: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircleParams {
    /// Height scale of the two-mode angular potential.
    pub barrier: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StiffParams {
    pub a1: f64,
    pub a2: f64,
    pub epsilon: f64,
    /// Rescaled penalty; the physical strength is `nubar / epsilon`.
    pub nubar: f64,
}

/// Mirror of [`IntegratorConfig`] with serde defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSection {
    pub dt: f64,
    #[serde(default = "default_newton_tol")]
    pub newton_tol: f64,
    #[serde(default = "default_newton_max_iter")]
    pub newton_max_iter: usize,
    #[serde(default = "default_tol_c")]
    pub tol_c: f64,
    #[serde(default = "default_true")]
    pub fixman_in_forces: bool,
    #[serde(default = "default_true")]
    pub metropolis: bool,
    #[serde(default = "default_thinning")]
    pub ou_substeps: usize,
    #[serde(default = "default_true")]
    pub refresh_jacobian: bool,
    #[serde(default)]
    pub splitting: SplittingName,
}

fn default_newton_tol() -> f64 {
    1e-10
}

fn default_newton_max_iter() -> usize {
    50
}

fn default_tol_c() -> f64 {
    1e-9
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplittingName {
    #[default]
    Lie,
    Strang,
}

impl IntegratorSection {
    pub fn to_config(&self) -> Result<IntegratorConfig> {
        let mut cfg = IntegratorConfig::new(self.dt);
        cfg.newton_tol = self.newton_tol;
        cfg.newton_max_iter = self.newton_max_iter;
        cfg.tol_c = self.tol_c;
        cfg.fixman_in_forces = self.fixman_in_forces;
        cfg.metropolis = self.metropolis;
        cfg.ou_substeps = self.ou_substeps;
        cfg.refresh_jacobian = self.refresh_jacobian;
        cfg.splitting = match self.splitting {
            SplittingName::Lie => Splitting::Lie,
            SplittingName::Strang => Splitting::Strang,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The same section at another step size.
    pub fn with_dt(&self, dt: f64) -> Self {
        Self { dt, ..self.clone() }
    }
}

/// How the penalty strength is chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    /// Use `nu` as given.
    #[default]
    Fixed,
    /// Hard constraint.
    Infinite,
    /// `nu = nubar * dt^exponent`, the step-size-consistent scaling.
    Scaled,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySection {
    #[serde(default)]
    pub mode: PenaltyMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nubar: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exponent: Option<f64>,
}

impl PenaltySection {
    pub fn fixed(nu: f64) -> Self {
        Self {
            mode: PenaltyMode::Fixed,
            nu: Some(nu),
            nubar: None,
            exponent: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            PenaltyMode::Fixed => {
                let nu = self.nu.ok_or_else(|| {
                    Error::InvalidConfig("penalty mode \"fixed\" needs nu".into())
                })?;
                if !(nu > 0.0 && nu.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "penalty nu must be positive and finite, got {nu}"
                    )));
                }
                if self.nubar.is_some() || self.exponent.is_some() {
                    return Err(Error::InvalidConfig(
                        "penalty mode \"fixed\" takes only nu".into(),
                    ));
                }
            }
            PenaltyMode::Infinite => {
                if self.nu.is_some() || self.nubar.is_some() || self.exponent.is_some() {
                    return Err(Error::InvalidConfig(
                        "penalty mode \"infinite\" takes no numeric fields".into(),
                    ));
                }
            }
            PenaltyMode::Scaled => {
                let nubar = self.nubar.ok_or_else(|| {
                    Error::InvalidConfig("penalty mode \"scaled\" needs nubar".into())
                })?;
                let k = self.exponent.ok_or_else(|| {
                    Error::InvalidConfig("penalty mode \"scaled\" needs exponent".into())
                })?;
                if !(nubar > 0.0 && nubar.is_finite() && k > 0.0 && k.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "penalty scaling needs positive finite nubar and exponent, got {nubar} and {k}"
                    )));
                }
                if self.nu.is_some() {
                    return Err(Error::InvalidConfig(
                        "penalty mode \"scaled\" derives nu; do not set it".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// The penalty at step size `dt`.
    pub fn resolve(&self, dt: f64) -> Result<Penalty> {
        self.validate()?;
        Ok(match self.mode {
            PenaltyMode::Fixed => Penalty::Finite(self.nu.unwrap()),
            PenaltyMode::Infinite => Penalty::Infinite,
            PenaltyMode::Scaled => Penalty::Finite(
                crate::integrators::consistent_penalty(dt, self.nubar.unwrap(), self.exponent.unwrap()),
            ),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermostatSection {
    pub beta: f64,
    pub gamma: f64,
    #[serde(default)]
    pub gamma_z: f64,
}

impl ThermostatSection {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "beta must be positive and finite, got {}",
                self.beta
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "gamma must be finite and nonnegative, got {}",
                self.gamma
            )));
        }
        if !(self.gamma_z >= 0.0 && self.gamma_z.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "gamma_z must be finite and nonnegative, got {}",
                self.gamma_z
            )));
        }
        Ok(())
    }
}

/// Optional sweep values. Experiments read the lists they understand and
/// fall back to their built-in grids otherwise.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nubar: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_beads: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt_factor: Option<Vec<f64>>,
}
