//! Experiment configuration files.
//!
//! A configuration is a TOML document with the experiment settings at the top
//! level and the network under either `[network]` or `[modulated]`. States in
//! `[modulated]` are numbered from 0.

use fluidnet::model::{ModulatedNetworkSpec, NetworkSpec};
use fluidnet::simulate::Precision;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// What to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Importance-sampling estimate for each `n`.
    Is,
    /// Crude Monte Carlo estimate for each `n`.
    Mc,
    /// Importance-sampling sweep over `n` with run-count predictions.
    Sweep,
    /// Twist, rate function, run-count constant and density curves.
    TwistInfo,
    /// Transient and stationary moments of a modulated network.
    Moments,
    /// Decay rate and empirical optimal path of a modulated network.
    Decay,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Is => "is",
            Mode::Mc => "mc",
            Mode::Sweep => "sweep",
            Mode::TwistInfo => "twist-info",
            Mode::Moments => "moments",
            Mode::Decay => "decay",
        }
    }
}

/// Settings of the `moments` mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsConfig {
    /// Initial content; defaults to an empty network.
    #[serde(default)]
    pub x0: Vec<f64>,
    /// End of the time grid; defaults to the horizon.
    #[serde(default)]
    pub t_end: Option<f64>,
    /// Number of grid intervals.
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Also emit the first moment of the jump-shot variant.
    #[serde(default)]
    pub jump_shot: bool,
}

/// A fixed background path for `twist-info` on a modulated network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathConfig {
    pub states: Vec<usize>,
    #[serde(default)]
    pub jump_times: Vec<f64>,
}

/// One experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Option<Mode>,
    /// Master seed. There is no clock-based default.
    pub seed: Option<u64>,
    /// Target `a` of the event `Y_n(t) ≥ n a`.
    #[serde(default)]
    pub target: Vec<f64>,
    /// Scalings `n`.
    #[serde(default)]
    pub n: Vec<u64>,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Critical value `T` of the confidence interval.
    #[serde(default = "default_crit")]
    pub crit: f64,
    #[serde(default = "default_max_runs")]
    pub max_runs: u64,
    #[serde(default = "default_min_runs")]
    pub min_runs: u64,
    #[serde(default = "default_batch")]
    pub batch: u64,
    /// Points of the density-curve grid.
    #[serde(default = "default_density_points")]
    pub density_points: usize,
    /// Write one diagnostic row per run for modulated estimates.
    #[serde(default)]
    pub record_runs: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modulated: Option<ModulatedNetworkSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moments: Option<MomentsConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathConfig>,
}

fn default_eps() -> f64 {
    0.1
}
fn default_crit() -> f64 {
    1.96
}
fn default_max_runs() -> u64 {
    100_000_000
}
fn default_min_runs() -> u64 {
    1000
}
fn default_batch() -> u64 {
    100
}
fn default_density_points() -> usize {
    201
}
fn default_steps() -> usize {
    100
}

/// The network under study.
#[derive(Debug, Clone, Copy)]
pub enum Subject<'a> {
    Plain(&'a NetworkSpec),
    Modulated(&'a ModulatedNetworkSpec),
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("cannot parse configuration: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn subject(&self) -> Result<Subject<'_>, CliError> {
        match (&self.network, &self.modulated) {
            (Some(n), None) => Ok(Subject::Plain(n)),
            (None, Some(m)) => Ok(Subject::Modulated(m)),
            (None, None) => Err(CliError::Config("either [network] or [modulated] is required".into())),
            (Some(_), Some(_)) => Err(CliError::Config("[network] and [modulated] are mutually exclusive".into())),
        }
    }

    pub fn nodes(&self) -> Result<usize, CliError> {
        Ok(match self.subject()? {
            Subject::Plain(s) => s.nodes(),
            Subject::Modulated(s) => s.nodes(),
        })
    }

    pub fn precision(&self, workers: usize) -> Precision {
        Precision {
            eps: self.eps,
            crit: self.crit,
            max_runs: self.max_runs,
            min_runs: self.min_runs,
            batch: self.batch,
            workers,
        }
    }

    /// Checks everything the chosen mode needs. Returns the mode and seed.
    pub fn validate(&self) -> Result<(Mode, u64), CliError> {
        let mode = self.mode.ok_or_else(|| CliError::Config("mode is required".into()))?;
        let seed = self.seed.ok_or_else(|| CliError::Config("seed is required".into()))?;
        let subject = self.subject()?;
        let problems = match subject {
            Subject::Plain(s) => s.validate(),
            Subject::Modulated(s) => s.validate(),
        };
        if !problems.is_empty() {
            return Err(CliError::Config(problems.join("; ")));
        }
        let nodes = self.nodes()?;
        let needs_target = matches!(mode, Mode::Is | Mode::Mc | Mode::Sweep | Mode::TwistInfo | Mode::Decay);
        if needs_target && self.target.len() != nodes {
            return Err(CliError::Config(format!("target needs {nodes} entries, found {}", self.target.len())));
        }
        if self.target.iter().any(|a| !a.is_finite()) {
            return Err(CliError::Config("target entries must be finite".into()));
        }
        let needs_n = matches!(mode, Mode::Is | Mode::Mc | Mode::Sweep | Mode::Decay);
        if needs_n && self.n.is_empty() {
            return Err(CliError::Config("the list of n values is empty".into()));
        }
        if self.n.contains(&0) {
            return Err(CliError::Config("n values must be positive".into()));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) || !(self.crit > 0.0 && self.crit.is_finite()) {
            return Err(CliError::Config("eps and crit must be positive".into()));
        }
        if self.batch == 0 || self.max_runs == 0 {
            return Err(CliError::Config("batch and max_runs must be positive".into()));
        }
        if self.density_points < 2 {
            return Err(CliError::Config("density_points must be at least 2".into()));
        }
        match (mode, subject) {
            (Mode::Sweep, Subject::Modulated(_)) => {
                return Err(CliError::Config("sweep needs a [network]; use decay for modulated networks".into()))
            }
            (Mode::Decay, Subject::Plain(_)) => {
                return Err(CliError::Config("decay needs a [modulated] network".into()))
            }
            _ => {}
        }
        if let Some(m) = &self.moments {
            if !m.x0.is_empty() && m.x0.len() != nodes {
                return Err(CliError::Config(format!("moments.x0 needs {nodes} entries")));
            }
            if m.steps == 0 || m.t_end.is_some_and(|t| !(t > 0.0 && t.is_finite())) {
                return Err(CliError::Config("moments.steps and moments.t_end must be positive".into()));
            }
        }
        if self.path.is_some() && !matches!(subject, Subject::Modulated(_)) {
            return Err(CliError::Config("[path] applies to modulated networks only".into()));
        }
        Ok((mode, seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SINGLE: &str = r#"
mode = "twist-info"
seed = 7
target = [1.0]
n = [10, 20]

[network]
lambda = 1.0
horizon = 1.0
drain = [1.0]
routing = [[1.0]]
jobs = [{ kind = "exponential", rate = 1.0 }]
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = ExperimentConfig::from_toml(SINGLE).unwrap();
        assert_eq!(cfg.mode, Some(Mode::TwistInfo));
        assert_eq!(cfg.eps, 0.1);
        assert_eq!(cfg.validate().unwrap(), (Mode::TwistInfo, 7));
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn seed_is_mandatory() {
        let text = SINGLE.replace("seed = 7\n", "");
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml(&format!("bogus = 1\n{SINGLE}")).is_err());
    }

    #[test]
    fn sweep_needs_n() {
        let text = SINGLE.replace("n = [10, 20]", "n = []").replace("twist-info", "sweep");
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        assert!(cfg.validate().is_err());
    }
}
