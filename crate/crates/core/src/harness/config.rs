//! Experiment configuration: a TOML file naming a preset plus optional blocks
//! that override the preset's defaults. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::featureid::AeTrainConfig;
use crate::pinn::{PinnConfig, TensorGrid};
use crate::presets::PresetName;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    McFull,
    McReduced,
    Fd,
    Pinn,
    Riccati,
}

impl Estimator {
    pub fn as_str(self) -> &'static str {
        match self {
            Estimator::McFull => "mc_full",
            Estimator::McReduced => "mc_reduced",
            Estimator::Fd => "fd",
            Estimator::Pinn => "pinn",
            Estimator::Riccati => "riccati",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ReductionSpec {
    /// The preset's analytic features and `α`, `β`.
    #[default]
    Analytic,
    /// A trained encoder checkpoint; used to project simulated states.
    Learned { checkpoint: PathBuf },
}

/// Evaluation grid: a tensor grid in `ξ` and a list of times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub d_xi: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_span: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
}

impl GridSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, d_xi: Vec<f64>, times: Vec<f64>) -> Self {
        Self {
            lower,
            upper,
            d_xi,
            times: Some(times),
            t_span: None,
            dt: None,
        }
    }

    pub fn spanning(lower: Vec<f64>, upper: Vec<f64>, d_xi: Vec<f64>, t_span: (f64, f64), dt: f64) -> Self {
        Self {
            lower,
            upper,
            d_xi,
            times: None,
            t_span: Some(t_span),
            dt: Some(dt),
        }
    }

    pub fn validate(&self, k: usize, field: &str) -> Result<(), Error> {
        let err = |m: String| Err(config_error(field, m));
        if self.lower.len() != k || self.upper.len() != k || self.d_xi.len() != k {
            return err(format!("lower, upper and d_xi need {k} entries"));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l <= u)) {
            return err("lower exceeds upper".into());
        }
        if self.d_xi.iter().any(|h| !(*h > 0.0)) {
            return err("d_xi entries must be positive".into());
        }
        match (&self.times, self.t_span, self.dt) {
            (Some(t), None, None) if !t.is_empty() => Ok(()),
            (None, Some((a, b)), Some(dt)) if a <= b && dt > 0.0 => Ok(()),
            _ => err("give either a nonempty `times` list or both `t_span` and `dt`".into()),
        }
    }

    pub fn tensor(&self) -> TensorGrid {
        let box_: Vec<(f64, f64)> = self.lower.iter().copied().zip(self.upper.iter().copied()).collect();
        match (&self.times, self.t_span, self.dt) {
            (Some(times), _, _) => {
                let mut g = TensorGrid::from_steps(&box_, &self.d_xi, (0.0, 0.0), 1.0);
                g.times = times.clone();
                g
            }
            (None, Some(span), Some(dt)) => TensorGrid::from_steps(&box_, &self.d_xi, span, dt),
            _ => unreachable!("validated grid"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimBlock {
    pub dt: f64,
    pub n_paths: usize,
    /// Start state for `simulate`; the lift of the grid's first point if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// `simulate` the reduced SDE instead of the full system.
    #[serde(default)]
    pub reduced: bool,
    /// Horizon for `simulate`; the preset horizon if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    /// Brownian-bridge crossing correction for reduced safety estimates.
    #[serde(default)]
    pub bridge: bool,
    /// Flag dataset rows whose MC standard error exceeds this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_error_ceiling: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdBlock {
    pub d_xi: Vec<f64>,
    pub dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rannacher_steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Fd,
    Mc,
    Riccati,
    File,
}

/// Where PINN training targets come from and on which grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub source: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    pub grid: GridSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconTarget {
    Cost,
    Barrier,
}

/// State grid and reconstruction target for feature learning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatesSpec {
    pub lower: f64,
    pub upper: f64,
    pub step: f64,
    pub target: ReconTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Percentage,
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub sample_counts: Vec<usize>,
    pub estimators: Vec<Estimator>,
    pub metric: Metric,
    pub oracle: Estimator,
    pub repetitions: usize,
    /// Benchmark points `[ξ1, ..., ξk, t]`.
    pub points: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: PresetName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimator: Option<Estimator>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub reduction: ReductionSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fd: Option<FdBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pinn: Option<PinnConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<AeTrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub states: Option<StatesSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<BenchmarkSpec>,
}

pub(crate) fn config_error(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn preset(name: PresetName) -> Self {
        Self {
            preset: name,
            estimator: None,
            seed: None,
            out: None,
            reduction: ReductionSpec::Analytic,
            grid: None,
            sim: None,
            fd: None,
            pinn: None,
            data: None,
            features: None,
            states: None,
            benchmark: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, Error> {
        toml::from_str(text).map_err(|e| {
            let span = e.span().map(|s| format!(" (bytes {}..{})", s.start, s.end)).unwrap_or_default();
            config_error("<config>", format!("{}{span}", e.message().trim()))
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Read a TOML file, or recover the configuration embedded in an
    /// artifact written by a previous run.
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let text = match super::artifact::embedded_config(&text) {
            Some(embedded) => embedded,
            None => text,
        };
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config { message, .. } => config_error(&path.display().to_string(), message),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = ExperimentConfig::from_toml("preset = \"sys3d-value\"\nestimatr = \"fd\"\n").unwrap_err();
        assert!(err.to_string().contains("estimatr"), "{err}");
        let err = ExperimentConfig::from_toml("preset = \"sys3d-value\"\n[sim]\ndt = 0.1\nn_paths = 3\nnpaths = 4\n").unwrap_err();
        assert!(err.to_string().contains("npaths"), "{err}");
        assert!(ExperimentConfig::from_toml("preset = \"nope\"").is_err());
    }

    #[test]
    fn minimal_and_full_round_trip() {
        let cfg = ExperimentConfig::from_toml("preset = \"heat-oracle\"").unwrap();
        assert_eq!(cfg.preset, PresetName::HeatOracle);
        let text = r#"
preset = "sys3d-value"
estimator = "mc_reduced"
seed = 7

[reduction]
kind = "learned"
checkpoint = "enc.json"

[grid]
lower = [1.0, 1.0]
upper = [2.0, 2.0]
d_xi = [0.5, 0.5]
times = [0.5]

[sim]
dt = 0.001
n_paths = 100

[pinn]
epochs = 10
hidden = [8, 8]
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.estimator, Some(Estimator::McReduced));
        assert_eq!(cfg.pinn.as_ref().unwrap().epochs, 10);
        assert_eq!(cfg.pinn.as_ref().unwrap().n_domain, 600);
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn grid_validation() {
        let g = GridSpec::new(vec![1.0], vec![2.0], vec![0.5], vec![]);
        assert!(g.validate(1, "grid").is_err());
        let g = GridSpec::spanning(vec![1.0, 1.0], vec![2.0, 2.0], vec![0.1, 0.1], (1.0, 1.5), 0.1);
        g.validate(2, "grid").unwrap();
        assert_eq!(g.tensor().len(), 11 * 11 * 6);
        assert!(g.validate(1, "grid").is_err());
    }
}
