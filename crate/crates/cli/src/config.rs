//! The pipeline configuration document.

use std::fmt;
use std::path::{Path, PathBuf};

use liouville::action_angle::Compact;
use liouville::c0::Window;
use liouville::conjugacy::AveragingMethod;
use liouville::flow::IntegratorConfig;
use liouville::foliation::LeafGrid;
use liouville::models::ModelConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Analyze,
    Rotation,
    Conjugacy,
    Coords,
    Approx,
    C0check,
}

impl Pipeline {
    pub fn parse(name: &str) -> Option<Self> {
        serde_json::from_value(serde_json::Value::String(name.to_string())).ok()
    }

    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Analyze => "analyze",
            Pipeline::Rotation => "rotation",
            Pipeline::Conjugacy => "conjugacy",
            Pipeline::Coords => "coords",
            Pipeline::Approx => "approx",
            Pipeline::C0check => "c0check",
        }
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FoliationConfig {
    /// Leaves from the model's closed-form oracle.
    Oracle,
    /// Leaves read from a foliation file.
    File { path: PathBuf },
}

/// Declared tolerances; a pipeline exits 0 only if every applicable one holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Relative closedness tolerance for accepting leaves.
    pub closedness: f64,
    /// Allowed variation of `H` along a leaf.
    pub energy: f64,
    /// Bound on `‖ρ(T) − ρ(T/2)‖`.
    pub rotation: f64,
    pub rotation_gradient: f64,
    /// Leaf conjugacy defect `h∘f_t` against `h + tρ`.
    pub conjugacy: f64,
    /// Conjugation defect of the action-angle coordinates.
    pub conjugation: f64,
    pub symplecticity: f64,
    pub skew_residual: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            closedness: 1e-8,
            energy: 1e-8,
            rotation: 1e-8,
            rotation_gradient: 1e-5,
            conjugacy: 1e-5,
            conjugation: 1e-5,
            symplecticity: 1e-8,
            skew_residual: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RotationConfig {
    /// Number of time-1 iterates.
    pub horizon: usize,
    pub method: AveragingMethod,
}

impl Default for RotationConfig {
    fn default() -> Self {
        RotationConfig {
            horizon: 256,
            method: AveragingMethod::Weighted,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Flow times at which conjugacy defects are measured.
    pub times: Vec<f64>,
    /// Points per axis for leaf conjugacy defects.
    pub points_per_axis: usize,
    /// Random `(x, c)` samples for coordinate checks.
    pub coordinate_samples: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            times: vec![1.0, std::f64::consts::SQRT_2, 10.0],
            points_per_axis: 2,
            coordinate_samples: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApproxConfig {
    pub eps: Vec<f64>,
    pub compact: Compact,
    #[serde(default = "default_sympl_samples")]
    pub symplecticity_samples: usize,
}

fn default_sympl_samples() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeafSolveConfig {
    pub a: Vec<f64>,
    pub seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TupleConfig {
    pub expressions: Vec<String>,
    #[serde(default)]
    pub index: Option<usize>,
    pub window: Window,
    pub q_resolution: usize,
    pub p_resolution: usize,
    #[serde(default)]
    pub leaf: Option<LeafSolveConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub pipeline: Option<Pipeline>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub foliation: Option<FoliationConfig>,
    #[serde(default)]
    pub leaf_grid: Option<LeafGrid>,
    #[serde(default)]
    pub q_resolution: Option<usize>,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub rotation: RotationConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub approx: Option<ApproxConfig>,
    #[serde(default)]
    pub tuple: Option<TupleConfig>,
}

/// Configuration problems; all map to exit status 1.
#[derive(Debug)]
pub enum ConfigError {
    Io(String),
    Parse(String),
    BadGrid(String),
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(m) => write!(f, "I/O error: {m}"),
            ConfigError::Parse(m) => write!(f, "config error: {m}"),
            ConfigError::BadGrid(m) => write!(f, "BadGrid: {m}"),
            ConfigError::Invalid(m) => write!(f, "config error: {m}"),
        }
    }
}

fn power_of_two(name: &str, v: usize) -> Result<(), ConfigError> {
    if v.is_power_of_two() {
        Ok(())
    } else {
        Err(ConfigError::BadGrid(format!(
            "{name} = {v} is not a power of two"
        )))
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        // relative foliation paths are taken relative to the config file
        if let Some(FoliationConfig::File { path: p }) = &mut cfg.foliation {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Check the invariants the pipeline relies on before any work starts.
    pub fn validate(&self, pipeline: Pipeline) -> Result<(), ConfigError> {
        if let Some(q) = self.q_resolution {
            power_of_two("q_resolution", q)?;
        }
        if let Some(t) = &self.tuple {
            power_of_two("tuple.q_resolution", t.q_resolution)?;
        }
        let tol = &self.tolerances;
        let all = [
            tol.closedness,
            tol.energy,
            tol.rotation,
            tol.rotation_gradient,
            tol.conjugacy,
            tol.conjugation,
            tol.symplecticity,
            tol.skew_residual,
        ];
        if all.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(ConfigError::Invalid("tolerances must be positive".into()));
        }
        self.integrator
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if pipeline == Pipeline::C0check {
            if self.tuple.is_none() {
                return Err(ConfigError::Invalid(
                    "c0check needs a `tuple` section".into(),
                ));
            }
            return Ok(());
        }
        if self.model.is_none() {
            return Err(ConfigError::Invalid(format!(
                "{pipeline} needs a `model` section"
            )));
        }
        match &self.foliation {
            None | Some(FoliationConfig::Oracle) => {
                if self.leaf_grid.is_none() || self.q_resolution.is_none() {
                    return Err(ConfigError::Invalid(
                        "oracle foliations need `leaf_grid` and `q_resolution`".into(),
                    ));
                }
            }
            Some(FoliationConfig::File { path }) => {
                if !path.is_file() {
                    return Err(ConfigError::Io(format!(
                        "foliation file {} does not exist",
                        path.display()
                    )));
                }
            }
        }
        if let Some(lg) = &self.leaf_grid {
            lg.validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if pipeline == Pipeline::Approx && self.approx.is_none() {
            return Err(ConfigError::Invalid(
                "approx needs an `approx` section".into(),
            ));
        }
        if self.rotation.horizon < 2 {
            return Err(ConfigError::Invalid(
                "rotation horizon must be at least 2".into(),
            ));
        }
        if self.sampling.points_per_axis == 0 {
            return Err(ConfigError::Invalid(
                "sampling.points_per_axis must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> PipelineConfig {
        serde_json::from_str(text).unwrap()
    }

    #[test]
    fn pipeline_names_round_trip() {
        for name in [
            "analyze",
            "rotation",
            "conjugacy",
            "coords",
            "approx",
            "c0check",
        ] {
            assert_eq!(Pipeline::parse(name).unwrap().name(), name);
        }
        assert!(Pipeline::parse("plot").is_none());
    }

    #[test]
    fn q_resolution_must_be_power_of_two() {
        let cfg = parse(
            r#"{"model":{"n":2,"family":"twisted"},"leaf_grid":{"lo":[0,0],"hi":[1,1],"counts":[3,3]},"q_resolution":100}"#,
        );
        assert!(matches!(
            cfg.validate(Pipeline::Analyze),
            Err(ConfigError::BadGrid(_))
        ));
    }

    #[test]
    fn missing_sections_and_bad_tolerances() {
        let cfg = parse(r#"{"q_resolution":16}"#);
        assert!(matches!(
            cfg.validate(Pipeline::Rotation),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            cfg.validate(Pipeline::C0check),
            Err(ConfigError::Invalid(_))
        ));
        let cfg = parse(
            r#"{"model":{"n":2,"family":"twisted"},"leaf_grid":{"lo":[0,0],"hi":[1,1],"counts":[3,3]},"q_resolution":16,"tolerances":{"conjugation":-1}}"#,
        );
        assert!(matches!(
            cfg.validate(Pipeline::Coords),
            Err(ConfigError::Invalid(_))
        ));
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"unknown":1}"#).is_err());
    }
}
