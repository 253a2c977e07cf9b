use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::analysis::{EstimatorSpec, PipelineConfig, ProviderSpec, RewardSpec};
use crate::environment::{SemiSyntheticConfig, Subsample, SyntheticConfig};
use crate::error::{Error, Result};
use crate::estimators::EstimatorKind;
use crate::policy::extended_real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvironmentConfig {
    Synthetic(SyntheticConfig),
    SemiSynthetic {
        /// CSV interaction matrix: header row of action ids, first column row ids.
        path: PathBuf,
        /// Optional per-row feature CSV (same layout, same row order).
        #[serde(default)]
        features: Option<PathBuf>,
        #[serde(default)]
        subsample: Option<Subsample>,
        #[serde(flatten)]
        config: SemiSyntheticConfig,
    },
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        EnvironmentConfig::Synthetic(SyntheticConfig::default())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyRecipe {
    /// Threshold-mixed logging over a random linear score; ε-greedy target
    /// over the value score.
    #[default]
    Standard,
    /// Click score plus per-action normal offsets for logging; mixture of
    /// ε-greedy and softmax as target.
    Alternate { mixture_weight: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    /// Plackett–Luce above this context threshold, greedy below (`"inf"` = always greedy).
    #[serde(with = "extended_real")]
    pub alpha: f64,
    pub epsilon: f64,
    pub recipe: PolicyRecipe,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            alpha: f64::INFINITY,
            epsilon: 0.3,
            recipe: PolicyRecipe::Standard,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n: usize,
    pub seeds: usize,
    pub master_seed: u64,
    /// Contexts used to compute `V(π)` (continuous-context environments).
    pub evaluation_contexts: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            seeds: 100,
            master_seed: 12345,
            evaluation_contexts: crate::environment::EVALUATION_CONTEXTS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SweepAxis {
    #[serde(rename = "n")]
    N,
    K,
    #[serde(rename = "lambda")]
    Lambda,
    #[serde(rename = "alpha")]
    Alpha,
    #[serde(rename = "epsilon")]
    Epsilon,
    #[serde(rename = "delta")]
    Delta,
    #[serde(rename = "reward_noise")]
    RewardNoise,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::N => "n",
            SweepAxis::K => "K",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::Delta => "delta",
            SweepAxis::RewardNoise => "reward_noise",
        })
    }
}

/// Default grid of each axis.
pub fn default_grid(axis: SweepAxis) -> Vec<f64> {
    match axis {
        SweepAxis::N => vec![500.0, 1000.0, 2000.0, 4000.0],
        SweepAxis::K => vec![2.0, 3.0, 4.0, 5.0, 6.0],
        SweepAxis::Lambda => vec![0.0, 0.25, 0.5, 0.75, 1.0],
        SweepAxis::Alpha => vec![-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5],
        SweepAxis::Epsilon => vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        SweepAxis::Delta => vec![0.0, 0.05, 0.1, 0.2, 0.3],
        SweepAxis::RewardNoise => vec![0.0, 1.0, 2.0, 5.0, 10.0],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    /// Grid values; the axis default when omitted.
    #[serde(default)]
    pub values: Option<Vec<f64>>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            axis: SweepAxis::N,
            values: None,
        }
    }
}

impl SweepConfig {
    pub fn grid(&self) -> Vec<f64> {
        self.values
            .clone()
            .unwrap_or_else(|| default_grid(self.axis))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
    Svg,
    All,
}

impl OutputFormat {
    pub fn includes(self, other: OutputFormat) -> bool {
        self == OutputFormat::All || self == other
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub format: OutputFormat,
    /// Record wall-clock seconds per row; disable for byte-reproducible files.
    pub timings: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("results"),
            format: OutputFormat::All,
            timings: true,
        }
    }
}

fn default_estimators() -> Vec<EstimatorSpec> {
    vec![
        EstimatorSpec::plain(EstimatorKind::Ips),
        EstimatorSpec::plain(EstimatorKind::Iips),
        EstimatorSpec::plain(EstimatorKind::Rips),
        EstimatorSpec::cips(ProviderSpec::Estimated),
        EstimatorSpec::cips(ProviderSpec::True),
    ]
}

/// A complete experiment: world, policies, data sizes, estimators and one sweep axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub environment: EnvironmentConfig,
    pub policy: PolicyConfig,
    pub data: DataConfig,
    pub estimators: Vec<EstimatorSpec>,
    pub sweep: SweepConfig,
    pub pipeline: PipelineConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            environment: EnvironmentConfig::default(),
            policy: PolicyConfig::default(),
            data: DataConfig::default(),
            estimators: default_estimators(),
            sweep: SweepConfig::default(),
            pipeline: PipelineConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config {
            field: format!("line {} column {}", e.line(), e.column()),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a JSON config; relative data paths resolve against the file's
    /// directory.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut cfg = Self::from_json(&text)?;
        if let (
            EnvironmentConfig::SemiSynthetic {
                path: data,
                features,
                ..
            },
            Some(dir),
        ) = (&mut cfg.environment, path.parent())
        {
            for p in std::iter::once(data).chain(features.as_mut()) {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.environment {
            EnvironmentConfig::Synthetic(s) => {
                s.validate().map_err(|e| prefix("environment", e))?
            }
            EnvironmentConfig::SemiSynthetic { config, .. } => {
                if config.d_reduced == 0 {
                    return Err(Error::config("environment.d_reduced", "must be positive"));
                }
                if !(config.reward_sigma > 0.0) {
                    return Err(Error::config("environment.reward_sigma", "must be > 0"));
                }
            }
        }
        let p = &self.policy;
        if !(0.0..=1.0).contains(&p.epsilon) {
            return Err(Error::config("policy.epsilon", "must lie in [0, 1]"));
        }
        if p.alpha.is_nan() {
            return Err(Error::config("policy.alpha", "must be a number or ±inf"));
        }
        if let PolicyRecipe::Alternate { mixture_weight } = p.recipe {
            if !(0.0..=1.0).contains(&mixture_weight) {
                return Err(Error::config("policy.mixture_weight", "must lie in [0, 1]"));
            }
        }
        if self.data.n == 0 {
            return Err(Error::config("data.n", "must be positive"));
        }
        if self.data.seeds < 2 {
            return Err(Error::config("data.seeds", "need at least two seeds"));
        }
        if self.data.evaluation_contexts == 0 {
            return Err(Error::config(
                "data.evaluation_contexts",
                "must be positive",
            ));
        }
        if self.estimators.is_empty() {
            return Err(Error::config(
                "estimators",
                "at least one estimator is required",
            ));
        }
        for (i, e) in self.estimators.iter().enumerate() {
            e.validate()
                .map_err(|err| prefix(&format!("estimators[{i}]"), err))?;
        }
        self.pipeline
            .click_model
            .validate()
            .map_err(|e| prefix("pipeline", e))?;
        self.validate_sweep()
    }

    fn validate_sweep(&self) -> Result<()> {
        let grid = self.sweep.grid();
        let field = format!("sweep.values ({})", self.sweep.axis);
        if grid.is_empty() {
            return Err(Error::config(field, "grid is empty"));
        }
        let semi = matches!(self.environment, EnvironmentConfig::SemiSynthetic { .. });
        for &v in &grid {
            let bad = |reason: &str| Err(Error::config(field.clone(), format!("{v}: {reason}")));
            match self.sweep.axis {
                SweepAxis::N if !(v >= 1.0 && v.fract() == 0.0) => {
                    return bad("must be a positive integer")
                }
                SweepAxis::K => {
                    let n_a = match &self.environment {
                        EnvironmentConfig::Synthetic(s) => s.action_count as f64,
                        EnvironmentConfig::SemiSynthetic { subsample, .. } => {
                            subsample.map_or(f64::INFINITY, |s| s.cols as f64)
                        }
                    };
                    if !(v >= 1.0 && v.fract() == 0.0 && v <= n_a) {
                        return bad("must be an integer in [1, |A|]");
                    }
                }
                SweepAxis::Lambda if semi => {
                    return bad("the semi-synthetic world has no interaction strength")
                }
                SweepAxis::Lambda if !(v >= 0.0 && v.is_finite()) => {
                    return bad("must be finite and ≥ 0")
                }
                SweepAxis::Alpha if v.is_nan() => return bad("must be a number or ±inf"),
                SweepAxis::Epsilon if !(0.0..=1.0).contains(&v) => {
                    return bad("must lie in [0, 1]")
                }
                SweepAxis::Delta if !(0.0..=1.0).contains(&v) => return bad("must lie in [0, 1]"),
                SweepAxis::RewardNoise if !(v >= 0.0 && v.is_finite()) => {
                    return bad("must be finite and ≥ 0")
                }
                _ => {}
            }
        }
        let uses = |pred: &dyn Fn(&EstimatorSpec) -> bool| self.estimators.iter().any(pred);
        match self.sweep.axis {
            SweepAxis::Delta if !uses(&|e| matches!(e.provider, ProviderSpec::Noisy { .. })) => {
                Err(Error::config(
                    field,
                    "a delta sweep needs an estimator with a noisy provider",
                ))
            }
            SweepAxis::RewardNoise
                if !uses(&|e| {
                    e.estimator == EstimatorKind::Cdr
                        && matches!(e.reward, RewardSpec::Oracle { .. })
                }) =>
            {
                Err(Error::config(
                    field,
                    "a reward_noise sweep needs a CDR estimator with an oracle reward model",
                ))
            }
            _ => Ok(()),
        }
    }
}

fn prefix(path: &str, e: Error) -> Error {
    match e {
        Error::Config { field, reason } => Error::Config {
            field: format!("{path}.{field}"),
            reason,
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_reference_setting() {
        let c = ExperimentConfig::default();
        let EnvironmentConfig::Synthetic(s) = &c.environment else {
            panic!("synthetic by default")
        };
        assert_eq!((c.data.n, s.action_count, s.ranking_length), (1000, 6, 6));
        assert_eq!(s.lambda, 0.5);
        assert_eq!(c.policy.alpha, f64::INFINITY);
        assert_eq!(c.policy.epsilon, 0.3);
        assert_eq!(c.data.seeds, 100);
        c.validate().unwrap();
    }

    #[test]
    fn load_resolves_data_paths_next_to_the_config() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("semi.json");
        std::fs::write(
            &file,
            r#"{"environment": {"kind": "semi_synthetic", "path": "m.csv", "features": "/abs/f.csv"}}"#,
        )
        .unwrap();
        let c = ExperimentConfig::load(&file).unwrap();
        let EnvironmentConfig::SemiSynthetic { path, features, .. } = c.environment else {
            panic!("semi-synthetic")
        };
        assert_eq!(path, dir.path().join("m.csv"));
        assert_eq!(features, Some(PathBuf::from("/abs/f.csv")));
        assert!(matches!(
            ExperimentConfig::load(&dir.path().join("missing.json")),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn empty_object_is_the_default() {
        assert_eq!(
            ExperimentConfig::from_json("{}").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn json_roundtrip_keeps_infinite_alpha() {
        let c = ExperimentConfig::default();
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert!(text.contains("\"inf\""));
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), c);
    }

    #[test]
    fn field_paths_in_errors() {
        let err = ExperimentConfig::from_json(r#"{"policy": {"epsilon": 2}}"#).unwrap_err();
        assert!(err.to_string().contains("policy.epsilon"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"environment": {"kind": "synthetic", "K": 9}}"#)
            .unwrap_err();
        assert!(err.to_string().contains("environment.K"), "{err}");
        let err =
            ExperimentConfig::from_json(r#"{"sweep": {"axis": "K", "values": [7]}}"#).unwrap_err();
        assert!(err.to_string().contains("sweep.values"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"sweep": {"axis": "delta"}}"#).unwrap_err();
        assert!(err.to_string().contains("noisy provider"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"data": {"seeds": 1}}"#).unwrap_err();
        assert!(err.to_string().contains("data.seeds"), "{err}");
    }

    #[test]
    fn estimator_specs_parse() {
        let c = ExperimentConfig::from_json(
            r#"{"estimators": [
                {"estimator": "IPS"},
                {"estimator": "CIPS", "provider": {"kind": "noisy", "delta": 0.1}},
                {"estimator": "CDR", "provider": {"kind": "true"}, "reward": {"kind": "oracle", "amplitude": 5}}
            ], "sweep": {"axis": "delta", "values": [0, 0.1]}}"#,
        )
        .unwrap();
        assert_eq!(c.estimators.len(), 3);
        assert_eq!(c.estimators[1].provider, ProviderSpec::Noisy { delta: 0.1 });
    }
}
