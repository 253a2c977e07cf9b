use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::config::{EnvironmentConfig, ExperimentConfig, PolicyRecipe, SweepAxis};
use crate::analysis::{
    fingerprint, metric_triple, run_seeds, EstimatorSpec, MetricTriple, ProviderSpec, RewardSpec,
};
use crate::environment::{
    build_alternate_policies, build_logging_policy, build_semisynthetic, build_synthetic,
    build_target_policy, evaluation_contexts, load_interaction_matrix, true_policy_value,
    EnvironmentModel, SemiSyntheticEnvironment, SyntheticEnvironment,
};
use crate::error::Result;
use crate::policy::{PolicyKind, PolicyPair};
use crate::rng::RngStream;
use crate::types::ContextVector;

/// One CSV row: an estimator's normalized metrics at one grid value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub sweep_value: f64,
    pub estimator: String,
    pub provider: String,
    pub mse: f64,
    pub mse_lo: f64,
    pub mse_hi: f64,
    pub bias2: f64,
    pub bias2_lo: f64,
    pub bias2_hi: f64,
    pub var: f64,
    pub var_lo: f64,
    pub var_hi: f64,
    pub seeds: usize,
    pub seconds: f64,
}

/// Digests of the random draws that must not change along the sweep axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFingerprint {
    pub sweep_value: f64,
    pub environment_draws: String,
    pub evaluation_contexts: String,
    pub logging_score: String,
}

/// Deterministic-user fraction at one threshold value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisNote {
    pub sweep_value: f64,
    /// `Φ(α)`: probability that a standard-normal first context coordinate
    /// falls at or below the threshold.
    pub deterministic_fraction: f64,
    /// The same fraction measured on the evaluation contexts.
    pub empirical_fraction: f64,
}

/// Everything computed at one grid value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub sweep_value: f64,
    pub n: usize,
    pub target_value: f64,
    pub logging_value: f64,
    pub estimators: Vec<String>,
    pub metrics: Vec<MetricTriple>,
    pub seconds: f64,
}

/// Reproduction record: with the same manifest a rerun produces identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub master_seed: u64,
    pub code_version: String,
    /// Random substreams, as `seed/label/...` paths.
    pub substreams: Vec<String>,
    pub fingerprints: Vec<GridFingerprint>,
    /// SHA-256 of every emitted file (filled in by `emit_outputs`).
    #[serde(default)]
    pub output_digests: std::collections::BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub rows: Vec<ResultRow>,
    pub points: Vec<SweepPoint>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub axis_notes: Vec<AxisNote>,
    pub manifest: RunManifest,
}

impl SweepReport {
    /// Metrics of the estimator named `name` at every grid value.
    pub fn series(&self, name: &str) -> Vec<(f64, &MetricTriple)> {
        self.points
            .iter()
            .filter_map(|p| {
                p.estimators
                    .iter()
                    .position(|e| e == name)
                    .map(|j| (p.sweep_value, &p.metrics[j]))
            })
            .collect()
    }
}

/// `Φ(α)` of the standard normal.
pub fn deterministic_user_fraction(alpha: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").cdf(alpha)
}

#[derive(Clone, Debug)]
pub(crate) enum World {
    Synthetic(SyntheticEnvironment),
    Semi(SemiSyntheticEnvironment),
}

impl World {
    fn model(&self) -> Arc<dyn EnvironmentModel> {
        match self {
            World::Synthetic(e) => Arc::new(e.clone()),
            World::Semi(e) => Arc::new(e.clone()),
        }
    }

    fn draws_fingerprint(&self) -> String {
        match self {
            World::Synthetic(e) => fingerprint(&(
                &e.w_c,
                &e.w_r,
                &e.m_c,
                &e.m_r,
                (&e.theta_c_x, &e.theta_r_x, &e.theta_c_a, &e.theta_r_a),
            )),
            World::Semi(e) => fingerprint(&(&e.reward_matrix, &e.eta_matrix, &e.contexts)),
        }
    }
}

/// A fully materialized grid point: everything `run_sweep` evaluates at one
/// axis value.
pub struct GridPoint {
    pub env: Arc<dyn EnvironmentModel>,
    pub pair: PolicyPair,
    pub specs: Vec<EstimatorSpec>,
    pub n: usize,
    pub contexts: Vec<ContextVector>,
    pub fingerprint: GridFingerprint,
}

pub(crate) fn root_stream(cfg: &ExperimentConfig) -> RngStream {
    RngStream::new(cfg.data.master_seed)
}

/// Parent stream of the per-seed pipelines, as used by `run_sweep`.
pub fn runs_stream(cfg: &ExperimentConfig) -> RngStream {
    root_stream(cfg).derive("runs")
}

fn base_world(cfg: &ExperimentConfig, value: f64, root: &RngStream) -> Result<World> {
    let axis = cfg.sweep.axis;
    Ok(match &cfg.environment {
        EnvironmentConfig::Synthetic(s) => {
            let mut env = build_synthetic(s, root)?;
            match axis {
                SweepAxis::K => env = env.with_ranking_length(value as usize)?,
                SweepAxis::Lambda => env = env.with_lambda(value),
                _ => {}
            }
            World::Synthetic(env)
        }
        EnvironmentConfig::SemiSynthetic {
            path,
            features,
            subsample,
            config,
        } => {
            let matrix = load_interaction_matrix(path, features.as_deref(), *subsample, root)?;
            let mut c = config.clone();
            if axis == SweepAxis::K {
                c.ranking_length = value as usize;
            }
            World::Semi(build_semisynthetic(&matrix, &c, root)?)
        }
    })
}

pub fn prepare_grid_point(cfg: &ExperimentConfig, value: f64) -> Result<GridPoint> {
    let root = root_stream(cfg);
    let axis = cfg.sweep.axis;
    let world = base_world(cfg, value, &root)?;
    let env = world.model();
    let alpha = if axis == SweepAxis::Alpha {
        value
    } else {
        cfg.policy.alpha
    };
    let epsilon = if axis == SweepAxis::Epsilon {
        value
    } else {
        cfg.policy.epsilon
    };
    let (logging, target) = match cfg.policy.recipe {
        PolicyRecipe::Standard => (
            build_logging_policy(env.as_ref(), alpha, &root)?,
            build_target_policy(env.as_ref(), epsilon)?,
        ),
        PolicyRecipe::Alternate { mixture_weight } => {
            build_alternate_policies(env.as_ref(), alpha, epsilon, mixture_weight, &root)?
        }
    };
    let logging_score = match &logging.kind {
        PolicyKind::ThresholdMixed { score, .. } => fingerprint(score),
        other => fingerprint(other),
    };
    let specs = cfg
        .estimators
        .iter()
        .map(|s| {
            let mut s = *s;
            match (axis, &mut s.provider, &mut s.reward) {
                (SweepAxis::Delta, ProviderSpec::Noisy { delta }, _) => *delta = value,
                (SweepAxis::RewardNoise, _, RewardSpec::Oracle { amplitude }) => *amplitude = value,
                _ => {}
            }
            s
        })
        .collect();
    let contexts = evaluation_contexts(env.as_ref(), cfg.data.evaluation_contexts, &root);
    let fingerprint = GridFingerprint {
        sweep_value: value,
        environment_draws: world.draws_fingerprint(),
        evaluation_contexts: fingerprint(&contexts),
        logging_score,
    };
    Ok(GridPoint {
        env,
        pair: PolicyPair::new(logging, target)?,
        specs,
        n: if axis == SweepAxis::N {
            value as usize
        } else {
            cfg.data.n
        },
        contexts,
        fingerprint,
    })
}

pub(crate) fn substreams(cfg: &ExperimentConfig) -> Vec<String> {
    let root = root_stream(cfg);
    let mut out: Vec<String> = [
        root.derive("synthetic-environment"),
        root.derive("eta"),
        root.derive("subsample"),
        root.derive("logging-score"),
        root.derive("alternate-offsets"),
        root.derive("evaluation-contexts"),
        root.derive("runs")
            .derive("seed")
            .derive("<i>")
            .derive("contexts"),
        root.derive("runs")
            .derive("seed")
            .derive("<i>")
            .derive("rankings"),
        root.derive("runs")
            .derive("seed")
            .derive("<i>")
            .derive("clicks"),
        root.derive("runs")
            .derive("seed")
            .derive("<i>")
            .derive("rewards"),
        root.derive("runs")
            .derive("seed")
            .derive("<i>")
            .derive("click-model-init"),
        root.derive("runs")
            .derive("seed")
            .derive("<i>")
            .derive("click-noise"),
        root.derive("runs")
            .derive("seed")
            .derive("<i>")
            .derive("reward-noise"),
        root.derive("metrics")
            .derive("<estimator>")
            .derive("bootstrap"),
    ]
    .iter()
    .map(|s| s.path_string())
    .collect();
    out.dedup();
    out
}

/// Runs every grid value of the configured axis and summarizes each
/// estimator's normalized MSE, squared bias and variance.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let root = root_stream(cfg);
    let mut points = Vec::new();
    let mut rows = Vec::new();
    let mut fingerprints = Vec::new();
    let mut axis_notes = Vec::new();
    for value in cfg.sweep.grid() {
        let started = Instant::now();
        let p = prepare_grid_point(cfg, value)?;
        let marginal = &cfg.pipeline.marginal;
        let target_value =
            true_policy_value(p.env.as_ref(), &p.pair.target, &p.contexts, marginal)?;
        let logging_value =
            true_policy_value(p.env.as_ref(), &p.pair.logging, &p.contexts, marginal)?;
        let outcomes = run_seeds(
            &p.specs,
            &p.env,
            &p.pair,
            p.n,
            cfg.data.seeds,
            &cfg.pipeline,
            &runs_stream(cfg),
        )?;
        let metrics = (0..p.specs.len())
            .map(|j| {
                let estimates: Vec<f64> = outcomes.iter().map(|o| o.estimates[j]).collect();
                metric_triple(&estimates, target_value, &root.derive("metrics").derive(j))
            })
            .collect::<Result<Vec<_>>>()?;
        let seconds = if cfg.output.timings {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        };
        for (spec, m) in p.specs.iter().zip(&metrics) {
            rows.push(ResultRow {
                sweep_value: value,
                estimator: spec.name(),
                provider: spec.provider.kind().to_string(),
                mse: m.mse,
                mse_lo: m.mse_ci.lower,
                mse_hi: m.mse_ci.upper,
                bias2: m.squared_bias,
                bias2_lo: m.squared_bias_ci.lower,
                bias2_hi: m.squared_bias_ci.upper,
                var: m.variance,
                var_lo: m.variance_ci.lower,
                var_hi: m.variance_ci.upper,
                seeds: m.seeds,
                seconds,
            });
        }
        if cfg.sweep.axis == SweepAxis::Alpha {
            let below = p.contexts.iter().filter(|x| x.first() <= value).count();
            axis_notes.push(AxisNote {
                sweep_value: value,
                deterministic_fraction: deterministic_user_fraction(value),
                empirical_fraction: below as f64 / p.contexts.len() as f64,
            });
        }
        fingerprints.push(p.fingerprint);
        points.push(SweepPoint {
            sweep_value: value,
            n: p.n,
            target_value,
            logging_value,
            estimators: p.specs.iter().map(|s| s.name()).collect(),
            metrics,
            seconds,
        });
    }
    Ok(SweepReport {
        axis: cfg.sweep.axis,
        rows,
        points,
        axis_notes,
        manifest: RunManifest {
            config: cfg.clone(),
            master_seed: cfg.data.master_seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            substreams: substreams(cfg),
            fingerprints,
            output_digests: Default::default(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::EstimatorSpec;
    use crate::environment::SyntheticConfig;
    use crate::estimators::EstimatorKind;
    use crate::harness::config::SweepConfig;

    fn small(axis: SweepAxis, values: Vec<f64>) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.environment = EnvironmentConfig::Synthetic(SyntheticConfig {
            context_dim: 3,
            action_count: 4,
            ranking_length: 3,
            ..SyntheticConfig::default()
        });
        c.data.n = 60;
        c.data.seeds = 4;
        c.data.evaluation_contexts = 300;
        c.estimators = vec![
            EstimatorSpec::plain(EstimatorKind::Ips),
            EstimatorSpec::cips(ProviderSpec::True),
        ];
        c.sweep = SweepConfig {
            axis,
            values: Some(values),
        };
        c.output.timings = false;
        c
    }

    #[test]
    fn one_row_per_value_and_estimator() {
        let r = run_sweep(&small(SweepAxis::N, vec![30.0, 60.0])).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert_eq!(r.points[1].n, 60);
        for row in &r.rows {
            assert!((row.mse - row.bias2 - row.var).abs() < 1e-10 * row.mse.max(1.0));
        }
    }

    #[test]
    fn non_axis_draws_are_shared_across_the_grid() {
        for (axis, values) in [
            (SweepAxis::Lambda, vec![0.0, 1.0]),
            (SweepAxis::Alpha, vec![-1.0, 1.0]),
            (SweepAxis::K, vec![2.0, 3.0]),
        ] {
            let r = run_sweep(&small(axis, values)).unwrap();
            let f = &r.manifest.fingerprints;
            assert_eq!(f[0].environment_draws, f[1].environment_draws, "{axis}");
            assert_eq!(f[0].evaluation_contexts, f[1].evaluation_contexts, "{axis}");
            assert_eq!(f[0].logging_score, f[1].logging_score, "{axis}");
        }
    }

    #[test]
    fn alpha_notes_follow_the_normal_cdf() {
        let r = run_sweep(&small(SweepAxis::Alpha, vec![-1.5, 0.0, 1.5])).unwrap();
        let f: Vec<f64> = r
            .axis_notes
            .iter()
            .map(|n| n.deterministic_fraction)
            .collect();
        assert!(
            (f[0] - 0.0668).abs() < 1e-3
                && (f[1] - 0.5).abs() < 1e-12
                && (f[2] - 0.9332).abs() < 1e-3
        );
        for n in &r.axis_notes {
            assert!((n.empirical_fraction - n.deterministic_fraction).abs() < 0.1);
        }
    }

    #[test]
    fn normal_cdf_matches_reference_values() {
        let grid = [-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5];
        let rounded: Vec<f64> = grid
            .iter()
            .map(|a| (deterministic_user_fraction(*a) * 100.0).round() / 100.0)
            .collect();
        assert_eq!(rounded, vec![0.07, 0.16, 0.31, 0.5, 0.69, 0.84, 0.93]);
    }
}
