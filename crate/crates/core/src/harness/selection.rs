use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::sweep::{prepare_grid_point, runs_stream};
use crate::analysis::policy_selection_accuracy;
use crate::environment::true_policy_value;
use crate::error::Result;

/// Selection accuracy of one estimator (or control) at one grid value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub sweep_value: f64,
    pub estimator: String,
    pub trials: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub target_value: f64,
    pub logging_value: f64,
}

/// Policy-selection accuracy per estimator per grid value; `data.seeds` is
/// the number of trials. Includes the `oracle` and `coin-flip` controls.
pub fn run_selection(cfg: &ExperimentConfig) -> Result<Vec<SelectionRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for value in cfg.sweep.grid() {
        let p = prepare_grid_point(cfg, value)?;
        let m = &cfg.pipeline.marginal;
        let v = true_policy_value(p.env.as_ref(), &p.pair.target, &p.contexts, m)?;
        let v0 = true_policy_value(p.env.as_ref(), &p.pair.logging, &p.contexts, m)?;
        let result = policy_selection_accuracy(
            &p.specs,
            &p.env,
            &p.pair,
            (v, v0),
            p.n,
            cfg.data.seeds,
            &cfg.pipeline,
            &runs_stream(cfg),
        )?;
        rows.extend(result.entries.into_iter().map(|e| SelectionRow {
            sweep_value: value,
            estimator: e.estimator,
            trials: result.trials,
            correct: e.correct,
            accuracy: e.accuracy,
            target_value: v,
            logging_value: v0,
        }));
    }
    Ok(rows)
}
