//! Ranking-wise (IPS), position-wise (IIPS), prefix (RIPS), click-weighted
//! (CIPS) and click-weighted doubly robust (CDR) policy-value estimators.
//!
//! Every estimator is an average of per-record terms that are *affine in the
//! observed rewards*: `Σ_k w_k·C_k R_k + offset`, with `w` and `offset`
//! depending only on `(x, A)`. [`record_forms`] exposes that form so the
//! enumeration oracles can take exact expectations.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::{marginal_click_probs, EnvironmentModel};
use crate::error::{Error, Result};
use crate::models::{ClickRegressor, NoisyClickOracle, RewardPredictor};
use crate::policy::{MarginalConfig, PolicyPair, PolicySpec};
use crate::types::{ContextVector, LoggedDataset, LoggedRecord, Ranking};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    #[serde(alias = "IPS")]
    Ips,
    #[serde(alias = "IIPS")]
    Iips,
    #[serde(alias = "RIPS")]
    Rips,
    #[serde(alias = "CIPS")]
    Cips,
    #[serde(alias = "CDR")]
    Cdr,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] = [Self::Ips, Self::Iips, Self::Rips, Self::Cips, Self::Cdr];

    pub fn needs_clicks(self) -> bool {
        matches!(self, Self::Cips | Self::Cdr)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ips => "IPS",
            Self::Iips => "IIPS",
            Self::Rips => "RIPS",
            Self::Cips => "CIPS",
            Self::Cdr => "CDR",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    None,
    True,
    Estimated,
    Noisy,
}

impl fmt::Display for ProviderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::True => "true",
            Self::Estimated => "estimated",
            Self::Noisy => "noisy",
        })
    }
}

/// Display name used in reports: `CIPS (true CTR)` for the exact provider.
pub fn display_name(kind: EstimatorKind, provider: ProviderKind) -> String {
    match provider {
        ProviderKind::True => format!("{kind} (true CTR)"),
        _ => kind.to_string(),
    }
}

/// Source of `p_c(x, a, A)` and `p_c(x, a, π)`.
pub trait ClickProbProvider: Send + Sync {
    fn kind(&self) -> ProviderKind;
    /// `p_c(x, A(k), A)` at each slot.
    fn ranking_click_probs(&self, x: &ContextVector, ranking: &Ranking) -> Result<Vec<f64>>;
    /// `p_c(x, a, π)` for every action, plus an approximation flag.
    fn marginal_click_probs(
        &self,
        policy: &PolicySpec,
        x: &ContextVector,
        cfg: &MarginalConfig,
    ) -> Result<(Vec<f64>, bool)>;
    /// Floor applied to weight denominators; `None` for exact providers.
    fn floor(&self) -> Option<f64>;

    /// Everything CIPS/CDR need for one `(x, A)`.
    fn quantities(
        &self,
        pair: &PolicyPair,
        x: &ContextVector,
        ranking: &Ranking,
        cfg: &MarginalConfig,
    ) -> Result<ClickQuantities> {
        let (target, a1) = self.marginal_click_probs(&pair.target, x, cfg)?;
        let (logging, a2) = self.marginal_click_probs(&pair.logging, x, cfg)?;
        Ok(ClickQuantities {
            target,
            logging,
            at_slots: self.ranking_click_probs(x, ranking)?,
            approximate: a1 || a2,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClickQuantities {
    /// `p_c(x, a, π)` per action.
    pub target: Vec<f64>,
    /// `p_c(x, a, π_0)` per action.
    pub logging: Vec<f64>,
    /// `p_c(x, A(k), A)` per slot.
    pub at_slots: Vec<f64>,
    pub approximate: bool,
}

/// The environment's own click probabilities.
#[derive(Clone, Copy, Debug)]
pub struct TrueClicks<'a>(pub &'a dyn EnvironmentModel);

impl ClickProbProvider for TrueClicks<'_> {
    fn kind(&self) -> ProviderKind {
        ProviderKind::True
    }

    fn ranking_click_probs(&self, x: &ContextVector, ranking: &Ranking) -> Result<Vec<f64>> {
        self.0.click_probs(&self.0.context_terms(x)?, ranking)
    }

    fn marginal_click_probs(
        &self,
        policy: &PolicySpec,
        x: &ContextVector,
        cfg: &MarginalConfig,
    ) -> Result<(Vec<f64>, bool)> {
        marginal_click_probs(self.0, policy, x, cfg)
    }

    fn floor(&self) -> Option<f64> {
        None
    }
}

/// The regressor depends on the ranking only through each action's slot, so
/// `p̂_c(x, a, π) = Σ_k π(a at k | x)·p̂_c(x, a, k)`.
impl ClickProbProvider for ClickRegressor {
    fn kind(&self) -> ProviderKind {
        ProviderKind::Estimated
    }

    fn ranking_click_probs(&self, x: &ContextVector, ranking: &Ranking) -> Result<Vec<f64>> {
        let grid = self.predict_grid(x)?;
        Ok(ranking
            .slots()
            .iter()
            .enumerate()
            .map(|(slot, a)| grid[slot][a.index()])
            .collect())
    }

    fn marginal_click_probs(
        &self,
        policy: &PolicySpec,
        x: &ContextVector,
        cfg: &MarginalConfig,
    ) -> Result<(Vec<f64>, bool)> {
        let grid = self.predict_grid(x)?;
        marginal_from_grid(policy, x, &grid, cfg)
    }

    fn floor(&self) -> Option<f64> {
        Some(self.config.p_min)
    }

    fn quantities(
        &self,
        pair: &PolicyPair,
        x: &ContextVector,
        ranking: &Ranking,
        cfg: &MarginalConfig,
    ) -> Result<ClickQuantities> {
        let grid = self.predict_grid(x)?;
        let (target, a1) = marginal_from_grid(&pair.target, x, &grid, cfg)?;
        let (logging, a2) = marginal_from_grid(&pair.logging, x, &grid, cfg)?;
        Ok(ClickQuantities {
            target,
            logging,
            at_slots: ranking
                .slots()
                .iter()
                .enumerate()
                .map(|(slot, a)| grid[slot][a.index()])
                .collect(),
            approximate: a1 || a2,
        })
    }
}

fn marginal_from_grid(
    policy: &PolicySpec,
    x: &ContextVector,
    grid: &[Vec<f64>],
    cfg: &MarginalConfig,
) -> Result<(Vec<f64>, bool)> {
    let m = policy.position_marginals(x, cfg)?;
    let n = policy.action_count();
    let out = (0..n)
        .map(|a| (0..m.probs.len()).map(|k| m.probs[k][a] * grid[k][a]).sum())
        .collect();
    Ok((out, m.approximate))
}

/// Noisy truth depends on the whole ranking, so marginals enumerate rankings.
impl ClickProbProvider for NoisyClickOracle {
    fn kind(&self) -> ProviderKind {
        ProviderKind::Noisy
    }

    fn ranking_click_probs(&self, x: &ContextVector, ranking: &Ranking) -> Result<Vec<f64>> {
        self.ranking_probs(x, ranking)
    }

    fn marginal_click_probs(
        &self,
        policy: &PolicySpec,
        x: &ContextVector,
        cfg: &MarginalConfig,
    ) -> Result<(Vec<f64>, bool)> {
        let dist = policy.distribution(x, cfg)?;
        let mut out = vec![0.0; policy.action_count()];
        for (r, p) in &dist.items {
            for (a, q) in r.slots().iter().zip(self.ranking_probs(x, r)?) {
                out[a.index()] += p * q;
            }
        }
        Ok((out, dist.approximate))
    }

    fn floor(&self) -> Option<f64> {
        if self.delta == 0.0 {
            None
        } else {
            Some(self.p_min)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorOptions {
    /// Upper clip on per-slot weights.
    pub clip: Option<f64>,
    /// Self-normalize (CIPS only).
    pub self_normalize: bool,
}

/// One estimator to evaluate, with the auxiliary models its formula needs.
#[derive(Clone, Copy)]
pub struct EstimatorRequest<'a> {
    pub kind: EstimatorKind,
    pub clicks: Option<&'a dyn ClickProbProvider>,
    pub reward: Option<&'a dyn RewardPredictor>,
    pub options: EstimatorOptions,
}

impl<'a> EstimatorRequest<'a> {
    pub fn plain(kind: EstimatorKind) -> Self {
        Self {
            kind,
            clicks: None,
            reward: None,
            options: EstimatorOptions::default(),
        }
    }

    pub fn cips(clicks: &'a dyn ClickProbProvider) -> Self {
        Self {
            kind: EstimatorKind::Cips,
            clicks: Some(clicks),
            reward: None,
            options: EstimatorOptions::default(),
        }
    }

    pub fn cdr(clicks: &'a dyn ClickProbProvider, reward: &'a dyn RewardPredictor) -> Self {
        Self {
            kind: EstimatorKind::Cdr,
            clicks: Some(clicks),
            reward: Some(reward),
            options: EstimatorOptions::default(),
        }
    }

    pub fn provider_kind(&self) -> ProviderKind {
        self.clicks.map_or(ProviderKind::None, |c| c.kind())
    }

    pub fn name(&self) -> String {
        let mut name = display_name(self.kind, self.provider_kind());
        if let Some(c) = self.options.clip {
            name.push_str(&format!(" [clip {c}]"));
        }
        if self.options.self_normalize {
            name.push_str(" [SN]");
        }
        name
    }

    fn validate(&self) -> Result<()> {
        if self.kind.needs_clicks() && self.clicks.is_none() {
            return Err(Error::config(
                "estimators",
                format!("{} needs a click-probability provider", self.kind),
            ));
        }
        if self.kind == EstimatorKind::Cdr && self.reward.is_none() {
            return Err(Error::config("estimators", "CDR needs a reward model"));
        }
        if self.options.self_normalize && self.kind != EstimatorKind::Cips {
            return Err(Error::config(
                "estimators",
                "self-normalization is only offered for CIPS",
            ));
        }
        if let Some(c) = self.options.clip {
            if !(c > 0.0) {
                return Err(Error::config("estimators.clip", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Per-record estimator term `Σ_k w_k·C_k R_k + offset`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearForm {
    pub weights: Vec<f64>,
    pub offset: f64,
    /// Slots whose weight was forced to zero by a zero denominator.
    pub skipped: usize,
    /// `Σ_a p_c(x, a, π)` (CIPS only), the self-normalization numerator.
    pub click_mass: f64,
    pub approximate: bool,
}

impl LinearForm {
    pub fn term(&self, observed_rewards: &[f64]) -> f64 {
        self.offset
            + self
                .weights
                .iter()
                .zip(observed_rewards)
                .map(|(w, r)| w * r)
                .sum::<f64>()
    }

    /// `Σ_k w_k·C_k`.
    pub fn clicked_weight(&self, clicks: &[bool]) -> f64 {
        self.weights
            .iter()
            .zip(clicks)
            .filter(|(_, c)| **c)
            .map(|(w, _)| w)
            .sum()
    }
}

fn ratio(num: f64, den: f64, floor: Option<f64>, skipped: &mut usize) -> f64 {
    match floor {
        Some(f) => num / den.max(f),
        None if den > 0.0 => num / den,
        None => {
            *skipped += 1;
            0.0
        }
    }
}

fn clip(w: f64, options: &EstimatorOptions) -> f64 {
    options.clip.map_or(w, |c| w.min(c))
}

/// Lazily computed per-`(x, A)` policy quantities shared across requests.
struct Shared<'p> {
    pair: &'p PolicyPair,
    cfg: MarginalConfig,
    ranking_ratio: Option<(f64, f64)>,
    position: Option<(Vec<f64>, Vec<f64>, bool)>,
    prefix: Option<(Vec<f64>, Vec<f64>)>,
    clicks: Vec<(*const (), ClickQuantities)>,
}

impl Shared<'_> {
    fn ranking_ratio(&mut self, x: &ContextVector, r: &Ranking) -> Result<(f64, f64)> {
        if self.ranking_ratio.is_none() {
            self.ranking_ratio = Some((
                self.pair.target.ranking_probability(x, r)?,
                self.pair.logging.ranking_probability(x, r)?,
            ));
        }
        Ok(self.ranking_ratio.unwrap())
    }

    fn position(&mut self, x: &ContextVector, r: &Ranking) -> Result<&(Vec<f64>, Vec<f64>, bool)> {
        if self.position.is_none() {
            let t = self.pair.target.position_marginals(x, &self.cfg)?;
            let l = self.pair.logging.position_marginals(x, &self.cfg)?;
            let pick = |m: &crate::policy::PositionMarginals| -> Vec<f64> {
                r.slots()
                    .iter()
                    .enumerate()
                    .map(|(slot, a)| m.probs[slot][a.index()])
                    .collect()
            };
            self.position = Some((pick(&t), pick(&l), t.approximate || l.approximate));
        }
        Ok(self.position.as_ref().unwrap())
    }

    fn prefix(&mut self, x: &ContextVector, r: &Ranking) -> Result<&(Vec<f64>, Vec<f64>)> {
        if self.prefix.is_none() {
            let s = r.slots();
            let mut t = Vec::with_capacity(s.len());
            let mut l = Vec::with_capacity(s.len());
            for k in 1..=s.len() {
                t.push(self.pair.target.prefix_marginal(x, &s[..k])?);
                l.push(self.pair.logging.prefix_marginal(x, &s[..k])?);
            }
            self.prefix = Some((t, l));
        }
        Ok(self.prefix.as_ref().unwrap())
    }

    fn clicks(
        &mut self,
        provider: &dyn ClickProbProvider,
        x: &ContextVector,
        r: &Ranking,
    ) -> Result<&ClickQuantities> {
        let key = provider as *const dyn ClickProbProvider as *const ();
        if let Some(i) = self.clicks.iter().position(|(k, _)| *k == key) {
            return Ok(&self.clicks[i].1);
        }
        let q = provider.quantities(self.pair, x, r, &self.cfg)?;
        self.clicks.push((key, q));
        Ok(&self.clicks.last().unwrap().1)
    }
}

/// Per-record linear forms of every request at `(x, A)`.
pub fn record_forms(
    requests: &[EstimatorRequest<'_>],
    pair: &PolicyPair,
    x: &ContextVector,
    ranking: &Ranking,
    cfg: &MarginalConfig,
) -> Result<Vec<LinearForm>> {
    let k = ranking.len();
    let mut shared = Shared {
        pair,
        cfg: *cfg,
        ranking_ratio: None,
        position: None,
        prefix: None,
        clicks: Vec::new(),
    };
    let mut out = Vec::with_capacity(requests.len());
    for req in requests {
        let opts = &req.options;
        let mut skipped = 0;
        let form = match req.kind {
            EstimatorKind::Ips => {
                let (t, l) = shared.ranking_ratio(x, ranking)?;
                let w = clip(ratio(t, l, None, &mut skipped), opts);
                LinearForm {
                    weights: vec![w; k],
                    offset: 0.0,
                    skipped,
                    click_mass: 0.0,
                    approximate: false,
                }
            }
            EstimatorKind::Iips => {
                let (t, l, approx) = shared.position(x, ranking)?;
                let weights = t
                    .iter()
                    .zip(l)
                    .map(|(t, l)| clip(ratio(*t, *l, None, &mut skipped), opts))
                    .collect();
                LinearForm {
                    weights,
                    offset: 0.0,
                    skipped,
                    click_mass: 0.0,
                    approximate: *approx,
                }
            }
            EstimatorKind::Rips => {
                let (t, l) = shared.prefix(x, ranking)?;
                let weights = t
                    .iter()
                    .zip(l)
                    .map(|(t, l)| clip(ratio(*t, *l, None, &mut skipped), opts))
                    .collect();
                LinearForm {
                    weights,
                    offset: 0.0,
                    skipped,
                    click_mass: 0.0,
                    approximate: false,
                }
            }
            EstimatorKind::Cips | EstimatorKind::Cdr => {
                let provider = req.clicks.expect("validated");
                let floor = provider.floor();
                let q = shared.clicks(provider, x, ranking)?;
                let weights: Vec<f64> = ranking
                    .slots()
                    .iter()
                    .map(|a| {
                        let i = a.index();
                        clip(ratio(q.target[i], q.logging[i], floor, &mut skipped), opts)
                    })
                    .collect();
                let mut offset = 0.0;
                if req.kind == EstimatorKind::Cdr {
                    let q_hat = req.reward.expect("validated").predict_all(x)?;
                    let residual: f64 = ranking
                        .slots()
                        .iter()
                        .zip(&weights)
                        .zip(&q.at_slots)
                        .map(|((a, w), p)| w * p * q_hat[a.index()])
                        .sum();
                    let baseline: f64 = q.target.iter().zip(&q_hat).map(|(p, r)| p * r).sum();
                    offset = baseline - residual;
                }
                LinearForm {
                    weights,
                    offset,
                    skipped,
                    click_mass: q.target.iter().sum(),
                    approximate: q.approximate,
                }
            }
        };
        out.push(form);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimator: String,
    pub kind: EstimatorKind,
    pub provider: ProviderKind,
    pub estimate: f64,
    pub n: usize,
    pub skipped: usize,
    pub max_weight: f64,
    pub mean_weight: f64,
    pub approximate: bool,
}

/// Evaluates every request on `data` in one pass over the records.
pub fn estimate_batch(
    data: &LoggedDataset,
    pair: &PolicyPair,
    requests: &[EstimatorRequest<'_>],
    cfg: &MarginalConfig,
) -> Result<Vec<EstimateReport>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let forms = dataset_forms(data, pair, requests, cfg)?;
    Ok(reports_from_forms(data, requests, &forms))
}

/// `record_forms` for every record, in record order.
pub fn dataset_forms(
    data: &LoggedDataset,
    pair: &PolicyPair,
    requests: &[EstimatorRequest<'_>],
    cfg: &MarginalConfig,
) -> Result<Vec<Vec<LinearForm>>> {
    for r in requests {
        r.validate()?;
    }
    data.records
        .par_iter()
        .map(|rec| record_forms(requests, pair, &rec.context, &rec.ranking, cfg))
        .collect()
}

/// Reports from forms already computed by `dataset_forms`.
pub fn reports_from_forms(
    data: &LoggedDataset,
    requests: &[EstimatorRequest<'_>],
    forms: &[Vec<LinearForm>],
) -> Vec<EstimateReport> {
    requests
        .iter()
        .enumerate()
        .map(|(j, req)| summarize(req, &data.records, forms.iter().map(|f| &f[j])))
        .collect()
}

fn summarize<'f>(
    req: &EstimatorRequest<'_>,
    records: &[LoggedRecord],
    forms: impl Iterator<Item = &'f LinearForm>,
) -> EstimateReport {
    let n = records.len();
    let (mut total, mut skipped, mut approx) = (0.0, 0, false);
    let (mut w_max, mut w_sum, mut w_count) = (0.0f64, 0.0, 0usize);
    let (mut mass, mut clicked_w) = (0.0, 0.0);
    for (rec, f) in records.iter().zip(forms) {
        total += f.term(&rec.observed_rewards);
        skipped += f.skipped;
        approx |= f.approximate;
        for &w in &f.weights {
            w_max = w_max.max(w);
            w_sum += w;
            w_count += 1;
        }
        mass += f.click_mass;
        clicked_w += f.clicked_weight(&rec.clicks);
    }
    let mut estimate = total / n as f64;
    if req.options.self_normalize {
        estimate = if clicked_w > 0.0 {
            estimate * mass / clicked_w
        } else {
            0.0
        };
    }
    EstimateReport {
        estimator: req.name(),
        kind: req.kind,
        provider: req.provider_kind(),
        estimate,
        n,
        skipped,
        max_weight: w_max,
        mean_weight: if w_count > 0 {
            w_sum / w_count as f64
        } else {
            0.0
        },
        approximate: approx,
    }
}

pub fn estimate(
    data: &LoggedDataset,
    pair: &PolicyPair,
    request: EstimatorRequest<'_>,
    cfg: &MarginalConfig,
) -> Result<EstimateReport> {
    Ok(estimate_batch(data, pair, &[request], cfg)?.remove(0))
}

pub fn estimate_ips(data: &LoggedDataset, pair: &PolicyPair) -> Result<EstimateReport> {
    estimate(
        data,
        pair,
        EstimatorRequest::plain(EstimatorKind::Ips),
        &MarginalConfig::default(),
    )
}

pub fn estimate_iips(data: &LoggedDataset, pair: &PolicyPair) -> Result<EstimateReport> {
    estimate(
        data,
        pair,
        EstimatorRequest::plain(EstimatorKind::Iips),
        &MarginalConfig::default(),
    )
}

pub fn estimate_rips(data: &LoggedDataset, pair: &PolicyPair) -> Result<EstimateReport> {
    estimate(
        data,
        pair,
        EstimatorRequest::plain(EstimatorKind::Rips),
        &MarginalConfig::default(),
    )
}

pub fn estimate_cips(
    data: &LoggedDataset,
    pair: &PolicyPair,
    clicks: &dyn ClickProbProvider,
) -> Result<EstimateReport> {
    estimate(
        data,
        pair,
        EstimatorRequest::cips(clicks),
        &MarginalConfig::default(),
    )
}

pub fn estimate_cdr(
    data: &LoggedDataset,
    pair: &PolicyPair,
    clicks: &dyn ClickProbProvider,
    reward: &dyn RewardPredictor,
) -> Result<EstimateReport> {
    estimate(
        data,
        pair,
        EstimatorRequest::cdr(clicks, reward),
        &MarginalConfig::default(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{
        build_logging_policy, build_synthetic, build_target_policy, generate_logged_dataset,
        ContextSource, SyntheticConfig,
    };
    use crate::models::ZeroReward;
    use crate::rng::RngStream;
    use approx::assert_abs_diff_eq;

    fn world(
        alpha: f64,
    ) -> (
        crate::environment::SyntheticEnvironment,
        PolicyPair,
        LoggedDataset,
    ) {
        let env = build_synthetic(
            &SyntheticConfig {
                context_dim: 3,
                action_count: 4,
                ranking_length: 3,
                lambda: 0.0,
                reward_sigma: 1.0,
            },
            &RngStream::new(1),
        )
        .unwrap();
        let rng = RngStream::new(2);
        let logging = build_logging_policy(&env, alpha, &rng).unwrap();
        let target = build_target_policy(&env, 0.3).unwrap();
        let data =
            generate_logged_dataset(&env, &logging, 300, ContextSource::Environment, &rng).unwrap();
        (env, PolicyPair::new(logging, target).unwrap(), data)
    }

    #[test]
    fn on_policy_everything_is_the_sample_mean() {
        let (env, pair, data) = world(f64::NEG_INFINITY);
        let pair = PolicyPair::on_policy(pair.logging);
        let truth = TrueClicks(&env);
        let zero = ZeroReward { action_count: 4 };
        let reqs = [
            EstimatorRequest::plain(EstimatorKind::Ips),
            EstimatorRequest::plain(EstimatorKind::Iips),
            EstimatorRequest::plain(EstimatorKind::Rips),
            EstimatorRequest::cips(&truth),
            EstimatorRequest::cdr(&truth, &zero),
        ];
        let mean = data.mean_total_reward().unwrap();
        for r in estimate_batch(&data, &pair, &reqs, &MarginalConfig::default()).unwrap() {
            assert_abs_diff_eq!(r.estimate, mean, epsilon = 1e-12);
            assert_eq!(r.skipped, 0);
        }
    }

    #[test]
    fn zero_reward_model_collapses_cdr_to_cips() {
        let (env, pair, data) = world(f64::INFINITY);
        let truth = TrueClicks(&env);
        let zero = ZeroReward { action_count: 4 };
        let cips = estimate_cips(&data, &pair, &truth).unwrap();
        let cdr = estimate_cdr(&data, &pair, &truth, &zero).unwrap();
        assert_eq!(cips.estimate, cdr.estimate);
        assert_eq!(cdr.estimator, "CDR (true CTR)");
    }

    #[test]
    fn concatenation_is_size_weighted() {
        let (env, pair, data) = world(f64::NEG_INFINITY);
        let truth = TrueClicks(&env);
        let mut a = data.clone();
        let b_records = a.records.split_off(100);
        let mut b = data.clone();
        b.records = b_records;
        for req in [
            EstimatorRequest::plain(EstimatorKind::Ips),
            EstimatorRequest::plain(EstimatorKind::Rips),
            EstimatorRequest::cips(&truth),
        ] {
            let cfg = MarginalConfig::default();
            let all = estimate(&data, &pair, req, &cfg).unwrap().estimate;
            let ea = estimate(&a, &pair, req, &cfg).unwrap().estimate;
            let eb = estimate(&b, &pair, req, &cfg).unwrap().estimate;
            assert_abs_diff_eq!(all, (100.0 * ea + 200.0 * eb) / 300.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn missing_provider_is_a_config_error() {
        let (_, pair, data) = world(f64::INFINITY);
        let req = EstimatorRequest::plain(EstimatorKind::Cips);
        assert!(matches!(
            estimate(&data, &pair, req, &MarginalConfig::default()),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn clipping_and_self_normalization() {
        let (env, pair, data) = world(f64::INFINITY);
        let truth = TrueClicks(&env);
        let cfg = MarginalConfig::default();
        let plain = estimate(&data, &pair, EstimatorRequest::cips(&truth), &cfg).unwrap();
        let mut clipped = EstimatorRequest::cips(&truth);
        clipped.options.clip = Some(1.0);
        let c = estimate(&data, &pair, clipped, &cfg).unwrap();
        assert!(c.max_weight <= 1.0);
        assert!(plain.max_weight > 1.0);
        let mut sn = EstimatorRequest::cips(&truth);
        sn.options.self_normalize = true;
        let s = estimate(&data, &pair, sn, &cfg).unwrap();
        assert!(s.estimate.is_finite());
        assert_eq!(s.estimator, "CIPS (true CTR) [SN]");
        let mut bad = EstimatorRequest::plain(EstimatorKind::Ips);
        bad.options.self_normalize = true;
        assert!(estimate(&data, &pair, bad, &cfg).is_err());
    }

    #[test]
    fn report_serializes() {
        let (_, pair, data) = world(f64::INFINITY);
        let r = estimate_ips(&data, &pair).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        let back: EstimateReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
