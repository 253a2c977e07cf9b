//! Exact oracles, closed-form bias/variance evaluators and the empirical
//! MSE machinery.
//!
//! Every estimator is affine in the observed censored rewards once `(x, A)`
//! is fixed (see [`LinearForm`]), so exact moments only need the click
//! configuration distribution at each logged ranking; reward noise enters
//! through conditional means and variances.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::environment::{
    generate_logged_dataset, marginal_click_probs, ContextSource, EnvironmentModel,
};
use crate::error::{Error, Result};
use crate::estimators::{
    dataset_forms, record_forms, reports_from_forms, ClickProbProvider, EstimatorKind,
    EstimatorOptions, EstimatorRequest, LinearForm, ProviderKind, TrueClicks,
};
use crate::models::{
    ClickModelConfig, ClickRegressor, NoisyClickOracle, NoisyRewardOracle, RewardModelConfig,
    RewardPredictor, RewardRegressor, ZeroReward,
};
use crate::policy::{MarginalConfig, PolicyPair};
use crate::rng::RngStream;
use crate::types::{ContextVector, LoggedDataset};

/// Largest ranking length whose `2^K` click configurations are enumerated.
pub const MAX_ENUMERATED_K: usize = 16;

/// Short hex digest of any serializable value.
pub fn fingerprint<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).unwrap_or_default();
    let digest = Sha256::digest(&bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Enumeration oracle
// ---------------------------------------------------------------------------

/// Exact first two moments of a single-record estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleMoments {
    pub mean: f64,
    /// Variance of one record's term; an `n`-record average has `variance / n`.
    pub variance: f64,
}

impl OracleMoments {
    pub fn variance_at(&self, n: usize) -> f64 {
        self.variance / n as f64
    }
}

fn check_linear(requests: &[EstimatorRequest<'_>]) -> Result<()> {
    if requests.iter().any(|r| r.options.self_normalize) {
        return Err(Error::config(
            "estimators",
            "self-normalized estimates are not affine in the rewards; the oracle cannot evaluate them",
        ));
    }
    Ok(())
}

/// Exact mean and single-record variance of every request by summing over
/// contexts (uniform) × logged rankings (weighted by `π_0`) × click
/// configurations (independent Bernoulli masses).
pub fn brute_force_moments(
    requests: &[EstimatorRequest<'_>],
    env: &dyn EnvironmentModel,
    pair: &PolicyPair,
    contexts: &[ContextVector],
    cfg: &MarginalConfig,
) -> Result<Vec<OracleMoments>> {
    check_linear(requests)?;
    if contexts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = env.ranking_length();
    if k > MAX_ENUMERATED_K {
        return Err(Error::EnumerationCap {
            needed: 1 << k.min(63),
            cap: 1 << MAX_ENUMERATED_K,
        });
    }
    let sigma2 = env.reward_sigma().powi(2);
    let m = requests.len();
    let per_context = contexts
        .iter()
        .map(|x| {
            let terms = env.context_terms(x)?;
            let mut first = vec![0.0; m];
            let mut second = vec![0.0; m];
            for (ranking, p0) in pair.logging.support(x, cfg.cap)? {
                let q_c = env.click_probs(&terms, &ranking)?;
                let mu = env.potential_rewards(&terms, &ranking);
                let forms = record_forms(requests, pair, x, &ranking, cfg)?;
                for mask in 0u32..(1 << k) {
                    let mut p = p0;
                    for (slot, q) in q_c.iter().enumerate() {
                        p *= if mask >> slot & 1 == 1 { *q } else { 1.0 - q };
                    }
                    if p == 0.0 {
                        continue;
                    }
                    for (j, f) in forms.iter().enumerate() {
                        let (mut mean, mut var) = (f.offset, 0.0);
                        for slot in (0..k).filter(|s| mask >> s & 1 == 1) {
                            mean += f.weights[slot] * mu[slot];
                            var += f.weights[slot].powi(2) * sigma2;
                        }
                        first[j] += p * mean;
                        second[j] += p * (mean * mean + var);
                    }
                }
            }
            Ok((first, second))
        })
        .collect::<Result<Vec<_>>>()?;
    let c = contexts.len() as f64;
    Ok((0..m)
        .map(|j| {
            let mean = per_context.iter().map(|(f, _)| f[j]).sum::<f64>() / c;
            let second = per_context.iter().map(|(_, s)| s[j]).sum::<f64>() / c;
            OracleMoments {
                mean,
                variance: (second - mean * mean).max(0.0),
            }
        })
        .collect())
}

/// `E[V̂]` of one estimator over the full outcome space.
pub fn brute_force_estimator_expectation(
    request: &EstimatorRequest<'_>,
    env: &dyn EnvironmentModel,
    pair: &PolicyPair,
    contexts: &[ContextVector],
    cfg: &MarginalConfig,
) -> Result<f64> {
    Ok(brute_force_moments(&[*request], env, pair, contexts, cfg)?[0].mean)
}

/// `V[V̂]` of one estimator averaged over `n` i.i.d. records.
pub fn brute_force_estimator_variance(
    request: &EstimatorRequest<'_>,
    env: &dyn EnvironmentModel,
    pair: &PolicyPair,
    contexts: &[ContextVector],
    n: usize,
    cfg: &MarginalConfig,
) -> Result<f64> {
    Ok(brute_force_moments(&[*request], env, pair, contexts, cfg)?[0].variance_at(n))
}

// ---------------------------------------------------------------------------
// Closed forms
// ---------------------------------------------------------------------------

/// IPS bias: minus the value mass the target places on rankings the logging
/// policy never shows.
pub fn closed_form_ips_bias(
    env: &dyn EnvironmentModel,
    pair: &PolicyPair,
    contexts: &[ContextVector],
    cfg: &MarginalConfig,
) -> Result<f64> {
    if contexts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for x in contexts {
        let terms = env.context_terms(x)?;
        for (r, p) in pair.target.support(x, cfg.cap)? {
            if pair.logging.ranking_probability(x, &r)? > 0.0 {
                continue;
            }
            let q_c = env.click_probs(&terms, &r)?;
            let q_r = env.potential_rewards(&terms, &r);
            total += p * q_c.iter().zip(&q_r).map(|(c, r)| c * r).sum::<f64>();
        }
    }
    Ok(-total / contexts.len() as f64)
}

fn require_independent_rewards(env: &dyn EnvironmentModel) -> Result<()> {
    if !env.reward_independent() {
        return Err(Error::ConditionViolation(
            "the closed form assumes potential rewards independent of the rest of the ranking \
             (interaction strength must be zero)"
                .into(),
        ));
    }
    Ok(())
}

/// Per-context true quantities used by the click-based closed forms.
struct ClickView {
    target: Vec<f64>,
    logging: Vec<f64>,
    q_r: Vec<f64>,
}

fn click_view(
    env: &dyn EnvironmentModel,
    pair: &PolicyPair,
    x: &ContextVector,
    cfg: &MarginalConfig,
) -> Result<ClickView> {
    let terms = env.context_terms(x)?;
    let exact = MarginalConfig {
        allow_fallback: false,
        ..*cfg
    };
    let (target, _) = marginal_click_probs(env, &pair.target, x, &exact)?;
    let (logging, _) = marginal_click_probs(env, &pair.logging, x, &exact)?;
    let q_r = (0..env.action_count())
        .map(|a| env.base_reward(&terms, a.into()))
        .collect();
    Ok(ClickView {
        target,
        logging,
        q_r,
    })
}

fn require_click_support(view: &ClickView, x: &ContextVector) -> Result<()> {
    for (a, (t, l)) in view.target.iter().zip(&view.logging).enumerate() {
        if *t > 0.0 && *l == 0.0 {
            return Err(Error::ConditionViolation(format!(
                "action {a} can be clicked under the target but never under the logging policy \
                 (context id {:?})",
                x.id
            )));
        }
    }
    Ok(())
}

/// CIPS bias with a (possibly inexact) click provider:
/// `E_x[Σ_a p_c(π_0)·(p̂_c(π)/p̂_c(π_0) − p_c(π)/p_c(π_0))·q_r]`.
pub fn closed_form_cips_bias(
    env: &dyn EnvironmentModel,
    pair: &PolicyPair,
    provider: &dyn ClickProbProvider,
    contexts: &[ContextVector],
    cfg: &MarginalConfig,
) -> Result<f64> {
    require_independent_rewards(env)?;
    if contexts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for x in contexts {
        let view = click_view(env, pair, x, cfg)?;
        require_click_support(&view, x)?;
        let (hat_t, _) = provider.marginal_click_probs(&pair.target, x, cfg)?;
        let (hat_l, _) = provider.marginal_click_probs(&pair.logging, x, cfg)?;
        let floor = provider.floor();
        for a in 0..view.q_r.len() {
            let p0 = view.logging[a];
            if p0 == 0.0 {
                continue;
            }
            let den = floor.map_or(hat_l[a], |f| hat_l[a].max(f));
            let hat_w = if den > 0.0 { hat_t[a] / den } else { 0.0 };
            total += p0 * (hat_w - view.target[a] / p0) * view.q_r[a];
        }
    }
    Ok(total / contexts.len() as f64)
}

/// The three additive pieces of `n·V[V̂]` for CIPS/CDR with true click
/// probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceTerms {
    /// `E_{x,A}[Σ_a w² σ²(x,a,A)]`: click and reward noise.
    pub noise: f64,
    /// `E_x[V_{π_0}[Σ_a w·Δ_r·p_c(x,a,A)]]`: logging-policy spread.
    pub logging_spread: f64,
    /// `V_x[Σ_a p_c(x,a,π)·q_r(x,a)]`: context spread.
    pub context_spread: f64,
}

impl VarianceTerms {
    pub fn total(&self) -> f64 {
        self.noise + self.logging_spread + self.context_spread
    }
}

/// Per-action sums as commonly displayed: the middle term with `q_r²`
/// (`Δ_r²` for CDR), the variant with un-squared `q_r`, and both totals.
/// Cross-action covariances are ignored by these forms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerActionForms {
    pub noise: f64,
    pub middle_squared: f64,
    pub middle_linear: f64,
    pub context_spread: f64,
}

impl PerActionForms {
    pub fn total_squared(&self) -> f64 {
        self.noise + self.middle_squared + self.context_spread
    }

    pub fn total_linear(&self) -> f64 {
        self.noise + self.middle_linear + self.context_spread
    }
}

/// Exact and per-action variance decompositions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub exact: VarianceTerms,
    pub per_action: PerActionForms,
}

fn population_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

fn variance_report(
    env: &dyn EnvironmentModel,
    pair: &PolicyPair,
    reward: Option<&dyn RewardPredictor>,
    contexts: &[ContextVector],
    cfg: &MarginalConfig,
) -> Result<VarianceReport> {
    require_independent_rewards(env)?;
    if contexts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n_a = env.action_count();
    let s2 = env.reward_sigma().powi(2);
    let c = contexts.len() as f64;
    let mut noise = 0.0;
    let mut spread = 0.0;
    let mut means = Vec::with_capacity(contexts.len());
    let mut per_action_means = vec![Vec::with_capacity(contexts.len()); n_a];
    let (mut mid_sq, mut mid_lin) = (0.0, 0.0);
    for x in contexts {
        let view = click_view(env, pair, x, cfg)?;
        require_click_support(&view, x)?;
        let q_hat = match reward {
            Some(r) => r.predict_all(x)?,
            None => vec![0.0; n_a],
        };
        let w: Vec<f64> = (0..n_a)
            .map(|a| {
                if view.logging[a] > 0.0 {
                    view.target[a] / view.logging[a]
                } else {
                    0.0
                }
            })
            .collect();
        let delta: Vec<f64> = view.q_r.iter().zip(&q_hat).map(|(q, h)| q - h).collect();
        let terms = env.context_terms(x)?;
        let (mut m1, mut m2) = (0.0, 0.0);
        // Per-action first/second moments of p_c(x, a, A) under π_0.
        let (mut pa1, mut pa2) = (vec![0.0; n_a], vec![0.0; n_a]);
        for (r, p0) in pair.logging.support(x, cfg.cap)? {
            let q_c = env.click_probs(&terms, &r)?;
            let mut m = 0.0;
            for (a, q) in r.slots().iter().zip(&q_c) {
                let a = a.index();
                let qr = view.q_r[a];
                let sigma2 = q * (qr * qr + s2) - (q * qr).powi(2);
                noise += p0 * w[a] * w[a] * sigma2 / c;
                m += w[a] * delta[a] * q;
                pa1[a] += p0 * q;
                pa2[a] += p0 * q * q;
            }
            m1 += p0 * m;
            m2 += p0 * m * m;
        }
        spread += (m2 - m1 * m1).max(0.0) / c;
        let mut mean = 0.0;
        for a in 0..n_a {
            let v = (pa2[a] - pa1[a] * pa1[a]).max(0.0);
            let scale = if reward.is_some() {
                delta[a]
            } else {
                view.q_r[a]
            };
            mid_sq += w[a] * w[a] * scale * scale * v / c;
            mid_lin += w[a] * w[a] * scale * v / c;
            let contrib = view.target[a] * view.q_r[a];
            per_action_means[a].push(contrib);
            mean += contrib;
        }
        means.push(mean);
    }
    Ok(VarianceReport {
        exact: VarianceTerms {
            noise,
            logging_spread: spread,
            context_spread: population_variance(&means),
        },
        per_action: PerActionForms {
            noise,
            middle_squared: mid_sq,
            middle_linear: mid_lin,
            context_spread: per_action_means
                .iter()
                .map(|v| population_variance(v))
                .sum(),
        },
    })
}

/// `n·V[V̂_CIPS]` with true click probabilities.
pub fn closed_form_cips_variance(
    env: &dyn EnvironmentModel,
    pair: &PolicyPair,
    contexts: &[ContextVector],
    cfg: &MarginalConfig,
) -> Result<VarianceReport> {
    variance_report(env, pair, None, contexts, cfg)
}

/// `n·V[V̂_CDR]` with true click probabilities and reward model `reward`.
pub fn closed_form_cdr_variance(
    env: &dyn EnvironmentModel,
    pair: &PolicyPair,
    reward: &dyn RewardPredictor,
    contexts: &[ContextVector],
    cfg: &MarginalConfig,
) -> Result<VarianceReport> {
    variance_report(env, pair, Some(reward), contexts, cfg)
}

/// One closed-form-versus-oracle comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremEvaluation {
    pub check: String,
    pub closed_form: f64,
    pub oracle: f64,
    pub gap: f64,
    pub fingerprint: String,
}

impl TheoremEvaluation {
    pub fn new(
        check: impl Into<String>,
        closed_form: f64,
        oracle: f64,
        fingerprint: String,
    ) -> Self {
        Self {
            check: check.into(),
            closed_form,
            oracle,
            gap: (closed_form - oracle).abs(),
            fingerprint,
        }
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.gap < tolerance
    }
}

// ---------------------------------------------------------------------------
// Empirical metrics
// ---------------------------------------------------------------------------

/// Where an estimator's click probabilities come from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderSpec {
    None,
    True,
    /// A click network fitted on each seed's logged data.
    Estimated,
    /// True probabilities with `U[−δ, δ]` perturbations.
    Noisy {
        delta: f64,
    },
}

impl ProviderSpec {
    pub fn kind(&self) -> ProviderKind {
        match self {
            ProviderSpec::None => ProviderKind::None,
            ProviderSpec::True => ProviderKind::True,
            ProviderSpec::Estimated => ProviderKind::Estimated,
            ProviderSpec::Noisy { .. } => ProviderKind::Noisy,
        }
    }
}

/// Where CDR's reward predictions come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardSpec {
    #[default]
    Fitted,
    Zero,
    /// True base rewards plus `U[−amplitude, amplitude]` noise.
    Oracle {
        amplitude: f64,
    },
}

/// One estimator as configured in an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub estimator: EstimatorKind,
    #[serde(default = "default_provider")]
    pub provider: ProviderSpec,
    #[serde(default)]
    pub reward: RewardSpec,
    #[serde(default)]
    pub options: EstimatorOptions,
}

fn default_provider() -> ProviderSpec {
    ProviderSpec::None
}

impl EstimatorSpec {
    pub fn plain(estimator: EstimatorKind) -> Self {
        Self {
            estimator,
            provider: ProviderSpec::None,
            reward: RewardSpec::Fitted,
            options: EstimatorOptions::default(),
        }
    }

    pub fn cips(provider: ProviderSpec) -> Self {
        Self {
            provider,
            ..Self::plain(EstimatorKind::Cips)
        }
    }

    pub fn cdr(provider: ProviderSpec, reward: RewardSpec) -> Self {
        Self {
            provider,
            reward,
            ..Self::plain(EstimatorKind::Cdr)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let needs = self.estimator.needs_clicks();
        match (needs, self.provider) {
            (true, ProviderSpec::None) => Err(Error::config(
                "estimators.provider",
                format!("{} needs a click-probability provider", self.estimator),
            )),
            (false, p) if p != ProviderSpec::None => Err(Error::config(
                "estimators.provider",
                format!("{} does not use click probabilities", self.estimator),
            )),
            (_, ProviderSpec::Noisy { delta }) if !(0.0..=1.0).contains(&delta) => Err(
                Error::config("estimators.provider.delta", "must lie in [0, 1]"),
            ),
            _ => match self.reward {
                RewardSpec::Oracle { amplitude }
                    if !(amplitude >= 0.0 && amplitude.is_finite()) =>
                {
                    Err(Error::config(
                        "estimators.reward.amplitude",
                        "must be finite and ≥ 0",
                    ))
                }
                _ => Ok(()),
            },
        }
    }

    pub fn name(&self) -> String {
        let mut name = crate::estimators::display_name(self.estimator, self.provider.kind());
        if let ProviderSpec::Noisy { delta } = self.provider {
            name = format!("{} (δ={delta})", self.estimator);
        }
        if self.estimator == EstimatorKind::Cdr {
            match self.reward {
                RewardSpec::Zero => name.push_str(" [q̂=0]"),
                RewardSpec::Oracle { amplitude } => {
                    name.push_str(&format!(" [q̂ noise {amplitude}]"))
                }
                RewardSpec::Fitted => {}
            }
        }
        if let Some(c) = self.options.clip {
            name.push_str(&format!(" [clip {c}]"));
        }
        if self.options.self_normalize {
            name.push_str(" [SN]");
        }
        name
    }
}

/// Model-fitting and enumeration settings shared by every seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub click_model: ClickModelConfig,
    pub reward_model: RewardModelConfig,
    pub marginal: MarginalConfig,
}

/// Providers and reward models materialized for one dataset.
struct SeedModels {
    click: Option<ClickRegressor>,
    reward: Option<RewardRegressor>,
    noisy: Vec<(f64, NoisyClickOracle)>,
    oracle_rewards: Vec<(f64, NoisyRewardOracle)>,
    zero: ZeroReward,
}

impl SeedModels {
    fn build(
        specs: &[EstimatorSpec],
        env: &Arc<dyn EnvironmentModel>,
        data: &LoggedDataset,
        pipeline: &PipelineConfig,
        rng: &RngStream,
    ) -> Result<Self> {
        let click = if specs.iter().any(|s| s.provider == ProviderSpec::Estimated) {
            Some(ClickRegressor::fit(
                data,
                &pipeline.click_model,
                &rng.derive("click-model-init"),
            )?)
        } else {
            None
        };
        let reward = if specs
            .iter()
            .any(|s| s.estimator == EstimatorKind::Cdr && s.reward == RewardSpec::Fitted)
        {
            Some(RewardRegressor::fit(data, &pipeline.reward_model)?)
        } else {
            None
        };
        let key = rng.derive("click-noise").random::<u64>();
        let mut noisy: Vec<(f64, NoisyClickOracle)> = Vec::new();
        let mut oracle_rewards: Vec<(f64, NoisyRewardOracle)> = Vec::new();
        for s in specs {
            if let ProviderSpec::Noisy { delta } = s.provider {
                if !noisy.iter().any(|(d, _)| *d == delta) {
                    noisy.push((delta, NoisyClickOracle::new(env.clone(), delta, key)));
                }
            }
            if let (EstimatorKind::Cdr, RewardSpec::Oracle { amplitude }) = (s.estimator, s.reward)
            {
                if !oracle_rewards.iter().any(|(a, _)| *a == amplitude) {
                    let key = rng.derive("reward-noise").random::<u64>();
                    oracle_rewards.push((
                        amplitude,
                        NoisyRewardOracle {
                            env: env.clone(),
                            amplitude,
                            key,
                        },
                    ));
                }
            }
        }
        Ok(Self {
            click,
            reward,
            noisy,
            oracle_rewards,
            zero: ZeroReward {
                action_count: env.action_count(),
            },
        })
    }

    fn requests<'a>(
        &'a self,
        specs: &[EstimatorSpec],
        truth: &'a TrueClicks<'a>,
    ) -> Vec<EstimatorRequest<'a>> {
        specs
            .iter()
            .map(|s| {
                let clicks: Option<&dyn ClickProbProvider> = match s.provider {
                    ProviderSpec::None => None,
                    ProviderSpec::True => Some(truth),
                    ProviderSpec::Estimated => self.click.as_ref().map(|c| c as _),
                    ProviderSpec::Noisy { delta } => self
                        .noisy
                        .iter()
                        .find(|(d, _)| *d == delta)
                        .map(|(_, o)| o as _),
                };
                let reward: Option<&dyn RewardPredictor> = match (s.estimator, s.reward) {
                    (EstimatorKind::Cdr, RewardSpec::Fitted) => {
                        self.reward.as_ref().map(|r| r as _)
                    }
                    (EstimatorKind::Cdr, RewardSpec::Zero) => Some(&self.zero),
                    (EstimatorKind::Cdr, RewardSpec::Oracle { amplitude }) => self
                        .oracle_rewards
                        .iter()
                        .find(|(a, _)| *a == amplitude)
                        .map(|(_, o)| o as _),
                    _ => None,
                };
                EstimatorRequest {
                    kind: s.estimator,
                    clicks,
                    reward,
                    options: s.options,
                }
            })
            .collect()
    }
}

/// Per-seed output of the estimation pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: usize,
    /// One estimate per configured estimator.
    pub estimates: Vec<f64>,
    /// On-policy sample mean of the logged rewards.
    pub logging_mean: f64,
    /// Per-estimator sample variance of the per-record terms (divisor `n`).
    pub term_variances: Vec<f64>,
}

/// Runs dataset generation → model fitting → estimation for one seed.
pub fn run_seed(
    specs: &[EstimatorSpec],
    env: &Arc<dyn EnvironmentModel>,
    pair: &PolicyPair,
    n: usize,
    seed: usize,
    pipeline: &PipelineConfig,
    rng: &RngStream,
) -> Result<SeedOutcome> {
    let wrap = |e: Error| Error::Seed {
        seed,
        source: Box::new(e),
    };
    let rng = rng.derive("seed").derive(seed);
    let data = generate_logged_dataset(
        env.as_ref(),
        &pair.logging,
        n,
        ContextSource::Environment,
        &rng,
    )
    .map_err(wrap)?;
    let models = SeedModels::build(specs, env, &data, pipeline, &rng).map_err(wrap)?;
    let truth = TrueClicks(env.as_ref());
    let requests = models.requests(specs, &truth);
    let forms = dataset_forms(&data, pair, &requests, &pipeline.marginal).map_err(wrap)?;
    let reports = reports_from_forms(&data, &requests, &forms);
    let term_variances = term_variances(&data, &forms);
    Ok(SeedOutcome {
        seed,
        estimates: reports.iter().map(|r| r.estimate).collect(),
        logging_mean: data.mean_total_reward().map_err(wrap)?,
        term_variances,
    })
}

/// Sample variance (divisor `n`) of each request's per-record terms.
pub fn per_record_term_variances(
    data: &LoggedDataset,
    pair: &PolicyPair,
    requests: &[EstimatorRequest<'_>],
    cfg: &MarginalConfig,
) -> Result<Vec<f64>> {
    Ok(term_variances(
        data,
        &dataset_forms(data, pair, requests, cfg)?,
    ))
}

fn term_variances(data: &LoggedDataset, forms: &[Vec<LinearForm>]) -> Vec<f64> {
    let width = forms.first().map_or(0, Vec::len);
    (0..width)
        .map(|j| {
            let terms: Vec<f64> = data
                .records
                .iter()
                .zip(forms)
                .map(|(rec, f)| f[j].term(&rec.observed_rewards))
                .collect();
            population_variance(&terms)
        })
        .collect()
}

/// Runs `seeds` independent pipelines concurrently; results are ordered by seed.
pub fn run_seeds(
    specs: &[EstimatorSpec],
    env: &Arc<dyn EnvironmentModel>,
    pair: &PolicyPair,
    n: usize,
    seeds: usize,
    pipeline: &PipelineConfig,
    rng: &RngStream,
) -> Result<Vec<SeedOutcome>> {
    for s in specs {
        s.validate()?;
    }
    (0..seeds)
        .into_par_iter()
        .map(|seed| run_seed(specs, env, pair, n, seed, pipeline, rng))
        .collect()
}

/// A percentile-bootstrap interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

/// Normalized MSE decomposition of one estimator over a seed sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub mse: f64,
    pub squared_bias: f64,
    pub variance: f64,
    pub mse_ci: Interval,
    pub squared_bias_ci: Interval,
    pub variance_ci: Interval,
    /// `V(π)`; squared quantities above are divided by its square.
    pub true_value: f64,
    pub seeds: usize,
    /// Unnormalized `(mse, squared_bias, variance)`.
    pub raw: [f64; 3],
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;
pub const BOOTSTRAP_LEVEL: f64 = 0.95;

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn percentile_interval(mut stats: Vec<f64>, level: f64) -> Interval {
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Interval {
        lower: quantile(&stats, tail),
        upper: quantile(&stats, 1.0 - tail),
    }
}

fn resample_indices(n: usize, rng: &mut RngStream) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Percentile bootstrap interval for the mean of `values`.
pub fn bootstrap_ci(
    values: &[f64],
    resamples: usize,
    level: f64,
    rng: &RngStream,
) -> Result<Interval> {
    if values.len() < 2 {
        return Err(Error::config("bootstrap", "needs at least two values"));
    }
    if !(level > 0.0 && level < 1.0) || resamples == 0 {
        return Err(Error::config(
            "bootstrap",
            "level must lie in (0, 1) with ≥ 1 resample",
        ));
    }
    let mut rng = rng.derive("bootstrap");
    let n = values.len();
    let stats = (0..resamples)
        .map(|_| {
            resample_indices(n, &mut rng)
                .iter()
                .map(|&i| values[i])
                .sum::<f64>()
                / n as f64
        })
        .collect();
    Ok(percentile_interval(stats, level))
}

fn decomposition(estimates: &[f64], truth: f64) -> [f64; 3] {
    let n = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / n;
    let mse = estimates.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / n;
    let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    [mse, (mean - truth).powi(2), var]
}

/// MSE, squared bias and variance (divisor = seed count) normalized by `V²`,
/// with bootstrap intervals over the seeds.
pub fn metric_triple(estimates: &[f64], truth: f64, rng: &RngStream) -> Result<MetricTriple> {
    if estimates.len() < 2 {
        return Err(Error::config("seeds", "need at least two seeds"));
    }
    if truth == 0.0 {
        return Err(Error::ConditionViolation(
            "V(π) = 0 cannot normalize".into(),
        ));
    }
    let norm = truth * truth;
    let raw = decomposition(estimates, truth);
    let mut rng = rng.derive("bootstrap");
    let n = estimates.len();
    let mut stats: [Vec<f64>; 3] = Default::default();
    let mut sample = vec![0.0; n];
    for _ in 0..BOOTSTRAP_RESAMPLES {
        for (s, i) in sample.iter_mut().zip(resample_indices(n, &mut rng)) {
            *s = estimates[i];
        }
        for (acc, v) in stats.iter_mut().zip(decomposition(&sample, truth)) {
            acc.push(v / norm);
        }
    }
    let [mse_s, bias_s, var_s] = stats;
    Ok(MetricTriple {
        mse: raw[0] / norm,
        squared_bias: raw[1] / norm,
        variance: raw[2] / norm,
        mse_ci: percentile_interval(mse_s, BOOTSTRAP_LEVEL),
        squared_bias_ci: percentile_interval(bias_s, BOOTSTRAP_LEVEL),
        variance_ci: percentile_interval(var_s, BOOTSTRAP_LEVEL),
        true_value: truth,
        seeds: n,
        raw,
    })
}

/// Full pipeline for one estimator: per-seed estimates summarized against `V(π)`.
#[allow(clippy::too_many_arguments)]
pub fn empirical_metrics(
    spec: &EstimatorSpec,
    env: &Arc<dyn EnvironmentModel>,
    pair: &PolicyPair,
    true_value: f64,
    n: usize,
    seeds: usize,
    pipeline: &PipelineConfig,
    rng: &RngStream,
) -> Result<MetricTriple> {
    if seeds < 2 {
        return Err(Error::config("seeds", "need at least two seeds"));
    }
    let outcomes = run_seeds(
        std::slice::from_ref(spec),
        env,
        pair,
        n,
        seeds,
        pipeline,
        rng,
    )?;
    let estimates: Vec<f64> = outcomes.iter().map(|o| o.estimates[0]).collect();
    metric_triple(&estimates, true_value, &rng.derive("metrics"))
}

// ---------------------------------------------------------------------------
// Policy selection
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionEntry {
    pub estimator: String,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub trials: usize,
    pub target_value: f64,
    pub logging_value: f64,
    /// Configured estimators followed by the `oracle` and `coin-flip` controls.
    pub entries: Vec<SelectionEntry>,
}

impl SelectionResult {
    pub fn accuracy(&self, name: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.estimator == name)
            .map(|e| e.accuracy)
    }
}

/// Fraction of trials in which each estimator orders `π` and `π_0` correctly;
/// `π_0`'s value is estimated on-policy by the logged sample mean.
#[allow(clippy::too_many_arguments)]
pub fn policy_selection_accuracy(
    specs: &[EstimatorSpec],
    env: &Arc<dyn EnvironmentModel>,
    pair: &PolicyPair,
    values: (f64, f64),
    n: usize,
    trials: usize,
    pipeline: &PipelineConfig,
    rng: &RngStream,
) -> Result<SelectionResult> {
    let (target_value, logging_value) = values;
    if target_value == logging_value {
        return Err(Error::ConditionViolation(
            "V(π) = V(π_0); there is no better policy to select".into(),
        ));
    }
    let target_better = target_value > logging_value;
    let outcomes = run_seeds(specs, env, pair, n, trials, pipeline, rng)?;
    let mut entries: Vec<SelectionEntry> = specs
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let correct = outcomes
                .iter()
                .filter(|o| (o.estimates[j] > o.logging_mean) == target_better)
                .count();
            SelectionEntry {
                estimator: s.name(),
                correct,
                accuracy: correct as f64 / trials.max(1) as f64,
            }
        })
        .collect();
    entries.push(SelectionEntry {
        estimator: "oracle".into(),
        correct: trials,
        accuracy: if trials > 0 { 1.0 } else { 0.0 },
    });
    let mut coin = rng.derive("coin-flip");
    let correct = (0..trials).filter(|_| coin.random_bool(0.5)).count();
    entries.push(SelectionEntry {
        estimator: "coin-flip".into(),
        correct,
        accuracy: correct as f64 / trials.max(1) as f64,
    });
    Ok(SelectionResult {
        trials,
        target_value,
        logging_value,
        entries,
    })
}
