//! Ground-truth world models and the oracle quantities derived from them.

mod semi;
mod synthetic;
mod tabular;

pub use semi::{
    build_semisynthetic, load_interaction_matrix, pca_project, InteractionMatrix,
    SemiSyntheticConfig, SemiSyntheticEnvironment, Subsample,
};
pub use synthetic::{build_synthetic, SyntheticConfig, SyntheticEnvironment};
pub use tabular::TabularEnvironment;

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::policy::{MarginalConfig, PolicyKind, PolicySpec, ScoreFunction, Scorer};
use crate::rng::RngStream;
use crate::types::{ActionId, ContextVector, LoggedDataset, LoggedRecord, Ranking};

/// Default number of contexts used to evaluate `V(π)` for continuous contexts.
pub const EVALUATION_CONTEXTS: usize = 100_000;

/// Per-context quantities an environment precomputes once and reuses for
/// every ranking queried at that context.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextTerms {
    /// Base click logit (synthetic) or click probability (table-backed), per action.
    pub click: Vec<f64>,
    /// Base expected potential reward per action.
    pub reward: Vec<f64>,
    pub id: Option<u32>,
}

/// `q_c(x, A(k))` and `q_r(x, A(k))` plus dimensions.
pub trait EnvironmentModel: Send + Sync + fmt::Debug {
    fn action_count(&self) -> usize;
    fn ranking_length(&self) -> usize;
    fn context_dim(&self) -> usize;
    fn reward_sigma(&self) -> f64;
    /// Whether `q_r(x, A(k))` depends only on `(x, A(k))`.
    fn reward_independent(&self) -> bool;

    fn context_terms(&self, x: &ContextVector) -> Result<ContextTerms>;
    /// `q_c` at every position of `ranking`.
    fn click_probs(&self, terms: &ContextTerms, ranking: &Ranking) -> Result<Vec<f64>>;
    /// `q_r` at every position of `ranking`.
    fn potential_rewards(&self, terms: &ContextTerms, ranking: &Ranking) -> Vec<f64>;
    /// `q_r(x, a)` without interaction terms; the truth when rewards are independent.
    fn base_reward(&self, terms: &ContextTerms, a: ActionId) -> f64 {
        terms.reward[a.index()]
    }

    fn sample_context(&self, rng: &mut RngStream) -> ContextVector;
    /// The full context population when it is a finite uniform table.
    fn finite_contexts(&self) -> Option<&[ContextVector]> {
        None
    }

    /// A value-aligned score (`f_1`), used to build target policies.
    fn value_score(&self) -> Scorer;
    /// The base click score, used by the alternate logging recipe.
    fn click_score(&self) -> Scorer;

    fn expected_click(&self, x: &ContextVector, ranking: &Ranking, k: usize) -> Result<f64> {
        check_position(ranking, k)?;
        Ok(self.click_probs(&self.context_terms(x)?, ranking)?[k - 1])
    }

    fn expected_potential_reward(
        &self,
        x: &ContextVector,
        ranking: &Ranking,
        k: usize,
    ) -> Result<f64> {
        check_position(ranking, k)?;
        Ok(self.potential_rewards(&self.context_terms(x)?, ranking)[k - 1])
    }

    /// `p_c(x, a, A)`: the click probability at `a`'s slot, 0 when unranked.
    fn click_prob_of_action(
        &self,
        x: &ContextVector,
        a: ActionId,
        ranking: &Ranking,
    ) -> Result<f64> {
        match ranking.position_of(a) {
            Some(k) => self.expected_click(x, ranking, k),
            None => Ok(0.0),
        }
    }
}

fn check_position(ranking: &Ranking, k: usize) -> Result<()> {
    if k == 0 || k > ranking.len() {
        return Err(Error::InvalidPrefix(format!(
            "position {k} outside 1..={}",
            ranking.len()
        )));
    }
    Ok(())
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `p_c(x, a, π)` for every action, with an approximation flag when the
/// policy's support was too large to enumerate.
pub fn marginal_click_probs(
    env: &dyn EnvironmentModel,
    policy: &PolicySpec,
    x: &ContextVector,
    cfg: &MarginalConfig,
) -> Result<(Vec<f64>, bool)> {
    let terms = env.context_terms(x)?;
    let dist = policy.distribution(x, cfg)?;
    let mut out = vec![0.0; env.action_count()];
    for (r, p) in &dist.items {
        for (a, q) in r.slots().iter().zip(env.click_probs(&terms, r)?) {
            out[a.index()] += p * q;
        }
    }
    Ok((out, dist.approximate))
}

/// `p_c(x, a, π) = Σ_A π(A|x)·p_c(x, a, A)`.
pub fn marginal_click_prob(
    env: &dyn EnvironmentModel,
    policy: &PolicySpec,
    x: &ContextVector,
    a: ActionId,
    cfg: &MarginalConfig,
) -> Result<f64> {
    Ok(marginal_click_probs(env, policy, x, cfg)?.0[a.index()])
}

/// Independent Bernoulli clicks and Gaussian potential rewards at each slot.
pub fn sample_interaction(
    env: &dyn EnvironmentModel,
    x: &ContextVector,
    ranking: &Ranking,
    rng: &mut RngStream,
) -> Result<(Vec<bool>, Vec<f64>)> {
    let terms = env.context_terms(x)?;
    let mut click_rng = rng.derive("clicks");
    let mut reward_rng = rng.derive("rewards");
    interaction_from_terms(env, &terms, ranking, &mut click_rng, &mut reward_rng)
}

fn interaction_from_terms(
    env: &dyn EnvironmentModel,
    terms: &ContextTerms,
    ranking: &Ranking,
    click_rng: &mut RngStream,
    reward_rng: &mut RngStream,
) -> Result<(Vec<bool>, Vec<f64>)> {
    let q_c = env.click_probs(terms, ranking)?;
    let q_r = env.potential_rewards(terms, ranking);
    let sigma = env.reward_sigma();
    let clicks = q_c.iter().map(|&p| click_rng.random::<f64>() < p).collect();
    let rewards = q_r
        .iter()
        .map(|&m| {
            let z: f64 = StandardNormal.sample(reward_rng);
            m + sigma * z
        })
        .collect();
    Ok((clicks, rewards))
}

/// Where logged contexts come from.
#[derive(Clone, Copy, Debug)]
pub enum ContextSource<'a> {
    /// The environment's own context distribution.
    Environment,
    /// Uniform draws from an explicit pool.
    Pool(&'a [ContextVector]),
}

impl ContextSource<'_> {
    pub fn draw(&self, env: &dyn EnvironmentModel, rng: &mut RngStream) -> ContextVector {
        match self {
            ContextSource::Environment => env.sample_context(rng),
            ContextSource::Pool(pool) => pool[rng.random_range(0..pool.len())].clone(),
        }
    }
}

/// `n` i.i.d. records under the logging policy. Contexts, rankings, clicks and
/// rewards draw from separate substreams so changing the policy leaves the
/// contexts untouched.
pub fn generate_logged_dataset(
    env: &dyn EnvironmentModel,
    logging: &PolicySpec,
    n: usize,
    source: ContextSource<'_>,
    rng: &RngStream,
) -> Result<LoggedDataset> {
    if n == 0 {
        return Err(Error::config("n", "must be at least 1"));
    }
    if logging.action_count() != env.action_count()
        || logging.ranking_length != env.ranking_length()
    {
        return Err(Error::DimensionMismatch {
            what: "logging policy vs environment",
            expected: env.action_count(),
            found: logging.action_count(),
        });
    }
    let mut ctx_rng = rng.derive("contexts");
    let mut rank_rng = rng.derive("rankings");
    let mut click_rng = rng.derive("clicks");
    let mut reward_rng = rng.derive("rewards");
    let mut data = LoggedDataset::new(env.action_count(), env.ranking_length(), env.context_dim());
    data.seed_info = Some(rng.path_string());
    data.records.reserve(n);
    for _ in 0..n {
        let x = source.draw(env, &mut ctx_rng);
        let ranking = logging.sample_ranking(&x, &mut rank_rng)?;
        let terms = env.context_terms(&x)?;
        let (clicks, rewards) =
            interaction_from_terms(env, &terms, &ranking, &mut click_rng, &mut reward_rng)?;
        data.records
            .push(LoggedRecord::from_potential(x, ranking, clicks, &rewards));
    }
    Ok(data)
}

/// `Σ_A π(A|x) Σ_k q_c(x,A,k)·q_r(x,A,k)` at a single context.
pub fn policy_value_at(
    env: &dyn EnvironmentModel,
    policy: &PolicySpec,
    x: &ContextVector,
    cfg: &MarginalConfig,
) -> Result<f64> {
    let terms = env.context_terms(x)?;
    let dist = policy.distribution(x, cfg)?;
    let mut v = 0.0;
    for (r, p) in &dist.items {
        let q_c = env.click_probs(&terms, r)?;
        let q_r = env.potential_rewards(&terms, r);
        v += p * q_c.iter().zip(&q_r).map(|(c, r)| c * r).sum::<f64>();
    }
    Ok(v)
}

/// `V(π)` averaged over an explicit context sample (fixed-order reduction).
pub fn true_policy_value(
    env: &dyn EnvironmentModel,
    policy: &PolicySpec,
    contexts: &[ContextVector],
    cfg: &MarginalConfig,
) -> Result<f64> {
    if contexts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let values = contexts
        .par_iter()
        .map(|x| policy_value_at(env, policy, x, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(values.iter().sum::<f64>() / contexts.len() as f64)
}

/// The context sample used for ground-truth values: the whole population for
/// table-backed environments, `count` fresh draws otherwise.
pub fn evaluation_contexts(
    env: &dyn EnvironmentModel,
    count: usize,
    rng: &RngStream,
) -> Vec<ContextVector> {
    if let Some(all) = env.finite_contexts() {
        return all.to_vec();
    }
    let mut rng = rng.derive("evaluation-contexts");
    (0..count).map(|_| env.sample_context(&mut rng)).collect()
}

/// ε-greedy over the environment's value-aligned score.
pub fn build_target_policy(env: &dyn EnvironmentModel, epsilon: f64) -> Result<PolicySpec> {
    let p = PolicySpec::new(
        PolicyKind::EpsilonGreedy {
            epsilon,
            score: env.value_score(),
        },
        env.ranking_length(),
    );
    p.validate()?;
    Ok(p)
}

/// Threshold-mixed logging policy over a score with `θ ~ U[0, 1]`.
pub fn build_logging_policy(
    env: &dyn EnvironmentModel,
    alpha: f64,
    rng: &RngStream,
) -> Result<PolicySpec> {
    let mut rng = rng.derive("logging-score");
    let f0 = ScoreFunction::sample_uniform(env.context_dim(), env.action_count(), &mut rng);
    let p = PolicySpec::new(
        PolicyKind::ThresholdMixed {
            alpha,
            score: Scorer::Linear(f0),
        },
        env.ranking_length(),
    );
    p.validate()?;
    Ok(p)
}

/// Alternate recipe: logging score = base click score + per-action `N(0,1)`
/// offset; target = per-position mixture of ε-greedy and softmax.
pub fn build_alternate_policies(
    env: &dyn EnvironmentModel,
    alpha: f64,
    epsilon: f64,
    mixture_weight: f64,
    rng: &RngStream,
) -> Result<(PolicySpec, PolicySpec)> {
    let mut rng = rng.derive("alternate-offsets");
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let offsets: Vec<f64> = (0..env.action_count())
        .map(|_| normal.sample(&mut rng))
        .collect();
    let logging = PolicySpec::new(
        PolicyKind::ThresholdMixed {
            alpha,
            score: env.click_score().with_offset(&offsets),
        },
        env.ranking_length(),
    );
    let target = PolicySpec::new(
        PolicyKind::Mixture {
            epsilon,
            mixture_weight,
            score: env.value_score(),
        },
        env.ranking_length(),
    );
    logging.validate()?;
    target.validate()?;
    Ok((logging, target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_env(lambda: f64, seed: u64) -> SyntheticEnvironment {
        build_synthetic(
            &SyntheticConfig {
                context_dim: 3,
                action_count: 4,
                ranking_length: 3,
                lambda,
                reward_sigma: 1.0,
            },
            &RngStream::new(seed),
        )
        .unwrap()
    }

    #[test]
    fn value_identity_under_independence() {
        let env = small_env(0.0, 3);
        let rng = RngStream::new(4);
        let target = build_target_policy(&env, 0.3).unwrap();
        let cfg = MarginalConfig::exact_only();
        let mut draw = rng.derive("x");
        for _ in 0..10 {
            let x = env.sample_context(&mut draw);
            let terms = env.context_terms(&x).unwrap();
            let (pc, _) = marginal_click_probs(&env, &target, &x, &cfg).unwrap();
            let via_marginals: f64 = (0..4)
                .map(|a| pc[a] * env.base_reward(&terms, ActionId::from(a)))
                .sum();
            assert_abs_diff_eq!(
                policy_value_at(&env, &target, &x, &cfg).unwrap(),
                via_marginals,
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn logged_records_are_valid() {
        let env = small_env(0.5, 1);
        let rng = RngStream::new(2);
        let logging = build_logging_policy(&env, f64::INFINITY, &rng).unwrap();
        let data =
            generate_logged_dataset(&env, &logging, 200, ContextSource::Environment, &rng).unwrap();
        data.validate().unwrap();
        assert_eq!(data.len(), 200);
    }

    #[test]
    fn deterministic_logging_repeats_ranking_per_context() {
        let env = small_env(0.5, 1);
        let rng = RngStream::new(5);
        let pool: Vec<_> = (0..3)
            .map(|i| ContextVector::with_id(vec![i as f64, 0.5, -1.0], i))
            .collect();
        let logging = build_logging_policy(&env, f64::INFINITY, &rng).unwrap();
        let data =
            generate_logged_dataset(&env, &logging, 300, ContextSource::Pool(&pool), &rng).unwrap();
        for rec in &data.records {
            let expected = logging
                .sample_ranking(&rec.context, &mut RngStream::new(0))
                .unwrap();
            assert_eq!(rec.ranking, expected);
        }
    }

    #[test]
    fn changing_policy_keeps_contexts() {
        let env = small_env(0.5, 1);
        let rng = RngStream::new(8);
        let a = build_logging_policy(&env, f64::INFINITY, &rng).unwrap();
        let b = build_logging_policy(&env, f64::NEG_INFINITY, &rng).unwrap();
        let da = generate_logged_dataset(&env, &a, 50, ContextSource::Environment, &rng).unwrap();
        let db = generate_logged_dataset(&env, &b, 50, ContextSource::Environment, &rng).unwrap();
        for (ra, rb) in da.records.iter().zip(&db.records) {
            assert_eq!(ra.context, rb.context);
        }
    }

    #[test]
    fn click_prob_of_unranked_action_is_zero() {
        let env = small_env(0.5, 1);
        let x = ContextVector::new(vec![0.1, 0.2, 0.3]);
        let r = Ranking::from_indices(&[0, 2, 1]);
        assert_eq!(env.click_prob_of_action(&x, ActionId(3), &r).unwrap(), 0.0);
        assert!(env.click_prob_of_action(&x, ActionId(2), &r).unwrap() > 0.0);
    }
}
