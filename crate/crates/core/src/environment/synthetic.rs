use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{sigmoid, ContextTerms, EnvironmentModel};
use crate::error::{Error, Result};
use crate::policy::{BilinearScore, Scorer};
use crate::rng::RngStream;
use crate::types::{ContextVector, Ranking};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    #[serde(rename = "d_x")]
    pub context_dim: usize,
    pub action_count: usize,
    #[serde(rename = "K")]
    pub ranking_length: usize,
    pub lambda: f64,
    pub reward_sigma: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            context_dim: 10,
            action_count: 6,
            ranking_length: 6,
            lambda: 0.5,
            reward_sigma: 1.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_dim == 0 {
            return Err(Error::config("d_x", "must be at least 1"));
        }
        if self.action_count < 2 {
            return Err(Error::config("action_count", "must be at least 2"));
        }
        if self.ranking_length == 0 || self.ranking_length > self.action_count {
            return Err(Error::config(
                "K",
                format!(
                    "need 1 <= K <= {}, got {}",
                    self.action_count, self.ranking_length
                ),
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be finite and >= 0"));
        }
        if !(self.reward_sigma > 0.0 && self.reward_sigma.is_finite()) {
            return Err(Error::config("reward_sigma", "must be finite and > 0"));
        }
        Ok(())
    }
}

/// Click model: `q_c = (1/k)·σ(q̂_c(x,A(k)) + Σ_{l≠k} W_c(A(l),A(k))/|k−l|)`.
/// Reward model: `q_r = q̂_r(x,A(k)) + λ·Σ_{l≠k} W_r(A(l),A(k))/|k−l|`.
/// Base functions are `q̂(x,a) = xᵀ M e_a + θ_x·x + θ_a[a]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEnvironment {
    pub config: SyntheticConfig,
    pub w_c: Vec<Vec<f64>>,
    pub w_r: Vec<Vec<f64>>,
    /// `d_x × |A|`.
    pub m_c: Vec<Vec<f64>>,
    pub m_r: Vec<Vec<f64>>,
    pub theta_c_x: Vec<f64>,
    pub theta_r_x: Vec<f64>,
    pub theta_c_a: Vec<f64>,
    pub theta_r_a: Vec<f64>,
}

/// Samples every parameter from its uniform range. Parameters depend only on
/// `d_x` and `|A|`, so environments built for different `K` or `λ` from the
/// same stream share them.
pub fn build_synthetic(cfg: &SyntheticConfig, rng: &RngStream) -> Result<SyntheticEnvironment> {
    cfg.validate()?;
    let (d, n) = (cfg.context_dim, cfg.action_count);
    let mut rng = rng.derive("synthetic-environment");
    let mut uniform = |lo: f64, hi: f64, rows: usize, cols: usize| -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| (0..cols).map(|_| rng.random_range(lo..=hi)).collect())
            .collect()
    };
    let mut w_c = uniform(-3.0, 3.0, n, n);
    let mut w_r = uniform(-1.0, 1.0, n, n);
    for i in 0..n {
        w_c[i][i] = 0.0;
        w_r[i][i] = 0.0;
    }
    let m_c = uniform(-1.0, 1.0, d, n);
    let m_r = uniform(-1.0, 1.0, d, n);
    let mut vec = |len: usize| uniform(-1.0, 1.0, 1, len).remove(0);
    Ok(SyntheticEnvironment {
        config: cfg.clone(),
        w_c,
        w_r,
        m_c,
        m_r,
        theta_c_x: vec(d),
        theta_r_x: vec(d),
        theta_c_a: vec(n),
        theta_r_a: vec(n),
    })
}

fn bilinear(x: &[f64], m: &[Vec<f64>], theta_x: &[f64], theta_a: &[f64]) -> Vec<f64> {
    let base: f64 = theta_x.iter().zip(x).map(|(t, v)| t * v).sum();
    (0..theta_a.len())
        .map(|a| base + theta_a[a] + x.iter().zip(m).map(|(xi, row)| xi * row[a]).sum::<f64>())
        .collect()
}

fn interaction(w: &[Vec<f64>], ranking: &Ranking, slot: usize) -> f64 {
    let s = ranking.slots();
    let target = s[slot].index();
    s.iter()
        .enumerate()
        .filter(|(l, _)| *l != slot)
        .map(|(l, a)| w[a.index()][target] / (l.abs_diff(slot) as f64))
        .sum()
}

impl SyntheticEnvironment {
    pub fn with_lambda(&self, lambda: f64) -> Self {
        let mut env = self.clone();
        env.config.lambda = lambda;
        env
    }

    pub fn with_ranking_length(&self, k: usize) -> Result<Self> {
        let mut env = self.clone();
        env.config.ranking_length = k;
        env.config.validate()?;
        Ok(env)
    }

    /// `q̂_c(x, a)` for every action.
    pub fn click_base(&self, x: &ContextVector) -> Vec<f64> {
        bilinear(&x.values, &self.m_c, &self.theta_c_x, &self.theta_c_a)
    }

    /// `q̂_r(x, a)` for every action.
    pub fn reward_base(&self, x: &ContextVector) -> Vec<f64> {
        bilinear(&x.values, &self.m_r, &self.theta_r_x, &self.theta_r_a)
    }

    fn check_dim(&self, x: &ContextVector) -> Result<()> {
        if x.dim() != self.config.context_dim {
            return Err(Error::DimensionMismatch {
                what: "synthetic context",
                expected: self.config.context_dim,
                found: x.dim(),
            });
        }
        Ok(())
    }
}

impl EnvironmentModel for SyntheticEnvironment {
    fn action_count(&self) -> usize {
        self.config.action_count
    }

    fn ranking_length(&self) -> usize {
        self.config.ranking_length
    }

    fn context_dim(&self) -> usize {
        self.config.context_dim
    }

    fn reward_sigma(&self) -> f64 {
        self.config.reward_sigma
    }

    fn reward_independent(&self) -> bool {
        self.config.lambda == 0.0
    }

    fn context_terms(&self, x: &ContextVector) -> Result<ContextTerms> {
        self.check_dim(x)?;
        Ok(ContextTerms {
            click: self.click_base(x),
            reward: self.reward_base(x),
            id: x.id,
        })
    }

    fn click_probs(&self, terms: &ContextTerms, ranking: &Ranking) -> Result<Vec<f64>> {
        Ok((0..ranking.len())
            .map(|slot| {
                let a = ranking.slots()[slot].index();
                let z = terms.click[a] + interaction(&self.w_c, ranking, slot);
                sigmoid(z) / (slot + 1) as f64
            })
            .collect())
    }

    fn potential_rewards(&self, terms: &ContextTerms, ranking: &Ranking) -> Vec<f64> {
        let lambda = self.config.lambda;
        (0..ranking.len())
            .map(|slot| {
                let a = ranking.slots()[slot].index();
                let extra = if lambda == 0.0 {
                    0.0
                } else {
                    lambda * interaction(&self.w_r, ranking, slot)
                };
                terms.reward[a] + extra
            })
            .collect()
    }

    fn sample_context(&self, rng: &mut RngStream) -> ContextVector {
        ContextVector::new(
            (0..self.config.context_dim)
                .map(|_| StandardNormal.sample(rng))
                .collect(),
        )
    }

    /// `f_1(x, a) = q̂_c(x, a) + q̂_r(x, a)`.
    fn value_score(&self) -> Scorer {
        let interaction = self
            .m_c
            .iter()
            .zip(&self.m_r)
            .map(|(c, r)| c.iter().zip(r).map(|(a, b)| a + b).collect())
            .collect();
        let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect();
        Scorer::Bilinear(BilinearScore {
            interaction,
            theta_x: add(&self.theta_c_x, &self.theta_r_x),
            theta_a: add(&self.theta_c_a, &self.theta_r_a),
            offset: Vec::new(),
        })
    }

    fn click_score(&self) -> Scorer {
        Scorer::Bilinear(BilinearScore {
            interaction: self.m_c.clone(),
            theta_x: self.theta_c_x.clone(),
            theta_a: self.theta_c_a.clone(),
            offset: Vec::new(),
        })
    }
}
