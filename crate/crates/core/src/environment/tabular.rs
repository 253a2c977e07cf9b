use std::collections::HashMap;

use rand::Rng;

use super::{ContextTerms, EnvironmentModel};
use crate::error::{Error, Result};
use crate::policy::{all_rankings, ScoreTable, Scorer};
use crate::rng::RngStream;
use crate::types::{ContextVector, Ranking};

/// A finite world given by explicit tables: click probabilities per
/// `(context, ranking, position)` and expected potential rewards per
/// `(context, action)`. Contexts are uniform over the table.
#[derive(Clone, Debug)]
pub struct TabularEnvironment {
    action_count: usize,
    ranking_length: usize,
    contexts: Vec<ContextVector>,
    index: HashMap<Ranking, usize>,
    /// `[context][ranking][slot]`.
    clicks: Vec<Vec<Vec<f64>>>,
    /// `[context][action]`.
    rewards: Vec<Vec<f64>>,
    reward_sigma: f64,
}

impl TabularEnvironment {
    /// `click_table[c]` must list every K-permutation exactly once.
    pub fn new(
        action_count: usize,
        ranking_length: usize,
        contexts: Vec<ContextVector>,
        click_table: Vec<Vec<(Ranking, Vec<f64>)>>,
        rewards: Vec<Vec<f64>>,
        reward_sigma: f64,
    ) -> Result<Self> {
        let space = all_rankings(action_count, ranking_length);
        let index: HashMap<Ranking, usize> = space
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, r)| (r, i))
            .collect();
        if click_table.len() != contexts.len() || rewards.len() != contexts.len() {
            return Err(Error::DimensionMismatch {
                what: "tabular environment contexts",
                expected: contexts.len(),
                found: click_table.len().min(rewards.len()),
            });
        }
        for (i, x) in contexts.iter().enumerate() {
            if x.id != Some(i as u32) {
                return Err(Error::config("contexts", "context i must carry id i"));
            }
        }
        let mut clicks = Vec::with_capacity(contexts.len());
        for rows in click_table {
            let mut filled: Vec<Option<Vec<f64>>> = vec![None; space.len()];
            for (r, probs) in rows {
                r.validate(action_count, ranking_length)?;
                if probs.len() != ranking_length || probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(Error::config(
                        "click_table",
                        format!("bad click row for {r}"),
                    ));
                }
                filled[index[&r]] = Some(probs);
            }
            let complete: Option<Vec<_>> = filled.into_iter().collect();
            clicks.push(
                complete.ok_or_else(|| {
                    Error::config("click_table", "every ranking needs a click row")
                })?,
            );
        }
        if rewards.iter().any(|r| r.len() != action_count) {
            return Err(Error::config("rewards", "one value per action required"));
        }
        Ok(Self {
            action_count,
            ranking_length,
            contexts,
            index,
            clicks,
            rewards,
            reward_sigma,
        })
    }

    pub fn contexts(&self) -> &[ContextVector] {
        &self.contexts
    }
}

impl EnvironmentModel for TabularEnvironment {
    fn action_count(&self) -> usize {
        self.action_count
    }

    fn ranking_length(&self) -> usize {
        self.ranking_length
    }

    fn context_dim(&self) -> usize {
        self.contexts.first().map_or(0, |x| x.dim())
    }

    fn reward_sigma(&self) -> f64 {
        self.reward_sigma
    }

    fn reward_independent(&self) -> bool {
        true
    }

    fn context_terms(&self, x: &ContextVector) -> Result<ContextTerms> {
        let id = x.id.ok_or(Error::MissingContextId("tabular environment"))?;
        let rewards = self
            .rewards
            .get(id as usize)
            .ok_or(Error::UnknownContext(id))?;
        Ok(ContextTerms {
            click: Vec::new(),
            reward: rewards.clone(),
            id: Some(id),
        })
    }

    fn click_probs(&self, terms: &ContextTerms, ranking: &Ranking) -> Result<Vec<f64>> {
        let id = terms
            .id
            .ok_or(Error::MissingContextId("tabular environment"))?;
        let i = *self
            .index
            .get(ranking)
            .ok_or_else(|| Error::config("ranking", format!("{ranking} not in table")))?;
        Ok(self.clicks[id as usize][i].clone())
    }

    fn potential_rewards(&self, terms: &ContextTerms, ranking: &Ranking) -> Vec<f64> {
        ranking
            .slots()
            .iter()
            .map(|a| terms.reward[a.index()])
            .collect()
    }

    fn sample_context(&self, rng: &mut RngStream) -> ContextVector {
        self.contexts[rng.random_range(0..self.contexts.len())].clone()
    }

    fn finite_contexts(&self) -> Option<&[ContextVector]> {
        Some(&self.contexts)
    }

    fn value_score(&self) -> Scorer {
        Scorer::Table(ScoreTable {
            score_table: self.rewards.clone(),
        })
    }

    fn click_score(&self) -> Scorer {
        // Mean click probability of each action over the rankings placing it first.
        let table = self
            .clicks
            .iter()
            .map(|rows| {
                let mut sum = vec![0.0; self.action_count];
                let mut count = vec![0usize; self.action_count];
                for (r, &i) in &self.index {
                    sum[r.at(1).index()] += rows[i][0];
                    count[r.at(1).index()] += 1;
                }
                sum.iter().zip(&count).map(|(s, c)| s / *c as f64).collect()
            })
            .collect();
        Scorer::Table(ScoreTable { score_table: table })
    }
}
