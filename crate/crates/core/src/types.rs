//! Contexts, actions, rankings and logged interaction data.
//!
//! Positions are 1-based everywhere in the public API (`k = 1..=K`); the
//! conversion to slot indices happens inside [`Ranking`].

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionId(pub u32);

impl ActionId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for ActionId {
    fn from(i: usize) -> Self {
        ActionId(i as u32)
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{}", self.0)
    }
}

/// Context features. `id` is set when the context comes from a finite table
/// (semi-synthetic users, tabular toy worlds) and is how tabular policies and
/// table-backed environments look the context up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextVector {
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u32>,
}

impl ContextVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, id: None }
    }

    pub fn with_id(values: Vec<f64>, id: u32) -> Self {
        Self {
            values,
            id: Some(id),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `x^(1)`, the coordinate that gates the threshold-mixed logging policy.
    pub fn first(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Stable 64-bit key used for keyed noise.
    pub(crate) fn key(&self) -> u64 {
        let mut h = self.id.map_or(0x9e37, |i| i as u64 + 1);
        for v in &self.values {
            h = crate::rng::mix64(h ^ v.to_bits());
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum RankingViolation {
    #[error("ranking has length {found}, expected {expected}")]
    WrongLength { expected: usize, found: usize },
    #[error("action {action} appears more than once")]
    DuplicateAction { action: ActionId },
    #[error("action {action} is outside the action set of size {action_count}")]
    OutOfRange {
        action: ActionId,
        action_count: usize,
    },
}

/// An ordered K-permutation of actions.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ranking(Vec<ActionId>);

impl Ranking {
    pub fn new(slots: Vec<ActionId>) -> Self {
        Ranking(slots)
    }

    pub fn from_indices(slots: &[usize]) -> Self {
        Ranking(slots.iter().map(|&i| ActionId::from(i)).collect())
    }

    pub fn slots(&self) -> &[ActionId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Action at 1-based position `k`.
    pub fn at(&self, k: usize) -> ActionId {
        self.0[k - 1]
    }

    /// 1-based position of `a`, or `None` when `a` is not ranked.
    pub fn position_of(&self, a: ActionId) -> Option<usize> {
        self.0.iter().position(|&s| s == a).map(|i| i + 1)
    }

    pub fn contains(&self, a: ActionId) -> bool {
        self.0.contains(&a)
    }

    pub fn validate(&self, action_count: usize, k: usize) -> Result<(), RankingViolation> {
        validate_ranking(self, action_count, k)
    }
}

impl fmt::Display for Ranking {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, a) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{a}")?;
        }
        write!(f, ")")
    }
}

pub fn validate_ranking(
    ranking: &Ranking,
    action_count: usize,
    k: usize,
) -> Result<(), RankingViolation> {
    if ranking.len() != k {
        return Err(RankingViolation::WrongLength {
            expected: k,
            found: ranking.len(),
        });
    }
    let mut seen = vec![false; action_count];
    for &a in ranking.slots() {
        if a.index() >= action_count {
            return Err(RankingViolation::OutOfRange {
                action: a,
                action_count,
            });
        }
        if std::mem::replace(&mut seen[a.index()], true) {
            return Err(RankingViolation::DuplicateAction { action: a });
        }
    }
    Ok(())
}

/// 1-based position of `a` in `ranking`.
pub fn action_position(ranking: &Ranking, a: ActionId) -> Option<usize> {
    ranking.position_of(a)
}

mod bits {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[bool], s: S) -> Result<S::Ok, S::Error> {
        let ints: Vec<u8> = v.iter().map(|&b| b as u8).collect();
        ints.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let ints = Vec::<u8>::deserialize(d)?;
        ints.into_iter()
            .map(|i| match i {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(serde::de::Error::custom(format!(
                    "click entries must be 0 or 1, got {other}"
                ))),
            })
            .collect()
    }
}

/// One logged interaction `(x, A, C, C·R)`.
///
/// `observed_rewards[k]` is the censored product `C(k)·R(k)`: zero whenever the
/// slot was not clicked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoggedRecord {
    pub context: ContextVector,
    pub ranking: Ranking,
    #[serde(with = "bits")]
    pub clicks: Vec<bool>,
    pub observed_rewards: Vec<f64>,
}

impl LoggedRecord {
    /// Builds a record from clicks and potential rewards, applying censoring.
    pub fn from_potential(
        context: ContextVector,
        ranking: Ranking,
        clicks: Vec<bool>,
        potential: &[f64],
    ) -> Self {
        let observed_rewards = clicks
            .iter()
            .zip(potential)
            .map(|(&c, &r)| if c { r } else { 0.0 })
            .collect();
        Self {
            context,
            ranking,
            clicks,
            observed_rewards,
        }
    }

    /// `C(a)·R(a)`: the observed reward at `a`'s position, or 0 when `a` is
    /// unranked or unclicked.
    pub fn observed_click_reward(&self, a: ActionId) -> f64 {
        match self.ranking.position_of(a) {
            Some(k) if self.clicks[k - 1] => self.observed_rewards[k - 1],
            _ => 0.0,
        }
    }

    /// `Σ_k C(k)R(k)`.
    pub fn total_reward(&self) -> f64 {
        self.observed_rewards.iter().sum()
    }

    pub fn validate(&self, action_count: usize, k: usize, context_dim: usize) -> Result<()> {
        self.ranking.validate(action_count, k)?;
        if self.context.dim() != context_dim {
            return Err(Error::DimensionMismatch {
                what: "context",
                expected: context_dim,
                found: self.context.dim(),
            });
        }
        if !self.context.is_finite() {
            return Err(Error::config("context", "non-finite entry"));
        }
        for (what, len) in [
            ("clicks", self.clicks.len()),
            ("observed_rewards", self.observed_rewards.len()),
        ] {
            if len != k {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: k,
                    found: len,
                });
            }
        }
        for (c, r) in self.clicks.iter().zip(&self.observed_rewards) {
            if !c && *r != 0.0 {
                return Err(Error::config(
                    "observed_rewards",
                    "non-zero reward at an unclicked slot",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub action_count: usize,
    #[serde(rename = "K")]
    pub ranking_length: usize,
    pub d_x: usize,
    #[serde(default)]
    pub seed_info: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoggedDataset {
    pub records: Vec<LoggedRecord>,
    pub action_count: usize,
    pub ranking_length: usize,
    pub context_dim: usize,
    pub seed_info: Option<String>,
}

impl LoggedDataset {
    pub fn new(action_count: usize, ranking_length: usize, context_dim: usize) -> Self {
        Self {
            records: Vec::new(),
            action_count,
            ranking_length,
            context_dim,
            seed_info: None,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            r.validate(self.action_count, self.ranking_length, self.context_dim)?;
        }
        Ok(())
    }

    /// On-policy sample mean of `Σ_k C(k)R(k)`.
    pub fn mean_total_reward(&self) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(self.records.iter().map(|r| r.total_reward()).sum::<f64>() / self.len() as f64)
    }

    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            action_count: self.action_count,
            ranking_length: self.ranking_length,
            d_x: self.context_dim,
            seed_info: self.seed_info.clone(),
        }
    }

    /// Line-delimited JSON: one header line, then one record per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &self.header())?;
        writeln!(w)?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header: DatasetHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(Error::EmptyDataset),
        };
        let mut data = LoggedDataset::new(header.action_count, header.ranking_length, header.d_x);
        data.seed_info = header.seed_info;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            data.records.push(serde_json::from_str(&line)?);
        }
        data.validate()?;
        Ok(data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table1_record() -> LoggedRecord {
        LoggedRecord::from_potential(
            ContextVector::with_id(vec![0.0], 0),
            Ranking::from_indices(&[0, 1, 2, 3]),
            vec![false, true, false, false],
            &[3000.0, 1000.0, 2000.0, 500.0],
        )
    }

    #[test]
    fn identity_permutation_is_valid() {
        assert_eq!(
            validate_ranking(&Ranking::from_indices(&[0, 1, 2]), 3, 3),
            Ok(())
        );
    }

    #[test]
    fn violations_are_named() {
        assert_eq!(
            validate_ranking(&Ranking::from_indices(&[0, 0, 2]), 3, 3),
            Err(RankingViolation::DuplicateAction {
                action: ActionId(0)
            })
        );
        assert_eq!(
            validate_ranking(&Ranking::from_indices(&[0, 1]), 3, 3),
            Err(RankingViolation::WrongLength {
                expected: 3,
                found: 2
            })
        );
        assert_eq!(
            validate_ranking(&Ranking::from_indices(&[0, 1, 5]), 3, 3),
            Err(RankingViolation::OutOfRange {
                action: ActionId(5),
                action_count: 3
            })
        );
    }

    #[test]
    fn positions_in_toy_rankings() {
        // A1 = (a1, a2, a3), A5 = (a3, a1, a2) with 0-based ids.
        let a1 = Ranking::from_indices(&[0, 1, 2]);
        let a5 = Ranking::from_indices(&[2, 0, 1]);
        assert_eq!(action_position(&a1, ActionId(1)), Some(2));
        assert_eq!(action_position(&a5, ActionId(0)), Some(2));
        let short = Ranking::from_indices(&[0, 2]);
        assert_eq!(action_position(&short, ActionId(1)), None);
    }

    #[test]
    fn censored_rewards_follow_table1() {
        let r = table1_record();
        assert_eq!(r.observed_rewards, vec![0.0, 1000.0, 0.0, 0.0]);
        assert_eq!(r.observed_click_reward(ActionId(1)), 1000.0);
        assert_eq!(r.observed_click_reward(ActionId(0)), 0.0);
        let short = LoggedRecord::from_potential(
            ContextVector::new(vec![]),
            Ranking::from_indices(&[0, 2]),
            vec![true, true],
            &[1.0, 2.0],
        );
        assert_eq!(short.observed_click_reward(ActionId(1)), 0.0);
    }

    #[test]
    fn jsonl_roundtrip() {
        let mut data = LoggedDataset::new(4, 4, 1);
        data.seed_info = Some("7:gen".into());
        data.records.push(table1_record());
        let mut buf = Vec::new();
        data.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().contains("\"K\":4"));
        assert!(text
            .lines()
            .nth(1)
            .unwrap()
            .contains("\"clicks\":[0,1,0,0]"));
        let back = LoggedDataset::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn jsonl_rejects_uncensored_rewards() {
        let text = "{\"action_count\":2,\"K\":2,\"d_x\":1}\n\
            {\"context\":{\"values\":[0.0]},\"ranking\":[0,1],\"clicks\":[0,1],\"observed_rewards\":[1.0,2.0]}\n";
        assert!(LoggedDataset::read_jsonl(text.as_bytes()).is_err());
    }
}
