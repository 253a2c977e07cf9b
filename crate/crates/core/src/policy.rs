//! Ranking policies with exact probability queries.
//!
//! Every non-tabular policy is *sequential*: it picks one action per position
//! from the actions not yet placed, so ranking and prefix probabilities are
//! products of per-step factors. Marginals over the ranking space come from
//! depth-first enumeration of the positive-probability support, with a Monte
//! Carlo fallback when the support is too large.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::types::{ActionId, ContextVector, Ranking};

/// Default cap on the number of rankings enumerated exactly (8! = 40,320).
pub const ENUMERATION_CAP: usize = 40_320;

/// `f(x, a) = θ_x·x + θ_a[a] + θ_xa[a]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreFunction {
    pub theta_x: Vec<f64>,
    pub theta_a: Vec<f64>,
    pub theta_xa: Vec<f64>,
}

impl ScoreFunction {
    pub fn zeros(context_dim: usize, action_count: usize) -> Self {
        Self {
            theta_x: vec![0.0; context_dim],
            theta_a: vec![0.0; action_count],
            theta_xa: vec![0.0; action_count],
        }
    }

    /// θ entries i.i.d. from the standard uniform distribution.
    pub fn sample_uniform(context_dim: usize, action_count: usize, rng: &mut RngStream) -> Self {
        let mut draw = |n: usize| (0..n).map(|_| rng.random::<f64>()).collect::<Vec<_>>();
        let theta_x = draw(context_dim);
        let theta_a = draw(action_count);
        let theta_xa = draw(action_count);
        Self {
            theta_x,
            theta_a,
            theta_xa,
        }
    }

    pub fn action_count(&self) -> usize {
        self.theta_a.len()
    }
}

pub fn score(f: &ScoreFunction, x: &ContextVector, a: ActionId) -> Result<f64> {
    if x.dim() != f.theta_x.len() {
        return Err(Error::DimensionMismatch {
            what: "score context",
            expected: f.theta_x.len(),
            found: x.dim(),
        });
    }
    if a.index() >= f.theta_a.len() || f.theta_xa.len() != f.theta_a.len() {
        return Err(Error::DimensionMismatch {
            what: "score action",
            expected: f.theta_a.len(),
            found: a.index() + 1,
        });
    }
    let dot: f64 = f.theta_x.iter().zip(&x.values).map(|(t, v)| t * v).sum();
    Ok(dot + f.theta_a[a.index()] + f.theta_xa[a.index()])
}

/// `f(x, a) = xᵀ M e_a + θ_x·x + θ_a[a] + offset[a]`, the form of the
/// synthetic environment's base functions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BilinearScore {
    /// `d_x × |A|`.
    pub interaction: Vec<Vec<f64>>,
    pub theta_x: Vec<f64>,
    pub theta_a: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub offset: Vec<f64>,
}

/// Explicit per-context scores, indexed by context id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub score_table: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scorer {
    Bilinear(BilinearScore),
    Linear(ScoreFunction),
    Table(ScoreTable),
}

impl Scorer {
    pub fn action_count(&self) -> usize {
        match self {
            Scorer::Linear(f) => f.theta_a.len(),
            Scorer::Bilinear(b) => b.theta_a.len(),
            Scorer::Table(t) => t.score_table.first().map_or(0, |r| r.len()),
        }
    }

    /// The same score with a per-action constant added.
    pub fn with_offset(&self, offsets: &[f64]) -> Scorer {
        let add = |v: &[f64]| -> Vec<f64> { v.iter().zip(offsets).map(|(a, b)| a + b).collect() };
        match self {
            Scorer::Linear(f) => Scorer::Linear(ScoreFunction {
                theta_xa: add(&f.theta_xa),
                ..f.clone()
            }),
            Scorer::Bilinear(b) => {
                let base = if b.offset.is_empty() {
                    vec![0.0; b.theta_a.len()]
                } else {
                    b.offset.clone()
                };
                Scorer::Bilinear(BilinearScore {
                    offset: add(&base),
                    ..b.clone()
                })
            }
            Scorer::Table(t) => Scorer::Table(ScoreTable {
                score_table: t.score_table.iter().map(|row| add(row)).collect(),
            }),
        }
    }

    /// Scores of every action for context `x`.
    pub fn scores(&self, x: &ContextVector) -> Result<Vec<f64>> {
        match self {
            Scorer::Linear(f) => (0..f.action_count())
                .map(|a| score(f, x, ActionId::from(a)))
                .collect(),
            Scorer::Bilinear(b) => {
                if x.dim() != b.theta_x.len() || b.interaction.len() != x.dim() {
                    return Err(Error::DimensionMismatch {
                        what: "bilinear score context",
                        expected: b.theta_x.len(),
                        found: x.dim(),
                    });
                }
                let base: f64 = b.theta_x.iter().zip(&x.values).map(|(t, v)| t * v).sum();
                Ok((0..b.theta_a.len())
                    .map(|a| {
                        let bil: f64 = x
                            .values
                            .iter()
                            .zip(&b.interaction)
                            .map(|(xi, row)| xi * row[a])
                            .sum();
                        base + bil + b.theta_a[a] + b.offset.get(a).copied().unwrap_or(0.0)
                    })
                    .collect())
            }
            Scorer::Table(t) => {
                let id = x.id.ok_or(Error::MissingContextId("table score"))?;
                t.score_table
                    .get(id as usize)
                    .cloned()
                    .ok_or(Error::UnknownContext(id))
            }
        }
    }
}

mod threshold {
    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};
    use std::fmt;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn parse(text: &str) -> Option<f64> {
        match text.trim() {
            "inf" | "+inf" | "∞" | "+∞" | "infinity" => Some(f64::INFINITY),
            "-inf" | "−inf" | "-∞" | "−∞" | "-infinity" => Some(f64::NEG_INFINITY),
            other => other.parse().ok(),
        }
    }

    struct ThresholdVisitor;

    impl Visitor<'_> for ThresholdVisitor {
        type Value = f64;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            write!(f, "a number or one of \"inf\", \"-inf\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(v)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
            parse(v).ok_or_else(|| E::custom(format!("invalid threshold `{v}`")))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        d.deserialize_any(ThresholdVisitor)
    }
}

pub use threshold::parse as parse_threshold;

/// Serde adapter for extended reals (`"inf"`, `"-inf"` or a number).
pub mod extended_real {
    pub use super::threshold::{deserialize, serialize};
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularEntry {
    pub context_id: u32,
    pub rankings: Vec<Vec<u32>>,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    PlackettLuce {
        #[serde(flatten)]
        score: Scorer,
    },
    GreedyDeterministic {
        #[serde(flatten)]
        score: Scorer,
    },
    EpsilonGreedy {
        epsilon: f64,
        #[serde(flatten)]
        score: Scorer,
    },
    /// Plackett–Luce when `x^(1) > alpha`, greedy otherwise.
    ThresholdMixed {
        #[serde(with = "threshold")]
        alpha: f64,
        #[serde(flatten)]
        score: Scorer,
    },
    /// Per-position mixture `w·(ε-greedy) + (1−w)·softmax`.
    Mixture {
        epsilon: f64,
        mixture_weight: f64,
        #[serde(flatten)]
        score: Scorer,
    },
    Tabular {
        action_count: usize,
        table: Vec<TabularEntry>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    #[serde(flatten)]
    pub kind: PolicyKind,
    #[serde(rename = "K")]
    pub ranking_length: usize,
}

/// The logging policy `π_0` and the target policy `π`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyPair {
    pub logging: PolicySpec,
    pub target: PolicySpec,
}

impl PolicyPair {
    pub fn new(logging: PolicySpec, target: PolicySpec) -> Result<Self> {
        if logging.action_count() != target.action_count() {
            return Err(Error::DimensionMismatch {
                what: "policy pair action count",
                expected: logging.action_count(),
                found: target.action_count(),
            });
        }
        if logging.ranking_length != target.ranking_length {
            return Err(Error::DimensionMismatch {
                what: "policy pair ranking length",
                expected: logging.ranking_length,
                found: target.ranking_length,
            });
        }
        Ok(Self { logging, target })
    }

    /// The on-policy pair `(π_0, π_0)`.
    pub fn on_policy(logging: PolicySpec) -> Self {
        Self {
            target: logging.clone(),
            logging,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalConfig {
    pub cap: usize,
    pub mc_samples: usize,
    pub allow_fallback: bool,
    pub mc_seed: u64,
}

impl Default for MarginalConfig {
    fn default() -> Self {
        Self {
            cap: ENUMERATION_CAP,
            mc_samples: 100_000,
            allow_fallback: true,
            mc_seed: 0x6d63,
        }
    }
}

impl MarginalConfig {
    pub fn exact_only() -> Self {
        Self {
            allow_fallback: false,
            ..Self::default()
        }
    }
}

/// A weighted list of rankings: the exact support, or an empirical
/// distribution when enumeration was too large.
#[derive(Clone, Debug)]
pub struct RankingDistribution {
    pub items: Vec<(Ranking, f64)>,
    pub approximate: bool,
}

/// `probs[k-1][a]` = probability that `a` sits at position `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionMarginals {
    pub probs: Vec<Vec<f64>>,
    pub approximate: bool,
}

impl PositionMarginals {
    pub fn get(&self, a: ActionId, k: usize) -> f64 {
        self.probs[k - 1][a.index()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum StepRule {
    Softmax,
    Greedy,
    EpsilonGreedy { epsilon: f64 },
    Mixture { epsilon: f64, weight: f64 },
}

/// A policy specialised to one context.
enum Prepared<'a> {
    Sequential { scores: Vec<f64>, rule: StepRule },
    Table(Option<&'a TabularEntry>),
}

impl Prepared<'_> {
    /// Fills `out` with the conditional distribution of the next action given
    /// the already-placed set `used`.
    fn step(&self, used: &[bool], out: &mut [f64]) {
        let Prepared::Sequential { scores, rule } = self else {
            unreachable!("tabular policies are not sequential")
        };
        let remaining = used.iter().filter(|u| !**u).count();
        out.fill(0.0);
        if remaining == 0 {
            return;
        }
        match *rule {
            StepRule::Softmax => softmax_into(scores, used, out),
            StepRule::Greedy => out[argmax_remaining(scores, used)] = 1.0,
            StepRule::EpsilonGreedy { epsilon } => {
                epsilon_greedy_into(scores, used, remaining, epsilon, out)
            }
            StepRule::Mixture { epsilon, weight } => {
                let mut soft = vec![0.0; out.len()];
                softmax_into(scores, used, &mut soft);
                epsilon_greedy_into(scores, used, remaining, epsilon, out);
                for (o, s) in out.iter_mut().zip(&soft) {
                    *o = weight * *o + (1.0 - weight) * s;
                }
            }
        }
    }
}

fn argmax_remaining(scores: &[f64], used: &[bool]) -> usize {
    let mut best = usize::MAX;
    for (i, &s) in scores.iter().enumerate() {
        if !used[i] && (best == usize::MAX || s > scores[best]) {
            best = i;
        }
    }
    best
}

fn softmax_into(scores: &[f64], used: &[bool], out: &mut [f64]) {
    let max = scores
        .iter()
        .zip(used)
        .filter(|(_, u)| !**u)
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (i, &s) in scores.iter().enumerate() {
        if !used[i] {
            out[i] = (s - max).exp();
            total += out[i];
        }
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn epsilon_greedy_into(scores: &[f64], used: &[bool], remaining: usize, eps: f64, out: &mut [f64]) {
    let uniform = eps / remaining as f64;
    for (i, o) in out.iter_mut().enumerate() {
        if !used[i] {
            *o = uniform;
        }
    }
    out[argmax_remaining(scores, used)] += 1.0 - eps;
}

impl PolicySpec {
    pub fn new(kind: PolicyKind, ranking_length: usize) -> Self {
        Self {
            kind,
            ranking_length,
        }
    }

    pub fn action_count(&self) -> usize {
        match &self.kind {
            PolicyKind::Tabular { action_count, .. } => *action_count,
            PolicyKind::PlackettLuce { score }
            | PolicyKind::GreedyDeterministic { score }
            | PolicyKind::EpsilonGreedy { score, .. }
            | PolicyKind::ThresholdMixed { score, .. }
            | PolicyKind::Mixture { score, .. } => score.action_count(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match &self.kind {
            PolicyKind::PlackettLuce { .. } => "plackett_luce",
            PolicyKind::GreedyDeterministic { .. } => "greedy_deterministic",
            PolicyKind::EpsilonGreedy { .. } => "epsilon_greedy",
            PolicyKind::ThresholdMixed { .. } => "threshold_mixed",
            PolicyKind::Mixture { .. } => "mixture",
            PolicyKind::Tabular { .. } => "tabular",
        }
    }

    /// Checks parameter ranges and, for tabular policies, that every listed
    /// ranking is valid and each context's probabilities sum to one.
    pub fn validate(&self) -> Result<()> {
        let k = self.ranking_length;
        let n = self.action_count();
        if k == 0 || k > n {
            return Err(Error::config(
                "K",
                format!("need 1 <= K <= |A| = {n}, got {k}"),
            ));
        }
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(name, format!("must lie in [0, 1], got {v}")))
            }
        };
        match &self.kind {
            PolicyKind::EpsilonGreedy { epsilon, .. } => unit("epsilon", *epsilon)?,
            PolicyKind::Mixture {
                epsilon,
                mixture_weight,
                ..
            } => {
                unit("epsilon", *epsilon)?;
                unit("mixture_weight", *mixture_weight)?;
            }
            PolicyKind::ThresholdMixed { alpha, .. } if alpha.is_nan() => {
                return Err(Error::config("alpha", "NaN"));
            }
            PolicyKind::Tabular { table, .. } => {
                for entry in table {
                    if entry.rankings.len() != entry.probs.len() {
                        return Err(Error::config("table", "rankings/probs length mismatch"));
                    }
                    for r in &entry.rankings {
                        Ranking::new(r.iter().map(|&a| ActionId(a)).collect()).validate(n, k)?;
                    }
                    if entry.probs.iter().any(|p| !(0.0..=1.0 + 1e-12).contains(p)) {
                        return Err(Error::config("table", "probability outside [0, 1]"));
                    }
                    let total: f64 = entry.probs.iter().sum();
                    if (total - 1.0).abs() > 1e-9 {
                        return Err(Error::config(
                            "table",
                            format!("context {} sums to {total}", entry.context_id),
                        ));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn prepare(&self, x: &ContextVector) -> Result<Prepared<'_>> {
        let (score, rule) = match &self.kind {
            PolicyKind::Tabular { table, .. } => {
                let id = x.id.ok_or(Error::MissingContextId("tabular policy"))?;
                return Ok(Prepared::Table(table.iter().find(|e| e.context_id == id)));
            }
            PolicyKind::PlackettLuce { score } => (score, StepRule::Softmax),
            PolicyKind::GreedyDeterministic { score } => (score, StepRule::Greedy),
            PolicyKind::EpsilonGreedy { epsilon, score } => {
                (score, StepRule::EpsilonGreedy { epsilon: *epsilon })
            }
            PolicyKind::ThresholdMixed { alpha, score } => {
                if x.first() > *alpha {
                    (score, StepRule::Softmax)
                } else {
                    (score, StepRule::Greedy)
                }
            }
            PolicyKind::Mixture {
                epsilon,
                mixture_weight,
                score,
            } => (
                score,
                StepRule::Mixture {
                    epsilon: *epsilon,
                    weight: *mixture_weight,
                },
            ),
        };
        Ok(Prepared::Sequential {
            scores: score.scores(x)?,
            rule,
        })
    }

    /// Whether this policy puts all mass on one ranking for context `x`.
    pub fn is_deterministic_at(&self, x: &ContextVector) -> Result<bool> {
        Ok(match self.prepare(x)? {
            Prepared::Sequential { rule, .. } => match rule {
                StepRule::Greedy => true,
                StepRule::EpsilonGreedy { epsilon } => epsilon == 0.0,
                StepRule::Mixture { epsilon, weight } => epsilon == 0.0 && weight == 1.0,
                StepRule::Softmax => false,
            },
            Prepared::Table(entry) => {
                entry.is_some_and(|e| e.probs.iter().filter(|p| **p > 0.0).count() == 1)
            }
        })
    }

    /// Exact `π(A | x)`.
    pub fn ranking_probability(&self, x: &ContextVector, ranking: &Ranking) -> Result<f64> {
        ranking.validate(self.action_count(), self.ranking_length)?;
        self.sequence_probability(x, ranking.slots())
    }

    /// Probability of the rankings that begin with `prefix`.
    pub fn prefix_marginal(&self, x: &ContextVector, prefix: &[ActionId]) -> Result<f64> {
        self.check_prefix(prefix)?;
        self.sequence_probability(x, prefix)
    }

    fn check_prefix(&self, prefix: &[ActionId]) -> Result<()> {
        let n = self.action_count();
        if prefix.len() > self.ranking_length {
            return Err(Error::InvalidPrefix(format!(
                "length {} exceeds K = {}",
                prefix.len(),
                self.ranking_length
            )));
        }
        let mut seen = vec![false; n];
        for &a in prefix {
            if a.index() >= n {
                return Err(Error::InvalidPrefix(format!("{a} out of range")));
            }
            if std::mem::replace(&mut seen[a.index()], true) {
                return Err(Error::InvalidPrefix(format!("{a} repeated")));
            }
        }
        Ok(())
    }

    fn sequence_probability(&self, x: &ContextVector, seq: &[ActionId]) -> Result<f64> {
        match self.prepare(x)? {
            Prepared::Table(entry) => {
                let Some(entry) = entry else { return Ok(0.0) };
                Ok(entry
                    .rankings
                    .iter()
                    .zip(&entry.probs)
                    .filter(|(r, _)| r.iter().zip(seq).all(|(a, b)| *a == b.0))
                    .map(|(_, p)| p)
                    .sum())
            }
            prepared => {
                let n = self.action_count();
                let mut used = vec![false; n];
                let mut step = vec![0.0; n];
                let mut p = 1.0;
                for &a in seq {
                    prepared.step(&used, &mut step);
                    p *= step[a.index()];
                    if p == 0.0 {
                        break;
                    }
                    used[a.index()] = true;
                }
                Ok(p)
            }
        }
    }

    /// Draws `A ~ π(·|x)` by sequential categorical draws.
    pub fn sample_ranking(&self, x: &ContextVector, rng: &mut RngStream) -> Result<Ranking> {
        let prepared = self.prepare(x)?;
        if let Prepared::Table(entry) = &prepared {
            let entry = entry.ok_or(Error::UnknownContext(x.id.unwrap_or(u32::MAX)))?;
            let i = categorical(&entry.probs, rng.random::<f64>());
            return Ok(Ranking::new(
                entry.rankings[i].iter().map(|&a| ActionId(a)).collect(),
            ));
        }
        let n = self.action_count();
        let mut used = vec![false; n];
        let mut step = vec![0.0; n];
        let mut slots = Vec::with_capacity(self.ranking_length);
        for _ in 0..self.ranking_length {
            prepared.step(&used, &mut step);
            let a = categorical(&step, rng.random::<f64>());
            used[a] = true;
            slots.push(ActionId::from(a));
        }
        Ok(Ranking::new(slots))
    }

    /// The exact positive-probability support of `π(·|x)`.
    pub fn support(&self, x: &ContextVector, cap: usize) -> Result<Vec<(Ranking, f64)>> {
        match self.prepare(x)? {
            Prepared::Table(entry) => Ok(entry
                .map(|e| {
                    e.rankings
                        .iter()
                        .zip(&e.probs)
                        .filter(|(_, p)| **p > 0.0)
                        .map(|(r, p)| (Ranking::new(r.iter().map(|&a| ActionId(a)).collect()), *p))
                        .collect()
                })
                .unwrap_or_default()),
            prepared => {
                let n = self.action_count();
                let mut walk = SupportWalk {
                    prepared: &prepared,
                    k: self.ranking_length,
                    cap,
                    used: vec![false; n],
                    slots: Vec::with_capacity(self.ranking_length),
                    out: Vec::new(),
                    overflow: false,
                };
                walk.descend(1.0);
                if walk.overflow {
                    return Err(Error::EnumerationCap {
                        needed: permutation_count(n, self.ranking_length),
                        cap,
                    });
                }
                Ok(walk.out)
            }
        }
    }

    /// Exact support when it fits under the cap, otherwise (if allowed) the
    /// empirical distribution of `cfg.mc_samples` draws.
    pub fn distribution(
        &self,
        x: &ContextVector,
        cfg: &MarginalConfig,
    ) -> Result<RankingDistribution> {
        match self.support(x, cfg.cap) {
            Ok(items) => Ok(RankingDistribution {
                items,
                approximate: false,
            }),
            Err(Error::EnumerationCap { .. }) if cfg.allow_fallback => {
                let mut rng = RngStream::new(cfg.mc_seed).derive(x.key());
                let mut counts: HashMap<Ranking, usize> = HashMap::new();
                for _ in 0..cfg.mc_samples {
                    *counts.entry(self.sample_ranking(x, &mut rng)?).or_default() += 1;
                }
                let mut items: Vec<_> = counts
                    .into_iter()
                    .map(|(r, c)| (r, c as f64 / cfg.mc_samples as f64))
                    .collect();
                items.sort_by(|a, b| a.0.cmp(&b.0));
                Ok(RankingDistribution {
                    items,
                    approximate: true,
                })
            }
            Err(e) => Err(e),
        }
    }

    /// Position-wise marginals `π(a at k | x)` for every `(k, a)`.
    pub fn position_marginals(
        &self,
        x: &ContextVector,
        cfg: &MarginalConfig,
    ) -> Result<PositionMarginals> {
        let dist = self.distribution(x, cfg)?;
        let mut probs = vec![vec![0.0; self.action_count()]; self.ranking_length];
        for (r, p) in &dist.items {
            for (slot, a) in r.slots().iter().enumerate() {
                probs[slot][a.index()] += p;
            }
        }
        Ok(PositionMarginals {
            probs,
            approximate: dist.approximate,
        })
    }

    pub fn position_marginal(
        &self,
        x: &ContextVector,
        a: ActionId,
        k: usize,
        cfg: &MarginalConfig,
    ) -> Result<f64> {
        if k == 0 || k > self.ranking_length {
            return Err(Error::InvalidPrefix(format!("position {k} outside 1..=K")));
        }
        Ok(self.position_marginals(x, cfg)?.get(a, k))
    }
}

/// `support_set(π, x)`: the exact positive-probability rankings.
pub fn support_set(p: &PolicySpec, x: &ContextVector, cap: usize) -> Result<Vec<(Ranking, f64)>> {
    p.support(x, cap)
}

struct SupportWalk<'p, 'a> {
    prepared: &'p Prepared<'a>,
    k: usize,
    cap: usize,
    used: Vec<bool>,
    slots: Vec<ActionId>,
    out: Vec<(Ranking, f64)>,
    overflow: bool,
}

impl SupportWalk<'_, '_> {
    fn descend(&mut self, p: f64) {
        if self.overflow {
            return;
        }
        if self.slots.len() == self.k {
            if self.out.len() == self.cap {
                self.overflow = true;
                return;
            }
            self.out.push((Ranking::new(self.slots.clone()), p));
            return;
        }
        let mut step = vec![0.0; self.used.len()];
        self.prepared.step(&self.used, &mut step);
        for (a, &q) in step.iter().enumerate() {
            if q > 0.0 {
                self.used[a] = true;
                self.slots.push(ActionId::from(a));
                self.descend(p * q);
                self.slots.pop();
                self.used[a] = false;
            }
        }
    }
}

fn categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// `P(n, k) = n! / (n-k)!`, saturating.
pub fn permutation_count(n: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc.saturating_mul(n - i))
}

/// Every K-permutation of `0..n` in lexicographic order.
pub fn all_rankings(n: usize, k: usize) -> Vec<Ranking> {
    fn go(n: usize, k: usize, used: &mut [bool], cur: &mut Vec<ActionId>, out: &mut Vec<Ranking>) {
        if cur.len() == k {
            out.push(Ranking::new(cur.clone()));
            return;
        }
        for a in 0..n {
            if !used[a] {
                used[a] = true;
                cur.push(ActionId::from(a));
                go(n, k, used, cur, out);
                cur.pop();
                used[a] = false;
            }
        }
    }
    let mut out = Vec::with_capacity(permutation_count(n, k));
    go(n, k, &mut vec![false; n], &mut Vec::new(), &mut out);
    out
}

/// The greedy ranking: actions by descending score, ties to the lowest index.
pub fn greedy_ranking(scores: &[f64], k: usize) -> Ranking {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ranking::from_indices(&idx[..k])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ctx(v: &[f64]) -> ContextVector {
        ContextVector::new(v.to_vec())
    }

    fn linear(theta_a: &[f64]) -> Scorer {
        Scorer::Linear(ScoreFunction {
            theta_x: vec![0.0; 2],
            theta_a: theta_a.to_vec(),
            theta_xa: vec![0.0; theta_a.len()],
        })
    }

    /// Toy world: context x1, rankings A1..A6 over (a1, a2, a3).
    pub(crate) fn toy_policies() -> (PolicySpec, PolicySpec) {
        let rankings = vec![
            vec![0, 1, 2],
            vec![0, 2, 1],
            vec![1, 0, 2],
            vec![1, 2, 0],
            vec![2, 0, 1],
            vec![2, 1, 0],
        ];
        let tab = |probs: Vec<f64>| {
            PolicySpec::new(
                PolicyKind::Tabular {
                    action_count: 3,
                    table: vec![TabularEntry {
                        context_id: 0,
                        rankings: rankings.clone(),
                        probs,
                    }],
                },
                3,
            )
        };
        (
            tab(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
            tab(vec![0.1, 0.3, 0.3, 0.1, 0.0, 0.2]),
        )
    }

    fn x1() -> ContextVector {
        ContextVector::with_id(vec![0.0], 0)
    }

    #[test]
    fn score_examples() {
        let f = ScoreFunction::zeros(3, 3);
        assert_eq!(score(&f, &ctx(&[1.0, 2.0, 3.0]), ActionId(2)).unwrap(), 0.0);
        let f = ScoreFunction {
            theta_x: vec![0.0; 2],
            theta_a: vec![1.0, 2.0, 3.0],
            theta_xa: vec![0.0; 3],
        };
        assert_eq!(score(&f, &ctx(&[5.0, -1.0]), ActionId(1)).unwrap(), 2.0);
        assert!(score(&f, &ctx(&[1.0]), ActionId(0)).is_err());
    }

    #[test]
    fn uniform_plackett_luce_is_one_sixth() {
        let p = PolicySpec::new(
            PolicyKind::PlackettLuce {
                score: linear(&[0.0; 3]),
            },
            3,
        );
        for r in all_rankings(3, 3) {
            assert_abs_diff_eq!(
                p.ranking_probability(&ctx(&[0.3, 0.1]), &r).unwrap(),
                1.0 / 6.0,
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn epsilon_extremes() {
        let s = linear(&[0.5, 2.0, 1.0]);
        let uniform = PolicySpec::new(
            PolicyKind::EpsilonGreedy {
                epsilon: 1.0,
                score: s.clone(),
            },
            3,
        );
        let greedy = PolicySpec::new(
            PolicyKind::EpsilonGreedy {
                epsilon: 0.0,
                score: s,
            },
            3,
        );
        let x = ctx(&[0.0, 0.0]);
        let best = Ranking::from_indices(&[1, 2, 0]);
        for r in all_rankings(3, 3) {
            assert_abs_diff_eq!(
                uniform.ranking_probability(&x, &r).unwrap(),
                1.0 / 6.0,
                epsilon = 1e-15
            );
            let expected = if r == best { 1.0 } else { 0.0 };
            assert_eq!(greedy.ranking_probability(&x, &r).unwrap(), expected);
        }
    }

    #[test]
    fn toy_tabular_queries() {
        let (logging, target) = toy_policies();
        let x = x1();
        let a2 = Ranking::from_indices(&[0, 2, 1]);
        assert_eq!(target.ranking_probability(&x, &a2).unwrap(), 0.3);
        let cfg = MarginalConfig::exact_only();
        assert_abs_diff_eq!(
            target.position_marginal(&x, ActionId(0), 1, &cfg).unwrap(),
            0.4,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            target.position_marginal(&x, ActionId(1), 2, &cfg).unwrap(),
            0.3,
            epsilon = 1e-15
        );
        assert_eq!(
            logging.position_marginal(&x, ActionId(0), 1, &cfg).unwrap(),
            1.0
        );
        assert_eq!(
            logging.position_marginal(&x, ActionId(1), 1, &cfg).unwrap(),
            0.0
        );
        assert_abs_diff_eq!(
            target.prefix_marginal(&x, &[ActionId(0)]).unwrap(),
            0.4,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            target
                .prefix_marginal(&x, &[ActionId(0), ActionId(1)])
                .unwrap(),
            0.1,
            epsilon = 1e-15
        );
        assert_eq!(target.prefix_marginal(&x, &[]).unwrap(), 1.0);
        let support = logging.support(&x, ENUMERATION_CAP).unwrap();
        assert_eq!(support, vec![(Ranking::from_indices(&[0, 1, 2]), 1.0)]);
    }

    #[test]
    fn invalid_prefix_rejected() {
        let (_, target) = toy_policies();
        assert!(target
            .prefix_marginal(&x1(), &[ActionId(0), ActionId(0)])
            .is_err());
        assert!(target.prefix_marginal(&x1(), &[ActionId(7)]).is_err());
    }

    #[test]
    fn greedy_ties_break_to_lowest_index() {
        let p = PolicySpec::new(
            PolicyKind::GreedyDeterministic {
                score: linear(&[1.0, 3.0, 1.0, 3.0]),
            },
            4,
        );
        let mut rng = RngStream::new(0);
        let r = p.sample_ranking(&ctx(&[0.0, 0.0]), &mut rng).unwrap();
        assert_eq!(r, Ranking::from_indices(&[1, 3, 0, 2]));
        assert_eq!(greedy_ranking(&[1.0, 3.0, 1.0, 3.0], 4), r);
        assert_eq!(p.support(&ctx(&[0.0, 0.0]), 10).unwrap().len(), 1);
    }

    #[test]
    fn epsilon_greedy_has_full_support() {
        let p = PolicySpec::new(
            PolicyKind::EpsilonGreedy {
                epsilon: 0.2,
                score: linear(&[0.1, 0.4, 0.3, 0.2]),
            },
            3,
        );
        assert_eq!(
            p.support(&ctx(&[0.0, 0.0]), ENUMERATION_CAP).unwrap().len(),
            24
        );
    }

    #[test]
    fn threshold_branches() {
        let s = linear(&[0.1, 0.4, 0.3]);
        let det = PolicySpec::new(
            PolicyKind::ThresholdMixed {
                alpha: f64::INFINITY,
                score: s.clone(),
            },
            3,
        );
        let sto = PolicySpec::new(
            PolicyKind::ThresholdMixed {
                alpha: f64::NEG_INFINITY,
                score: s,
            },
            3,
        );
        for v in [-1e9, -2.0, 0.0, 3.0, 1e9] {
            let x = ctx(&[v, 0.0]);
            assert!(det.is_deterministic_at(&x).unwrap());
            assert!(!sto.is_deterministic_at(&x).unwrap());
            assert_eq!(sto.support(&x, 100).unwrap().len(), 6);
        }
    }

    #[test]
    fn cap_triggers_fallback() {
        let p = PolicySpec::new(
            PolicyKind::PlackettLuce {
                score: linear(&[0.0; 5]),
            },
            5,
        );
        let x = ctx(&[0.0, 0.0]);
        let tight = MarginalConfig {
            cap: 10,
            mc_samples: 20_000,
            ..MarginalConfig::default()
        };
        assert!(matches!(
            p.support(&x, 10),
            Err(Error::EnumerationCap { needed: 120, .. })
        ));
        let m = p.position_marginals(&x, &tight).unwrap();
        assert!(m.approximate);
        for row in &m.probs {
            for &v in row {
                assert!((v - 0.2).abs() < 0.02);
            }
        }
        let strict = MarginalConfig {
            allow_fallback: false,
            ..tight
        };
        assert!(p.position_marginals(&x, &strict).is_err());
    }

    #[test]
    fn alpha_accepts_infinity_tokens() {
        let json = r#"{"kind":"threshold_mixed","alpha":"inf","theta_x":[0.0],"theta_a":[1.0,2.0],"theta_xa":[0.0,0.0],"K":2}"#;
        let p: PolicySpec = serde_json::from_str(json).unwrap();
        assert!(
            matches!(p.kind, PolicyKind::ThresholdMixed { alpha, .. } if alpha == f64::INFINITY)
        );
        let back = serde_json::to_string(&p).unwrap();
        assert!(back.contains("\"alpha\":\"inf\""));
        let again: PolicySpec = serde_json::from_str(&back).unwrap();
        assert_eq!(again, p);
    }

    #[test]
    fn tabular_json_shape() {
        let (_, target) = toy_policies();
        let text = serde_json::to_string(&target).unwrap();
        assert!(text.starts_with("{\"kind\":\"tabular\""));
        let back: PolicySpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, target);
        target.validate().unwrap();
    }
}
