//! The three-action, single-context toy world under a point-mass logging
//! policy, and the recomputation of every weight it is known for.

use std::sync::Arc;

use super::{CheckResult, CheckStatus, VerificationReport};
use crate::environment::{EnvironmentModel, TabularEnvironment};
use crate::error::Result;
use crate::estimators::{record_forms, EstimatorKind, EstimatorRequest, TrueClicks};
use crate::policy::{
    all_rankings, MarginalConfig, PolicyKind, PolicyPair, PolicySpec, TabularEntry,
};
use crate::types::{ActionId, ContextVector, LoggedRecord, Ranking};

/// Exact-match tolerance of the toy checks.
pub const TOY_TOLERANCE: f64 = 1e-12;

/// Rankings `A1..A6` in the toy's column order.
const RANKINGS: [[u32; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];
const TARGET: [f64; 6] = [0.1, 0.3, 0.3, 0.1, 0.0, 0.2];
const LOGGING: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
/// `p_c(x1, A(k), A)`: rows are positions, columns `A1..A6`.
const CLICKS: [[f64; 6]; 3] = [
    [0.8, 0.5, 0.7, 0.2, 0.4, 0.4],
    [0.5, 0.6, 0.6, 0.5, 0.3, 0.4],
    [0.2, 0.1, 0.5, 0.4, 0.2, 0.1],
];
/// Potential rewards of (a1, a2, a3) in the worked record.
const REWARDS: [f64; 3] = [3000.0, 1000.0, 2000.0];

/// Published click-weight row for a1, which the click table does not reproduce.
pub const PUBLISHED_A1_MARGINAL: f64 = 0.55;
pub const PUBLISHED_A1_WEIGHT: f64 = 0.6875;

#[derive(Clone, Debug)]
pub struct ToyWorld {
    pub env: Arc<TabularEnvironment>,
    pub pair: PolicyPair,
    pub context: ContextVector,
    /// Logged `A1` with a single click on a2 at position 2.
    pub record: LoggedRecord,
}

fn tabular(probs: &[f64; 6]) -> PolicySpec {
    PolicySpec::new(
        PolicyKind::Tabular {
            action_count: 3,
            table: vec![TabularEntry {
                context_id: 0,
                rankings: RANKINGS.iter().map(|r| r.to_vec()).collect(),
                probs: probs.to_vec(),
            }],
        },
        3,
    )
}

pub fn toy_world() -> Result<ToyWorld> {
    let context = ContextVector::with_id(vec![0.0], 0);
    let rows = RANKINGS
        .iter()
        .enumerate()
        .map(|(j, r)| {
            let idx: Vec<usize> = r.iter().map(|&a| a as usize).collect();
            (
                Ranking::from_indices(&idx),
                (0..3).map(|k| CLICKS[k][j]).collect(),
            )
        })
        .collect();
    let env = TabularEnvironment::new(
        3,
        3,
        vec![context.clone()],
        vec![rows],
        vec![REWARDS.to_vec()],
        1.0,
    )?;
    let pair = PolicyPair::new(tabular(&LOGGING), tabular(&TARGET))?;
    let record = LoggedRecord::from_potential(
        context.clone(),
        Ranking::from_indices(&[0, 1, 2]),
        vec![false, true, false],
        &REWARDS,
    );
    Ok(ToyWorld {
        env: Arc::new(env),
        pair,
        context,
        record,
    })
}

/// Recomputes the toy's ranking-wise, position-wise, prefix and click weights
/// through the library's estimators.
pub fn verify_toy() -> Result<VerificationReport> {
    let w = toy_world()?;
    let cfg = MarginalConfig::exact_only();
    let x = &w.context;
    let mut report = VerificationReport::new("toy weights (single context, point-mass logging)");
    let tol = TOY_TOLERANCE;

    // Support accounting.
    let space = all_rankings(3, 3);
    let unsupported = space
        .iter()
        .map(|r| w.pair.logging.ranking_probability(x, r))
        .collect::<Result<Vec<_>>>()?
        .iter()
        .filter(|p| **p == 0.0)
        .count();
    report.push(CheckResult::compare(
        "unsupported rankings (of 6)",
        5.0,
        unsupported as f64,
        0.5,
    ));
    let logging_marginals = w.pair.logging.position_marginals(x, &cfg)?;
    let unsupported_cells = logging_marginals
        .probs
        .iter()
        .flatten()
        .filter(|p| **p == 0.0)
        .count();
    report.push(CheckResult::compare(
        "unsupported (action, position) cells (of 9)",
        6.0,
        unsupported_cells as f64,
        0.5,
    ));

    let truth = TrueClicks(w.env.as_ref() as &dyn EnvironmentModel);
    let requests = [
        EstimatorRequest::plain(EstimatorKind::Ips),
        EstimatorRequest::plain(EstimatorKind::Iips),
        EstimatorRequest::plain(EstimatorKind::Rips),
        EstimatorRequest::cips(&truth),
    ];
    let forms = record_forms(&requests, &w.pair, x, &w.record.ranking, &cfg)?;

    report.push(CheckResult::compare(
        "IPS weight w(x1, A1)",
        0.1,
        forms[0].weights[0],
        tol,
    ));
    for (k, expected) in [0.4, 0.3, 0.4].into_iter().enumerate() {
        report.push(CheckResult::compare(
            format!("IIPS weight at k={}", k + 1),
            expected,
            forms[1].weights[k],
            tol,
        ));
    }
    for (k, expected) in [0.4, 0.1, 0.1].into_iter().enumerate() {
        report.push(CheckResult::compare(
            format!("RIPS prefix weight at k={}", k + 1),
            expected,
            forms[2].weights[k],
            tol,
        ));
    }

    let q = crate::estimators::ClickProbProvider::quantities(
        &truth,
        &w.pair,
        x,
        &w.record.ranking,
        &cfg,
    )?;
    for (a, name, p_pi, p_pi0, weight) in
        [(1usize, "a2", 0.39, 0.5, 0.78), (2, "a3", 0.48, 0.2, 2.4)]
    {
        report.push(CheckResult::compare(
            format!("p_c(x1, {name}, π)"),
            p_pi,
            q.target[a],
            tol,
        ));
        report.push(CheckResult::compare(
            format!("p_c(x1, {name}, π0)"),
            p_pi0,
            q.logging[a],
            tol,
        ));
        let slot = w
            .record
            .ranking
            .position_of(ActionId(a as u32))
            .expect("in ranking")
            - 1;
        report.push(CheckResult::compare(
            format!("CIPS weight w(x1, {name})"),
            weight,
            forms[3].weights[slot],
            tol,
        ));
    }
    report.push(CheckResult::compare(
        "p_c(x1, a1, π) (derived)",
        0.47,
        q.target[0],
        tol,
    ));
    report.push(CheckResult::compare(
        "p_c(x1, a1, π0)",
        0.8,
        q.logging[0],
        tol,
    ));
    report.push(CheckResult::compare(
        "CIPS weight w(x1, a1) (derived 0.47/0.8)",
        0.5875,
        forms[3].weights[0],
        tol,
    ));
    report.push(CheckResult {
        name: "CIPS weight w(x1, a1) published".into(),
        status: CheckStatus::Noted,
        expected: PUBLISHED_A1_WEIGHT,
        actual: forms[3].weights[0],
        gap: (PUBLISHED_A1_WEIGHT - forms[3].weights[0]).abs(),
        tolerance: tol,
        note: format!(
            "documented discrepancy: published {PUBLISHED_A1_MARGINAL}/0.8; the click table gives 0.47/0.8"
        ),
    });

    // Contributions of the worked record (single click on a2 worth 1000).
    let observed = &w.record.observed_rewards;
    for (i, (name, expected)) in [
        ("IPS", 100.0),
        ("IIPS", 300.0),
        ("RIPS", 100.0),
        ("CIPS", 780.0),
    ]
    .into_iter()
    .enumerate()
    {
        report.push(CheckResult::compare(
            format!("{name} contribution of the worked record"),
            expected,
            forms[i].term(observed),
            1e-9,
        ));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_report_passes() {
        let r = verify_toy().unwrap();
        assert!(r.passed(), "{}", r.render());
        let noted = r.get("CIPS weight w(x1, a1) published").unwrap();
        assert_eq!(noted.status, CheckStatus::Noted);
        assert!((noted.gap - 0.1).abs() < 1e-12);
    }
}
