//! Property checks over randomly drawn policies, environments and datasets.

use proptest::prelude::*;
use rankope::environment::{
    build_synthetic, generate_logged_dataset, marginal_click_probs, ContextSource,
    EnvironmentModel, SyntheticConfig,
};
use rankope::estimators::{record_forms, EstimatorKind, EstimatorRequest, TrueClicks};
use rankope::policy::ScoreFunction;
use rankope::{
    ContextVector, MarginalConfig, PolicyKind, PolicyPair, PolicySpec, RngStream, Scorer,
};

#[derive(Clone, Debug)]
enum Family {
    PlackettLuce,
    Greedy,
    EpsilonGreedy(f64),
    Mixture(f64, f64),
    Threshold(f64),
}

fn family() -> impl Strategy<Value = Family> {
    prop_oneof![
        Just(Family::PlackettLuce),
        Just(Family::Greedy),
        (0.0..=1.0f64).prop_map(Family::EpsilonGreedy),
        (0.0..=1.0f64, 0.0..=1.0f64).prop_map(|(e, w)| Family::Mixture(e, w)),
        (-1.0..1.0f64).prop_map(Family::Threshold),
    ]
}

fn policy(fam: &Family, theta_a: Vec<f64>, k: usize) -> PolicySpec {
    let n = theta_a.len();
    let score = Scorer::Linear(ScoreFunction {
        theta_x: vec![0.5, -0.5],
        theta_a,
        theta_xa: vec![0.0; n],
    });
    let kind = match *fam {
        Family::PlackettLuce => PolicyKind::PlackettLuce { score },
        Family::Greedy => PolicyKind::GreedyDeterministic { score },
        Family::EpsilonGreedy(epsilon) => PolicyKind::EpsilonGreedy { epsilon, score },
        Family::Mixture(epsilon, mixture_weight) => PolicyKind::Mixture {
            epsilon,
            mixture_weight,
            score,
        },
        Family::Threshold(alpha) => PolicyKind::ThresholdMixed { alpha, score },
    };
    PolicySpec::new(kind, k)
}

/// `(|A|, K, θ_a)` with `1 ≤ K ≤ |A| ≤ 5`.
fn shape() -> impl Strategy<Value = (usize, Vec<f64>)> {
    (2usize..=5).prop_flat_map(|n| (1..=n, prop::collection::vec(-2.0..2.0f64, n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn support_is_a_distribution((k, theta) in shape(), fam in family(), x0 in -2.0..2.0f64) {
        let p = policy(&fam, theta, k);
        let x = ContextVector::new(vec![x0, 0.3]);
        let support = p.support(&x, usize::MAX).unwrap();
        let total: f64 = support.iter().map(|(_, q)| q).sum();
        prop_assert!((total - 1.0).abs() < 1e-9, "total {total}");
        for (r, q) in &support {
            prop_assert!(*q > 0.0);
            prop_assert_eq!(r.len(), k);
            let direct = p.ranking_probability(&x, r).unwrap();
            prop_assert!((direct - q).abs() < 1e-12);
        }
    }

    #[test]
    fn position_marginals_are_doubly_substochastic(
        (k, theta) in shape(), fam in family(), x0 in -2.0..2.0f64
    ) {
        let p = policy(&fam, theta.clone(), k);
        let x = ContextVector::new(vec![x0, -0.7]);
        let m = p.position_marginals(&x, &MarginalConfig::default()).unwrap();
        prop_assert!(!m.approximate);
        for row in &m.probs {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
        for a in 0..theta.len() {
            let s: f64 = m.probs.iter().map(|row| row[a]).sum();
            prop_assert!(s <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn prefix_marginals_shrink_to_the_ranking_probability(
        (k, theta) in shape(), fam in family(), x0 in -2.0..2.0f64, seed in 0u64..1000
    ) {
        let p = policy(&fam, theta, k);
        let x = ContextVector::new(vec![x0, 1.1]);
        let r = p.sample_ranking(&x, &mut RngStream::new(seed)).unwrap();
        let mut last = 1.0;
        for j in 1..=k {
            let q = p.prefix_marginal(&x, &r.slots()[..j]).unwrap();
            prop_assert!(q > 0.0, "sampled prefix must have positive mass");
            prop_assert!(q <= last + 1e-12);
            last = q;
        }
        let full = p.ranking_probability(&x, &r).unwrap();
        prop_assert!((last - full).abs() < 1e-12);
    }

    #[test]
    fn marginal_click_mass_matches_ranking_sum(
        seed in 0u64..500, k in 1usize..=4, lambda in 0.0..1.0f64, fam in family()
    ) {
        let cfg = SyntheticConfig {
            context_dim: 2,
            action_count: 4,
            ranking_length: k,
            lambda,
            reward_sigma: 1.0,
        };
        let env = build_synthetic(&cfg, &RngStream::new(seed)).unwrap();
        let p = policy(&fam, vec![0.1, -0.4, 0.9, 0.0], k);
        let x = env.sample_context(&mut RngStream::new(seed).derive("x"));
        let (marg, approx) = marginal_click_probs(&env, &p, &x, &MarginalConfig::default()).unwrap();
        prop_assert!(!approx);
        let terms = env.context_terms(&x).unwrap();
        let mut expected = 0.0;
        for (r, q) in p.support(&x, usize::MAX).unwrap() {
            expected += q * env.click_probs(&terms, &r).unwrap().iter().sum::<f64>();
        }
        prop_assert!((marg.iter().sum::<f64>() - expected).abs() < 1e-12);
        prop_assert!(marg.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    /// With `π = π_0` every importance weight is one.
    #[test]
    fn on_policy_weights_are_one(seed in 0u64..500, fam in family()) {
        let cfg = SyntheticConfig {
            context_dim: 2,
            action_count: 4,
            ranking_length: 3,
            lambda: 0.5,
            reward_sigma: 1.0,
        };
        let env = build_synthetic(&cfg, &RngStream::new(seed)).unwrap();
        let p = policy(&fam, vec![0.3, 0.2, -0.1, 0.5], 3);
        let pair = PolicyPair::on_policy(p.clone());
        let truth = TrueClicks(&env);
        let requests = [
            EstimatorRequest::plain(EstimatorKind::Ips),
            EstimatorRequest::plain(EstimatorKind::Iips),
            EstimatorRequest::plain(EstimatorKind::Rips),
            EstimatorRequest::cips(&truth),
        ];
        let data = generate_logged_dataset(
            &env, &p, 5, ContextSource::Environment, &RngStream::new(seed).derive("d"),
        ).unwrap();
        for rec in &data.records {
            for f in record_forms(&requests, &pair, &rec.context, &rec.ranking, &MarginalConfig::default()).unwrap() {
                prop_assert!(f.weights.iter().all(|w| (w - 1.0).abs() < 1e-9), "{:?}", f.weights);
                prop_assert_eq!(f.offset, 0.0);
            }
        }
    }

    /// Logged datasets survive a JSON-lines round trip bit for bit.
    #[test]
    fn dataset_jsonl_round_trip(seed in 0u64..200, n in 1usize..20) {
        let cfg = SyntheticConfig { context_dim: 3, action_count: 4, ranking_length: 2, ..Default::default() };
        let env = build_synthetic(&cfg, &RngStream::new(seed)).unwrap();
        let p = policy(&Family::PlackettLuce, vec![0.0; 4], 2);
        let p = PolicySpec { kind: match p.kind {
            PolicyKind::PlackettLuce { score: Scorer::Linear(mut f) } => {
                f.theta_x = vec![0.1, 0.2, 0.3];
                PolicyKind::PlackettLuce { score: Scorer::Linear(f) }
            }
            other => other,
        }, ..p };
        let data = generate_logged_dataset(&env, &p, n, ContextSource::Environment, &RngStream::new(seed)).unwrap();
        let mut buf = Vec::new();
        data.write_jsonl(&mut buf).unwrap();
        let back = rankope::LoggedDataset::read_jsonl(&buf[..]).unwrap();
        prop_assert_eq!(back.records, data.records);
    }
}
