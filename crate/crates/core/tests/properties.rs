mod common;

use common::*;
use proptest::prelude::*;
use rdecomp::decomp::{evaluate_objective, softmax_decompose, AlphaScheme, DecompositionParams};
use rdecomp::induced::induce;
use rdecomp::metrics::{saturation_score, state_dependence, tv_distance};
use rdecomp::planner::{occupancy, policy_evaluation, value_iteration, DeterministicPolicy, DEFAULT_TOLERANCE};
use rdecomp::qlearn::{Experience, ReplayBuffer};

fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, len).prop_map(|v| {
        let total: f64 = v.iter().sum::<f64>() + 1e-12;
        v.iter().map(|x| (x + 1e-12 / v.len() as f64) / total).collect()
    })
}

fn logits(n_states: usize, n_factors: usize) -> impl Strategy<Value = DecompositionParams> {
    prop::collection::vec(-5.0f64..5.0, n_states * n_factors)
        .prop_map(move |l| DecompositionParams::from_logits(n_states, n_factors, l).unwrap())
}

fn policy() -> impl Strategy<Value = DeterministicPolicy> {
    prop::collection::vec(0usize..4, 25).prop_map(|a| DeterministicPolicy::new(a, 4).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decomposition_conserves_reward(params in logits(25, 4), state in 0usize..25, reward in -10.0f64..10.0) {
        let parts = softmax_decompose(&params, state, reward);
        let total: f64 = parts.iter().sum();
        prop_assert!((total - reward).abs() <= 1e-12 * reward.abs().max(1.0));
        prop_assert!(parts.iter().all(|r| r.signum() == reward.signum() || *r == 0.0));
    }

    #[test]
    fn factor_values_add_up(params in logits(25, 3), pi in policy()) {
        let (_, mdp) = corners();
        let whole = policy_evaluation(&mdp, mdp.reward(), &pi).unwrap();
        let mut sum = [0.0; 25];
        for r in params.factor_rewards(mdp.reward()) {
            for (acc, v) in sum.iter_mut().zip(policy_evaluation(&mdp, &r, &pi).unwrap()) {
                *acc += v;
            }
        }
        for (a, b) in sum.iter().zip(&whole) {
            prop_assert!((a - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn saturation_ignores_factor_order(shares in distribution(4), perm in Just([0usize, 1, 2, 3]).prop_shuffle(), reward in 0.1f64..5.0) {
        let parts: Vec<f64> = shares.iter().map(|p| p * reward).collect();
        let permuted: Vec<f64> = perm.iter().map(|&k| parts[k]).collect();
        let a = saturation_score(&parts, reward).unwrap();
        let b = saturation_score(&permuted, reward).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&a));
    }

    #[test]
    fn tv_is_a_metric(p in distribution(6), q in distribution(6), r in distribution(6)) {
        let pq = tv_distance(&p, &q).unwrap();
        let qr = tv_distance(&q, &r).unwrap();
        let pr = tv_distance(&p, &r).unwrap();
        prop_assert!(pr <= pq + qr + 1e-12);
        prop_assert_eq!(pq, tv_distance(&q, &p).unwrap());
        prop_assert!((0.0..=1.0 + 1e-12).contains(&pq));
    }

    #[test]
    fn non_constant_policy_depends_on_state(pi in policy(), sample in prop::collection::vec(0usize..25, 2..40)) {
        let distinct = sample.iter().map(|&s| pi.action(s)).collect::<std::collections::BTreeSet<_>>();
        let score = state_dependence(&pi, &sample).unwrap();
        if distinct.len() >= 2 {
            prop_assert!(score > 0.0);
        } else {
            prop_assert!(score == 0.0);
        }
    }

    #[test]
    fn planner_policy_dominates_random_policies(pi in policy(), reward in prop::collection::vec(0.0f64..1.0, 25)) {
        let (_, mdp) = corners();
        let (q, star) = value_iteration(&mdp, &reward, DEFAULT_TOLERANCE).unwrap();
        let best = policy_evaluation(&mdp, &reward, &star).unwrap();
        let other = policy_evaluation(&mdp, &reward, &pi).unwrap();
        for s in 0..25 {
            prop_assert!(best[s] >= other[s] - 1e-8);
            prop_assert!((best[s] - q.max(s)).abs() <= 1e-7);
        }
    }

    #[test]
    fn occupancy_rows_are_distributions(pi in policy()) {
        let (_, mdp) = corners();
        let occ = occupancy(&mdp, &pi).unwrap();
        for s in 0..25 {
            let row = occ.normalized_row(s);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
            prop_assert!(row.iter().all(|&x| x >= -1e-12));
        }
    }

    #[test]
    fn disentangled_is_nontrivial_minus_independent(params in logits(25, 3)) {
        let (_, mdp) = corners();
        let report = evaluate_objective(&mdp, &params, &AlphaScheme::default(), None).unwrap();
        prop_assert_eq!(report.j_disentangled, report.j_nontrivial - report.j_independent);
    }

    #[test]
    fn induced_optimum_is_bounded_by_base(pis in prop::collection::vec(policy(), 1..5)) {
        let (_, mdp) = corners();
        let induced = induce(&mdp, &pis).unwrap();
        for s in 0..25 {
            for i in 0..pis.len() {
                let row = induced.mdp().transition_row(s, i);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
        let (_, base_star) = value_iteration(&mdp, mdp.reward(), DEFAULT_TOLERANCE).unwrap();
        let (_, induced_star) = value_iteration(induced.mdp(), mdp.reward(), DEFAULT_TOLERANCE).unwrap();
        let base = policy_evaluation(&mdp, mdp.reward(), &base_star).unwrap();
        let best = policy_evaluation(induced.mdp(), mdp.reward(), &induced_star).unwrap();
        for s in 0..25 {
            prop_assert!(best[s] <= base[s] + 1e-9);
        }
        prop_assert_eq!(induce(&mdp, &pis).unwrap(), induced);
    }

    #[test]
    fn replay_keeps_the_newest_items(capacity in 1usize..20, count in 0usize..60) {
        let mut buffer = ReplayBuffer::new(capacity).unwrap();
        for s in 0..count {
            buffer.push(Experience { state: s, action: 0, reward: 0.0, next_state: 0 });
        }
        let kept: Vec<usize> = buffer.iter().map(|e| e.state).collect();
        let expected: Vec<usize> = (count.saturating_sub(capacity)..count).collect();
        prop_assert_eq!(kept, expected);
    }
}
