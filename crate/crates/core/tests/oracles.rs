mod common;

use common::*;
use rdecomp::decomp::{analyze, gradient_exact, gradient_mc, truncation_bound, AlphaMatrix, AlphaScheme};
use rdecomp::mdp::{build_gridworld, simulate_trajectory, GridworldSpec, TabularMdp};
use rdecomp::metrics::{sensitivity, total_value, tv_distance};
use rdecomp::planner::{policy_evaluation, value_iteration, DeterministicPolicy, DEFAULT_TOLERANCE};
use rdecomp::policy::StochasticPolicy;

fn alpha_rows(alpha: &[AlphaMatrix]) -> Vec<Vec<Vec<f64>>> {
    alpha.iter().map(AlphaMatrix::to_rows).collect()
}

#[test]
fn evaluation_matches_power_series() {
    let (_, mdp) = corners();
    let mut r = rng(1);
    for _ in 0..5 {
        let pi = random_policy(&mut r, 25, 4);
        let exact = policy_evaluation(&mdp, mdp.reward(), &pi).unwrap();
        let series = iterative_values(&mdp, &pi, mdp.reward());
        for (a, b) in exact.iter().zip(&series) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}

#[test]
fn evaluation_matches_rollouts() {
    // gamma^300 < 1e-13 at gamma = 0.9, so truncation is negligible
    let mdp = build_gridworld(&GridworldSpec {
        discount: 0.9,
        ..GridworldSpec::default()
    })
    .unwrap();
    let pi = StochasticPolicy::uniform(25, 4);
    let exact = policy_evaluation(&mdp, mdp.reward(), &pi).unwrap();
    let mut r = rng(7);
    for start in [12, 6] {
        let returns: Vec<f64> = (0..10_000)
            .map(|_| {
                let traj = simulate_trajectory(&mdp, &pi, start, 300, &mut r).unwrap();
                traj.steps
                    .iter()
                    .enumerate()
                    .map(|(t, step)| 0.9f64.powi(t as i32) * step.reward)
                    .sum()
            })
            .collect();
        let (mean, se) = mean_se(&returns);
        assert!(
            (mean - exact[start]).abs() <= 3.0 * se,
            "{mean} vs {} (se {se})",
            exact[start]
        );
    }
}

#[test]
fn total_value_matches_rollouts() {
    let mdp = build_gridworld(&GridworldSpec {
        discount: 0.9,
        ..GridworldSpec::default()
    })
    .unwrap();
    let policies: Vec<DeterministicPolicy> = CORNERS
        .iter()
        .map(|&c| {
            let mut reward = vec![0.0; 25];
            reward[c] = 1.0;
            value_iteration(&mdp, &reward, DEFAULT_TOLERANCE).unwrap().1
        })
        .collect();
    let mu = mdp.start_distribution().to_vec();
    let exact = total_value(&mdp, &policies, &mu).unwrap();
    let mut r = rng(3);
    let samples: Vec<f64> = (0..10_000)
        .map(|_| {
            policies
                .iter()
                .map(|pi| {
                    let start = mdp.sample_start(&mut r);
                    let traj = simulate_trajectory(&mdp, pi, start, 300, &mut r).unwrap();
                    traj.steps
                        .iter()
                        .enumerate()
                        .map(|(t, step)| 0.9f64.powi(t as i32) * step.reward)
                        .sum::<f64>()
                })
                .sum()
        })
        .collect();
    let (mean, se) = mean_se(&samples);
    assert!((mean - exact).abs() <= 3.0 * se, "{mean} vs {exact} (se {se})");
}

#[test]
fn visit_frequencies_match_stationary_distribution() {
    let (_, mdp) = corners();
    let pi = StochasticPolicy::uniform(25, 4);
    let p = mdp.policy_transition(&pi).unwrap();
    let mut stationary = vec![1.0 / 25.0; 25];
    for _ in 0..10_000 {
        let mut next = vec![0.0; 25];
        for s in 0..25 {
            for t in 0..25 {
                next[t] += stationary[s] * p[s * 25 + t];
            }
        }
        stationary = next;
    }
    let traj = simulate_trajectory(&mdp, &pi, 12, 100_000, &mut rng(5)).unwrap();
    let mut counts = vec![0.0; 25];
    for s in traj.states() {
        counts[s] += 1.0 / 100_000.0;
    }
    let tv = tv_distance(&counts, &stationary).unwrap();
    assert!(tv <= 0.01, "tv {tv}");
}

#[test]
fn exact_gradient_matches_central_differences() {
    let (_, mdp) = corners();
    let mut r = rng(11);
    for _ in 0..3 {
        let params = random_params(&mut r, 25, 3, 2.0);
        let analysis = analyze(&mdp, &params, &AlphaScheme::default(), None).unwrap();
        let diag: Vec<Vec<f64>> = (0..25)
            .map(|s| (0..3).map(|i| analysis.report.per_state_values[s][i][i]).collect())
            .collect();
        let alpha: Vec<Vec<Vec<f64>>> = diag.iter().map(|d| softened_min_alpha(d, 10.0, 2.0)).collect();
        for (mine, theirs) in alpha.iter().zip(&analysis.report.alpha_snapshot) {
            for (a, b) in mine.iter().flatten().zip(theirs.iter().flatten()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        let oracle = FrozenOracle::new(&mdp, &analysis.policies, &alpha);
        let fd = central_differences(&params, 1e-5, |p| oracle.value(p));
        let grad = gradient_exact(&mdp, &params, &AlphaScheme::default(), Some(&analysis.policies)).unwrap();
        let scale = fd.iter().map(|g| g.abs()).fold(0.0, f64::max);
        let err = grad
            .values()
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-5 * scale, "err {err}, scale {scale}");
    }
}

#[test]
fn one_step_rollout_gradient_is_start_reward_gradient() {
    let (_, mdp) = corners();
    let mut r = rng(2);
    let params = random_params(&mut r, 25, 4, 1.0);
    let analysis = analyze(&mdp, &params, &AlphaScheme::default(), None).unwrap();
    let starts: Vec<usize> = (0..25).collect();
    let mc = gradient_mc(&mdp, &params, &analysis.policies, &analysis.alpha, &starts, 1, &mut r).unwrap();
    let alpha = alpha_rows(&analysis.alpha);
    let at_start = |p: &rdecomp::decomp::DecompositionParams| -> f64 {
        let mut total = 0.0;
        for s in 0..25 {
            let share = shares(p.logits(s));
            for i in 0..4 {
                for j in 0..4 {
                    let sign = if i == j { 1.0 } else { -1.0 };
                    total += sign * alpha[s][i][j] * mdp.reward()[s] * share[i];
                }
            }
        }
        total / 25.0
    };
    let fd = central_differences(&params, 1e-6, at_start);
    for (a, b) in mc.values().iter().zip(&fd) {
        assert!((a - b).abs() < 1e-7, "{a} vs {b}");
    }
}

/// Expected `cutoff`-step rollout gradient from `start`, by propagating the
/// state distribution of each policy.
fn truncated_gradient(
    mdp: &TabularMdp,
    params: &rdecomp::decomp::DecompositionParams,
    policies: &[DeterministicPolicy],
    alpha: &[Vec<f64>],
    start: usize,
    cutoff: usize,
) -> Vec<f64> {
    let n = policies.len();
    let ns = mdp.n_states();
    let mut grad = vec![0.0; ns * n];
    for (j, pi) in policies.iter().enumerate() {
        let mut dist = vec![0.0; ns];
        dist[start] = 1.0;
        let mut weight = 1.0;
        for _ in 0..cutoff {
            for s in 0..ns {
                let r = mdp.reward()[s];
                if dist[s] == 0.0 || r == 0.0 {
                    continue;
                }
                let p = shares(params.logits(s));
                let coef: Vec<f64> = (0..n)
                    .map(|i| if i == j { alpha[i][j] } else { -alpha[i][j] } * weight)
                    .collect();
                let mean: f64 = (0..n).map(|i| coef[i] * p[i]).sum();
                for k in 0..n {
                    grad[s * n + k] += dist[s] * r * p[k] * (coef[k] - mean);
                }
            }
            let mut next = vec![0.0; ns];
            for s in 0..ns {
                for (t, q) in next.iter_mut().zip(mdp.transition_row(s, pi.action(s))) {
                    *t += dist[s] * q;
                }
            }
            dist = next;
            weight *= mdp.discount();
        }
    }
    grad
}

#[test]
fn rollout_gradient_is_unbiased_for_truncated_gradient() {
    let (_, mdp) = corners();
    let mut r = rng(9);
    let params = random_params(&mut r, 25, 4, 1.0);
    let analysis = analyze(&mdp, &params, &AlphaScheme::default(), None).unwrap();
    let (start, cutoff) = (12, 10);
    let expected = truncated_gradient(
        &mdp,
        &params,
        &analysis.policies,
        &alpha_rows(&analysis.alpha)[start],
        start,
        cutoff,
    );
    let samples: Vec<Vec<f64>> = (0..10_000)
        .map(|_| {
            gradient_mc(
                &mdp,
                &params,
                &analysis.policies,
                &analysis.alpha,
                &[start],
                cutoff,
                &mut r,
            )
            .unwrap()
            .values()
            .to_vec()
        })
        .collect();
    for (idx, &want) in expected.iter().enumerate() {
        let column: Vec<f64> = samples.iter().map(|g| g[idx]).collect();
        let (mean, se) = mean_se(&column);
        if se == 0.0 {
            assert!((mean - want).abs() < 1e-12, "entry {idx}: {mean} vs {want}");
        } else {
            assert!(
                (mean - want).abs() <= 3.0 * se,
                "entry {idx}: {mean} vs {want} (se {se})"
            );
        }
    }
}

#[test]
fn long_rollouts_on_deterministic_grid_approach_exact_gradient() {
    let mdp = build_gridworld(&GridworldSpec {
        teleport_on_reward: false,
        ..GridworldSpec::default()
    })
    .unwrap();
    let mut r = rng(4);
    for _ in 0..3 {
        let params = random_params(&mut r, 25, 4, 1.0);
        let analysis = analyze(&mdp, &params, &AlphaScheme::default(), None).unwrap();
        let exact = gradient_exact(&mdp, &params, &AlphaScheme::default(), Some(&analysis.policies)).unwrap();
        let starts: Vec<usize> = (0..25).collect();
        for cutoff in [200, 400] {
            let mc = gradient_mc(
                &mdp,
                &params,
                &analysis.policies,
                &analysis.alpha,
                &starts,
                cutoff,
                &mut r,
            )
            .unwrap();
            let bound = truncation_bound(&mdp, &analysis.alpha, cutoff);
            let gap = mc.max_abs_diff(&exact);
            assert!(gap <= bound, "cutoff {cutoff}: gap {gap} > bound {bound}");
        }
    }
}

#[test]
fn sensitivity_on_two_state_chain() {
    // action 0 stays, action 1 toggles; reward 1 in state 1, gamma 0.5
    let mdp = TabularMdp::deterministic(&[vec![0, 1], vec![1, 0]], vec![0.0, 1.0], 0.5, vec![0.5, 0.5]).unwrap();
    let mu = [0.5, 0.5];
    let stay = DeterministicPolicy::constant(2, 2, 0).unwrap();
    let to_goal = DeterministicPolicy::new(vec![1, 0], 2).unwrap();
    // stay: V = (0, 2); to_goal: V(1) = 2, V(0) = 0.5 * 2 = 1
    let a = vec![stay.clone(), stay];
    let b = vec![to_goal.clone(), to_goal];
    let expected = 2.0 * (0.5 * 1.0 + 0.5 * 2.0) - 2.0 * (0.5 * 0.0 + 0.5 * 2.0);
    assert!((sensitivity(&mdp, &a, &b, &mu).unwrap() - expected).abs() < 1e-12);
}
