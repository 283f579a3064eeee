#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdecomp::decomp::DecompositionParams;
use rdecomp::mdp::{build_gridworld, GridworldSpec, TabularMdp};
use rdecomp::planner::DeterministicPolicy;

pub const CORNERS: [usize; 4] = [0, 4, 20, 24];

pub fn corners() -> (GridworldSpec, TabularMdp) {
    let spec = GridworldSpec::default();
    let mdp = build_gridworld(&spec).unwrap();
    (spec, mdp)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_params(rng: &mut ChaCha8Rng, n_states: usize, n_factors: usize, scale: f64) -> DecompositionParams {
    let logits = (0..n_states * n_factors)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    DecompositionParams::from_logits(n_states, n_factors, logits).unwrap()
}

pub fn random_policy(rng: &mut ChaCha8Rng, n_states: usize, n_actions: usize) -> DeterministicPolicy {
    let actions = (0..n_states).map(|_| rng.random_range(0..n_actions)).collect();
    DeterministicPolicy::new(actions, n_actions).unwrap()
}

/// Decomposition giving `owner[k]` all of corner `k` (up to `1e-20`).
pub fn corner_assignment(n_factors: usize, owner: [usize; 4]) -> DecompositionParams {
    let mut owners = vec![0; 25];
    for (k, &corner) in CORNERS.iter().enumerate() {
        owners[corner] = owner[k];
    }
    DecompositionParams::from_assignment(n_factors, &owners, 50.0).unwrap()
}

/// Softmax written out independently of the library.
pub fn shares(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// `sum_t gamma^t P^t r` by repeated application, stopping once the
/// remaining tail is below `1e-13` of the reward scale.
pub fn iterative_values(mdp: &TabularMdp, policy: &DeterministicPolicy, reward: &[f64]) -> Vec<f64> {
    let ns = mdp.n_states();
    let gamma = mdp.discount();
    let r_max = reward.iter().map(|r| r.abs()).fold(0.0, f64::max);
    let mut values = vec![0.0; ns];
    let mut term = reward.to_vec();
    let mut weight = 1.0;
    while weight * r_max / (1.0 - gamma) > 1e-13 * r_max.max(1.0) {
        for s in 0..ns {
            values[s] += weight * term[s];
        }
        term = (0..ns)
            .map(|s| {
                mdp.transition_row(s, policy.action(s))
                    .iter()
                    .zip(&term)
                    .map(|(p, v)| p * v)
                    .sum()
            })
            .collect();
        weight *= gamma;
    }
    values
}

/// Mean and standard error.
pub fn mean_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Softened-min weights for one state, written out from the definition.
pub fn softened_min_alpha(diag: &[f64], scale: f64, temperature: f64) -> Vec<Vec<f64>> {
    let w = shares(&diag.iter().map(|u| -temperature * u).collect::<Vec<_>>());
    let n = diag.len();
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { scale * w[i] } else { 1.0 }).collect())
        .collect()
}

/// Disentangled objective with policies and weights held fixed.
///
/// With everything but the shares frozen, `J = sum_ij sign_ij sum_s' m_ij(s') R(s') p_i(s')`
/// where `m_ij = sum_t gamma^t (mu * alpha_ij)^T P_j^t`, accumulated here by a
/// power series. `alpha[s][i][j]`.
pub struct FrozenOracle {
    n: usize,
    env_reward: Vec<f64>,
    /// `m[i][j][s']`.
    m: Vec<Vec<Vec<f64>>>,
}

impl FrozenOracle {
    pub fn new(mdp: &TabularMdp, policies: &[DeterministicPolicy], alpha: &[Vec<Vec<f64>>]) -> Self {
        let n = policies.len();
        let ns = mdp.n_states();
        let gamma = mdp.discount();
        let mu = mdp.start_distribution();
        let mut m = vec![vec![vec![0.0; ns]; n]; n];
        for i in 0..n {
            for (j, pi) in policies.iter().enumerate() {
                let mut row: Vec<f64> = (0..ns).map(|s| mu[s] * alpha[s][i][j]).collect();
                let mut weight = 1.0;
                while weight / (1.0 - gamma) > 1e-15 {
                    for (acc, x) in m[i][j].iter_mut().zip(&row) {
                        *acc += weight * x;
                    }
                    let mut next = vec![0.0; ns];
                    for s in 0..ns {
                        if row[s] == 0.0 {
                            continue;
                        }
                        for (t, p) in next.iter_mut().zip(mdp.transition_row(s, pi.action(s))) {
                            *t += row[s] * p;
                        }
                    }
                    row = next;
                    weight *= gamma;
                }
            }
        }
        Self {
            n,
            env_reward: mdp.reward().to_vec(),
            m,
        }
    }

    pub fn value(&self, params: &DecompositionParams) -> f64 {
        let mut total = 0.0;
        for (s, &r) in self.env_reward.iter().enumerate() {
            if r == 0.0 {
                continue;
            }
            let p = shares(params.logits(s));
            for i in 0..self.n {
                for j in 0..self.n {
                    let sign = if i == j { 1.0 } else { -1.0 };
                    total += sign * self.m[i][j][s] * r * p[i];
                }
            }
        }
        total
    }
}

/// Central differences of `f` over every logit.
pub fn central_differences(params: &DecompositionParams, h: f64, f: impl Fn(&DecompositionParams) -> f64) -> Vec<f64> {
    let ns = params.n_states();
    let n = params.n_factors();
    let mut out = Vec::with_capacity(ns * n);
    for s in 0..ns {
        for k in 0..n {
            let mut plus = params.clone();
            plus.logits_mut(s)[k] += h;
            let mut minus = params.clone();
            minus.logits_mut(s)[k] -= h;
            out.push((f(&plus) - f(&minus)) / (2.0 * h));
        }
    }
    out
}
