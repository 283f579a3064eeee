//! Scores and theorem checkers for learned decompositions.

use serde::{Deserialize, Serialize};

use crate::decomp::{DecompositionParams, ObjectiveReport};
use crate::error::{check_index, Error, Result};
use crate::mdp::TabularMdp;
use crate::planner::{self, DeterministicPolicy};
use crate::policy::{Policy, StochasticPolicy};

/// Slack allowed when comparing the visitation-separation bound against the measured
/// total variation.
pub const THEOREM_ONE_SLACK: f64 = 1e-9;

/// How completely the largest factor claims the reward of one state: 1 when a
/// single factor holds all of it, 0 for an even split.
pub fn saturation_score(decomposed: &[f64], env_reward: f64) -> Result<f64> {
    let n = decomposed.len();
    if n < 2 {
        return Err(Error::Precondition("saturation needs at least two factors".into()));
    }
    if env_reward == 0.0 {
        return Err(Error::UndefinedScore("saturation at a zero-reward state"));
    }
    let top = decomposed
        .iter()
        .map(|r| r / env_reward)
        .fold(f64::NEG_INFINITY, f64::max);
    let uniform = 1.0 / n as f64;
    Ok((top - uniform) / (1.0 - uniform))
}

/// Visit weights of the uniform-random policy: the start-averaged normalized
/// discounted occupancy.
pub fn random_policy_visits(mdp: &TabularMdp) -> Result<Vec<f64>> {
    let random = StochasticPolicy::uniform(mdp.n_states(), mdp.n_actions());
    let occ = planner::occupancy(mdp, &random)?;
    let mut visits = vec![0.0; mdp.n_states()];
    for (s, &m) in mdp.start_distribution().iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for (v, p) in visits.iter_mut().zip(occ.normalized_row(s)) {
            *v += m * p;
        }
    }
    Ok(visits)
}

/// Saturation averaged over rewarding states, weighted by `visits`.
pub fn average_saturation(mdp: &TabularMdp, params: &DecompositionParams, visits: &[f64]) -> Result<f64> {
    let mut weighted = 0.0;
    let mut mass = 0.0;
    for (s, &r) in mdp.reward().iter().enumerate() {
        if r == 0.0 || visits[s] == 0.0 {
            continue;
        }
        let shares = crate::decomp::softmax_decompose(params, s, r);
        weighted += visits[s] * saturation_score(&shares, r)?;
        mass += visits[s];
    }
    if mass == 0.0 {
        return Err(Error::UndefinedScore("no visited rewarding state"));
    }
    Ok(weighted / mass)
}

/// Mean over actions of the population standard deviation of `pi(a|s)`
/// across the sampled states.
pub fn state_dependence<P: Policy>(policy: &P, states: &[usize]) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::Empty("state sample"));
    }
    for &s in states {
        check_index("state", s, policy.n_states())?;
    }
    let count = states.len() as f64;
    let n_actions = policy.n_actions();
    let mut total = 0.0;
    for a in 0..n_actions {
        let mean = states.iter().map(|&s| policy.prob(s, a)).sum::<f64>() / count;
        let var = states.iter().map(|&s| (policy.prob(s, a) - mean).powi(2)).sum::<f64>() / count;
        total += var.sqrt();
    }
    Ok(total / n_actions as f64)
}

pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremOneRecord {
    pub factor: usize,
    pub other: usize,
    pub state: usize,
    /// `U_i^{pi_i}(s) - U_i^{pi_j}(s)`.
    pub gap: f64,
    pub r_max: f64,
    /// `(1 - gamma) * gap / (2 * r_max)`, or 0 when the gap is not positive.
    pub bound: f64,
    pub actual_tv: f64,
    pub holds: bool,
}

fn theorem_one_record(
    mdp: &TabularMdp,
    factor: usize,
    other: usize,
    state: usize,
    gap: f64,
    actual_tv: f64,
) -> TheoremOneRecord {
    let r_max = mdp.max_reward();
    let bound = if gap > 0.0 && r_max > 0.0 {
        (1.0 - mdp.discount()) * gap / (2.0 * r_max)
    } else {
        0.0
    };
    TheoremOneRecord {
        factor,
        other,
        state,
        gap,
        r_max,
        bound,
        actual_tv,
        holds: actual_tv >= bound - THEOREM_ONE_SLACK,
    }
}

/// Checks the visitation-separation bound for factor `i`, policy `j` and
/// start state `s` with exact evaluation and occupancies.
pub fn theorem1_check(
    mdp: &TabularMdp,
    params: &DecompositionParams,
    policies: &[DeterministicPolicy],
    i: usize,
    j: usize,
    s: usize,
) -> Result<TheoremOneRecord> {
    mdp.require_nonnegative_rewards()?;
    check_index("factor", i, policies.len())?;
    check_index("factor", j, policies.len())?;
    check_index("state", s, mdp.n_states())?;
    let reward = &params.factor_rewards(mdp.reward())[i];
    let own = planner::policy_evaluation(mdp, reward, &policies[i])?;
    let cross = planner::policy_evaluation(mdp, reward, &policies[j])?;
    let occ_i = planner::occupancy(mdp, &policies[i])?;
    let occ_j = planner::occupancy(mdp, &policies[j])?;
    let tv = tv_distance(&occ_j.normalized_row(s), &occ_i.normalized_row(s))?;
    Ok(theorem_one_record(mdp, i, j, s, own[s] - cross[s], tv))
}

/// Every ordered factor pair at every state, sharing the solves.
pub fn theorem1_sweep(
    mdp: &TabularMdp,
    params: &DecompositionParams,
    policies: &[DeterministicPolicy],
) -> Result<Vec<TheoremOneRecord>> {
    mdp.require_nonnegative_rewards()?;
    let rewards = params.factor_rewards(mdp.reward());
    let occupancies = policies
        .iter()
        .map(|pi| planner::occupancy(mdp, pi))
        .collect::<Result<Vec<_>>>()?;
    // values[i][j] = U_i^{pi_j}
    let values: Vec<Vec<Vec<f64>>> = rewards
        .iter()
        .map(|r| {
            policies
                .iter()
                .map(|pi| planner::policy_evaluation(mdp, r, pi))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut records = Vec::new();
    for i in 0..policies.len() {
        for j in 0..policies.len() {
            for s in 0..mdp.n_states() {
                let tv = tv_distance(&occupancies[j].normalized_row(s), &occupancies[i].normalized_row(s))?;
                let gap = values[i][i][s] - values[i][j][s];
                records.push(theorem_one_record(mdp, i, j, s, gap, tv));
            }
        }
    }
    Ok(records)
}

/// `sum_i E_{s~mu}[V^{pi_i}(s)]` on the environment reward.
pub fn total_value<P: Policy>(mdp: &TabularMdp, policies: &[P], mu: &[f64]) -> Result<f64> {
    if mu.len() != mdp.n_states() {
        return Err(Error::LengthMismatch {
            left: mu.len(),
            right: mdp.n_states(),
        });
    }
    let mut total = 0.0;
    for pi in policies {
        let v = planner::policy_evaluation(mdp, mdp.reward(), pi)?;
        total += mu.iter().zip(&v).map(|(m, x)| m * x).sum::<f64>();
    }
    Ok(total)
}

/// `|J_indep + J_nontriv - C * total|` for a report computed with `alpha = C`.
pub fn lemma1_residual(report: &ObjectiveReport, c: f64, total: f64) -> Result<f64> {
    match report.alpha_scheme.uniform_constant() {
        Some(used) if used == c => Ok((report.j_independent + report.j_nontrivial - c * total).abs()),
        Some(used) => Err(Error::Precondition(format!(
            "report used uniform alpha {used}, not {c}"
        ))),
        None => Err(Error::Precondition(
            "lemma 1 needs a report computed with uniform alpha".into(),
        )),
    }
}

/// `|total(a) - total(b)|`.
pub fn sensitivity<P: Policy>(mdp: &TabularMdp, a: &[P], b: &[P], mu: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok((total_value(mdp, a, mu)? - total_value(mdp, b, mu)?).abs())
}
