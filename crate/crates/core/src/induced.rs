//! Control with learned policies as actions.
//!
//! Choosing induced action `i` in state `s` executes, for one base step, the
//! action that policy `i` takes in `s`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{restrict_rewards, TabularMdp};
use crate::planner::{self, DeterministicPolicy, QTable};
use crate::policy::{greedy_set, StochasticPolicy};
use crate::qlearn::{epsilon_at, q_update, EpsilonSchedule, Experience};

#[derive(Clone, Debug, PartialEq)]
pub struct InducedMdp {
    base: TabularMdp,
    policies: Vec<DeterministicPolicy>,
    mdp: TabularMdp,
}

impl InducedMdp {
    pub fn base(&self) -> &TabularMdp {
        &self.base
    }

    pub fn policies(&self) -> &[DeterministicPolicy] {
        &self.policies
    }

    /// The induced decision process, one action per policy.
    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    /// Base action executed by induced action `choice` in `state`.
    pub fn base_action(&self, state: usize, choice: usize) -> usize {
        self.policies[choice].action(state)
    }
}

pub fn induce(base: &TabularMdp, policies: &[DeterministicPolicy]) -> Result<InducedMdp> {
    if policies.is_empty() {
        return Err(Error::Empty("induced policies"));
    }
    for pi in policies {
        base.check_policy(pi)?;
    }
    let ns = base.n_states();
    let n = policies.len();
    let mut transition = Vec::with_capacity(ns * n * ns);
    for s in 0..ns {
        for pi in policies {
            transition.extend_from_slice(base.transition_row(s, pi.action(s)));
        }
    }
    let mdp = TabularMdp::new(
        ns,
        n,
        transition,
        base.reward().to_vec(),
        base.discount(),
        base.start_distribution().to_vec(),
    )?;
    Ok(InducedMdp {
        base: base.clone(),
        policies: policies.to_vec(),
        mdp,
    })
}

/// Settings for the tabular control learners.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub total_steps: u64,
    pub learning_rate: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_horizon: u64,
    pub eval_interval: u64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            total_steps: 2_000,
            learning_rate: 0.1,
            epsilon_start: 1.0,
            epsilon_end: 0.01,
            epsilon_horizon: 1_000,
            eval_interval: 50,
        }
    }
}

impl ControlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.eval_interval == 0 {
            return Err(Error::Config(
                "control budget and eval interval must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Config("control learning rate must lie in (0, 1]".into()));
        }
        EpsilonSchedule::new(self.epsilon_start, self.epsilon_end, self.epsilon_horizon).map(|_| ())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    /// Exact start-averaged discounted return of the current greedy policy.
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub seed: u64,
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    /// Mean value over evaluation points with `step <= fraction * budget`.
    pub fn early_average(&self, fraction: f64) -> f64 {
        let last = self.points.last().map(|p| p.step).unwrap_or(0) as f64;
        let cutoff = fraction * last;
        let early: Vec<f64> = self
            .points
            .iter()
            .filter(|p| p.step as f64 <= cutoff)
            .map(|p| p.value)
            .collect();
        if early.is_empty() {
            0.0
        } else {
            early.iter().sum::<f64>() / early.len() as f64
        }
    }
}

/// Greedy policy that spreads probability evenly over tied actions, so that
/// unvisited states do not inherit a direction from the action numbering.
pub fn tie_uniform_greedy(q: &QTable) -> StochasticPolicy {
    let rows = (0..q.n_states())
        .map(|s| {
            let ties = greedy_set(q.row(s));
            let mut row = vec![0.0; q.n_actions()];
            for &a in &ties {
                row[a] = 1.0 / ties.len() as f64;
            }
            row
        })
        .collect();
    StochasticPolicy::new(rows).expect("tie rows are distributions")
}

fn behavior_action<R: Rng + ?Sized>(q: &QTable, state: usize, epsilon: f64, rng: &mut R) -> usize {
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return rng.random_range(0..q.n_actions());
    }
    let ties = greedy_set(q.row(state));
    if ties.len() == 1 {
        ties[0]
    } else {
        ties[rng.random_range(0..ties.len())]
    }
}

fn greedy_value(mdp: &TabularMdp, q: &QTable) -> Result<f64> {
    let v = planner::policy_evaluation(mdp, mdp.reward(), &tie_uniform_greedy(q))?;
    Ok(planner::start_average(mdp, &v))
}

/// Online epsilon-greedy Q-learning on the environment reward of `mdp`,
/// evaluating the greedy policy exactly every `eval_interval` steps. Greedy
/// ties are broken uniformly at random, both when acting and when evaluating.
pub fn q_learning_curve(mdp: &TabularMdp, config: &ControlConfig, seed: u64) -> Result<LearningCurve> {
    config.validate()?;
    let schedule = EpsilonSchedule::new(config.epsilon_start, config.epsilon_end, config.epsilon_horizon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = QTable::zeros(mdp.n_states(), mdp.n_actions());
    let mut points = Vec::new();
    let mut state = mdp.sample_start(&mut rng);
    for t in 0..config.total_steps {
        if t % config.eval_interval == 0 {
            points.push(CurvePoint {
                step: t,
                value: greedy_value(mdp, &q)?,
            });
        }
        let action = behavior_action(&q, state, epsilon_at(&schedule, t), &mut rng);
        let next_state = mdp.sample_next_state(state, action, &mut rng);
        let item = Experience {
            state,
            action,
            reward: mdp.reward()[next_state],
            next_state,
        };
        q_update(&mut q, &item, item.reward, mdp.discount(), config.learning_rate);
        state = next_state;
    }
    points.push(CurvePoint {
        step: config.total_steps,
        value: greedy_value(mdp, &q)?,
    });
    Ok(LearningCurve { seed, points })
}

pub fn train_meta_controller(induced: &InducedMdp, config: &ControlConfig, seed: u64) -> Result<LearningCurve> {
    q_learning_curve(induced.mdp(), config, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedCurves {
    pub induced: LearningCurve,
    pub baseline: LearningCurve,
}

/// Restricts the base reward to `region`, then trains the meta-controller
/// over `policies` and a primitive-action learner with the same budget and
/// seed.
pub fn generalization_experiment(
    base: &TabularMdp,
    region: impl Fn(usize) -> bool,
    policies: &[DeterministicPolicy],
    config: &ControlConfig,
    seed: u64,
) -> Result<PairedCurves> {
    let restricted = restrict_rewards(base, region);
    let induced = induce(&restricted, policies)?;
    Ok(PairedCurves {
        induced: train_meta_controller(&induced, config, seed)?,
        baseline: q_learning_curve(&restricted, config, seed)?,
    })
}
