//! Closed-form flows for a reward under a fixed backward policy.
//!
//! With `p_B` uniform over parents, the state flow satisfies
//! `F(s) = R(s) + sum over children c of F(c) / |parents(c)|`, which one
//! reverse-topological pass solves exactly. The resulting forward policy
//! samples terminal states with probability `R(x) / Z`, `Z = F(s0)`.

use alloc::vec;
use alloc::vec::Vec;

use crate::dag::{reach_and_terminal, EnvGraph, Policy, StateId, TabularPolicy, TerminalDistribution, TransitionDistribution};
use crate::math;
use crate::{Error, Result};

/// Rewards spanning more than this ratio are solved in log space.
pub const LOG_SPACE_DYNAMIC_RANGE: f64 = 1e12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BackwardMode {
    /// `p_B(parent | s) = 1 / |parents(s)|`.
    #[default]
    Uniform,
}

/// Exact flows and the policies they induce.
#[derive(Clone, Debug)]
pub struct FlowModel {
    /// Terminal flow `R(x)` per state (zero for non-terminating states).
    pub reward: Vec<f64>,
    pub state_flow: Vec<f64>,
    pub log_state_flow: Vec<f64>,
    /// Flow on `s -> children(s)[i]`, aligned with `env.children(s)`.
    pub edge_flow: Vec<Vec<f64>>,
    pub partition: f64,
    pub log_partition: f64,
    pub forward: TabularPolicy,
    /// Rows aligned with `env.parents(s)`; no terminate entry.
    pub backward: TabularPolicy,
    /// Solved with the log-space recursion.
    pub log_space: bool,
}

impl FlowModel {
    /// States whose whole downstream reward is zero. They carry no flow and
    /// their forward row is a never-used uniform placeholder.
    pub fn is_dead(&self, s: StateId) -> bool {
        self.state_flow[s.0] == 0.0 && self.log_state_flow[s.0] == f64::NEG_INFINITY
    }

    /// Largest violation of the inflow and outflow conservation equations,
    /// relative to `Z`.
    pub fn conservation_residual(&self, env: &EnvGraph) -> f64 {
        let mut inflow = vec![0.0; env.num_states()];
        let mut worst: f64 = 0.0;
        for s in env.states() {
            let out: f64 = self.edge_flow[s.0].iter().sum::<f64>() + self.reward[s.0];
            worst = worst.max((self.state_flow[s.0] - out).abs());
            for (&c, &f) in env.children(s).iter().zip(&self.edge_flow[s.0]) {
                inflow[c.0] += f;
            }
        }
        for s in env.states().filter(|&s| s != env.initial()) {
            worst = worst.max((self.state_flow[s.0] - inflow[s.0]).abs());
        }
        worst / self.partition
    }
}

/// Solves the flow equations for `reward` (one value per state).
pub fn solve_exact_flows(env: &EnvGraph, reward: &[f64], mode: BackwardMode) -> Result<FlowModel> {
    let BackwardMode::Uniform = mode;
    if reward.len() != env.num_states() {
        return Err(Error::ShapeMismatch(alloc::format!(
            "{} rewards for {} states",
            reward.len(),
            env.num_states()
        )));
    }
    let mut terminal = vec![0.0; env.num_states()];
    for s in env.terminating_states() {
        let r = reward[s.0];
        if !(r >= 0.0 && r.is_finite()) {
            return Err(Error::InvalidEnv(alloc::format!("reward at {s} is {r}")));
        }
        terminal[s.0] = r;
    }
    let total: f64 = terminal.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroReward);
    }
    let (lo, hi) = terminal
        .iter()
        .filter(|&&r| r > 0.0)
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &r| (lo.min(r), hi.max(r)));
    if hi / lo > LOG_SPACE_DYNAMIC_RANGE {
        solve_log(env, terminal)
    } else {
        solve_linear(env, terminal)
    }
}

fn backward_uniform(env: &EnvGraph) -> TabularPolicy {
    TabularPolicy::new(
        env.states()
            .map(|s| {
                let k = env.parents(s).len();
                TransitionDistribution::new(vec![1.0 / k as f64; k], None)
            })
            .collect(),
    )
}

fn solve_linear(env: &EnvGraph, reward: Vec<f64>) -> Result<FlowModel> {
    let order = env.topo()?;
    let n = env.num_states();
    let mut flow = vec![0.0; n];
    let mut edge_flow: Vec<Vec<f64>> = vec![Vec::new(); n];
    for &s in order.iter().rev() {
        let edges: Vec<f64> = env
            .children(s)
            .iter()
            .map(|&c| flow[c.0] / env.parents(c).len() as f64)
            .collect();
        flow[s.0] = reward[s.0] + edges.iter().sum::<f64>();
        edge_flow[s.0] = edges;
    }
    let forward = TabularPolicy::new(
        env.states()
            .map(|s| {
                let f = flow[s.0];
                if f == 0.0 {
                    return TransitionDistribution::uniform(env, s);
                }
                let probs = edge_flow[s.0].iter().map(|e| e / f).collect();
                TransitionDistribution::new(probs, env.is_terminating(s).then(|| reward[s.0] / f))
            })
            .collect(),
    );
    let partition = flow[env.initial().0];
    Ok(FlowModel {
        log_state_flow: flow.iter().map(|&f| math::ln(f)).collect(),
        log_partition: math::ln(partition),
        reward,
        state_flow: flow,
        edge_flow,
        partition,
        forward,
        backward: backward_uniform(env),
        log_space: false,
    })
}

fn solve_log(env: &EnvGraph, reward: Vec<f64>) -> Result<FlowModel> {
    let order = env.topo()?;
    let n = env.num_states();
    let log_reward: Vec<f64> = reward.iter().map(|&r| math::ln(r)).collect();
    let mut log_flow = vec![f64::NEG_INFINITY; n];
    // log of the flow on each edge, aligned with children
    let mut log_edge: Vec<Vec<f64>> = vec![Vec::new(); n];
    for &s in order.iter().rev() {
        let edges: Vec<f64> = env
            .children(s)
            .iter()
            .map(|&c| log_flow[c.0] - math::ln(env.parents(c).len() as f64))
            .collect();
        log_flow[s.0] = edges.iter().fold(log_reward[s.0], |acc, &e| math::log_add_exp(acc, e));
        log_edge[s.0] = edges;
    }
    let forward = TabularPolicy::new(
        env.states()
            .map(|s| {
                let lf = log_flow[s.0];
                if lf == f64::NEG_INFINITY {
                    return TransitionDistribution::uniform(env, s);
                }
                let probs = log_edge[s.0].iter().map(|&e| math::exp(e - lf)).collect();
                TransitionDistribution::new(probs, env.is_terminating(s).then(|| math::exp(log_reward[s.0] - lf)))
            })
            .collect(),
    );
    let log_partition = log_flow[env.initial().0];
    Ok(FlowModel {
        state_flow: log_flow.iter().map(|&l| math::exp(l)).collect(),
        edge_flow: log_edge.iter().map(|row| row.iter().map(|&l| math::exp(l)).collect()).collect(),
        partition: math::exp(log_partition),
        log_partition,
        reward,
        log_state_flow: log_flow,
        forward,
        backward: backward_uniform(env),
        log_space: true,
    })
}

/// Reaching probabilities read off the flows: `u(s) = F(s) / Z`.
pub fn reach_from_flow(model: &FlowModel) -> Vec<f64> {
    if model.log_space {
        model
            .log_state_flow
            .iter()
            .map(|&l| math::exp(l - model.log_partition))
            .collect()
    } else {
        model.state_flow.iter().map(|&f| f / model.partition).collect()
    }
}

/// What the mixing policy needs from one pre-trained (or exact) GFlowNet.
#[derive(Clone, Debug)]
pub struct ComponentModel {
    pub forward: TabularPolicy,
    /// Reaching probability estimate `u(s)`.
    pub reach: Vec<f64>,
    pub partition: f64,
    /// Terminal distribution `p(x)` of `forward`.
    pub terminal: TerminalDistribution,
}

impl ComponentModel {
    /// Packages a forward policy with a reaching estimate and partition
    /// function; the terminal distribution comes from the exact DP.
    pub fn new(env: &EnvGraph, forward: TabularPolicy, reach: Vec<f64>, partition: f64) -> Result<Self> {
        if reach.len() != env.num_states() {
            return Err(Error::ShapeMismatch("reach length".into()));
        }
        let (_, terminal) = reach_and_terminal(env, &forward)?;
        Ok(Self { forward, reach, partition, terminal })
    }

    /// Largest `|u(s) - sum_p u(p) p_F(s | p)|` over non-initial states.
    pub fn reach_residual(&self, env: &EnvGraph) -> f64 {
        let mut inflow = vec![0.0; env.num_states()];
        for s in env.states() {
            let row = self.forward.row(s);
            for (&c, &p) in env.children(s).iter().zip(&row.probs) {
                inflow[c.0] += self.reach[s.0] * p;
            }
        }
        env.states()
            .filter(|&s| s != env.initial())
            .map(|s| (self.reach[s.0] - inflow[s.0]).abs())
            .fold(0.0, f64::max)
    }
}

impl Policy for ComponentModel {
    fn transition(&self, s: StateId) -> Result<TransitionDistribution> {
        self.forward.transition(s)
    }
}

/// Component with `u = F / Z` and the exact terminal distribution `R / Z`.
pub fn as_component(model: &FlowModel) -> ComponentModel {
    let total: f64 = model.reward.iter().sum();
    ComponentModel {
        forward: model.forward.clone(),
        reach: reach_from_flow(model),
        partition: model.partition,
        terminal: TerminalDistribution::from_mass(model.reward.iter().map(|r| r / total).collect()),
    }
}
