//! Sub-trajectory balance training on the grid.
//!
//! Three networks read the K-hot encoding of a cell: the forward policy
//! (logits for right, down, stop), the backward policy (logits for the left
//! and upper parent) and the state flow (`log F`). The log partition function
//! is a separate scalar that stands in for `log F(s_0)`.

mod adam;
mod mlp;
mod replay;
mod subtb;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use mlp::Mlp;
pub use replay::ReplayBuffer;
pub use subtb::{subtb_loss, subtb_loss_grad, TermGradients, TrajectoryTerms};

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dag::{sample_index, EnvGraph, StateId, TabularPolicy, TransitionDistribution, Trajectory};
use crate::flows::{ComponentModel, FlowModel};
use crate::grid::{build_grid, khot_encode, khot_indices, FeatureVector, GridSpec, RewardField};
use crate::math;
use crate::{Error, Result};

pub const FORWARD_ACTIONS: usize = 3;
pub const BACKWARD_ACTIONS: usize = 2;
pub const RIGHT: usize = 0;
pub const DOWN: usize = 1;
pub const STOP: usize = 2;
pub const FROM_LEFT: usize = 0;
pub const FROM_ABOVE: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_params: f64,
    pub lr_log_z: f64,
    pub epsilon_greedy: f64,
    pub subtb_lambda: f64,
    pub replay_capacity: usize,
    pub hidden_units: usize,
    /// Rewards below this are clamped before taking the log.
    pub reward_floor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            batch_size: 128,
            lr_params: 1e-3,
            lr_log_z: 1e-1,
            epsilon_greedy: 0.05,
            subtb_lambda: 2.0,
            replay_capacity: 10_000,
            hidden_units: 64,
            reward_floor: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x > 0.0 && x.is_finite();
        let fail = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if !positive(self.lr_params) || !positive(self.lr_log_z) {
            return fail("learning rates must be positive");
        }
        if !positive(self.subtb_lambda) {
            return fail("lambda must be positive");
        }
        if !(0.0..=1.0).contains(&self.epsilon_greedy) {
            return fail("epsilon must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.replay_capacity == 0 || self.hidden_units == 0 {
            return fail("batch size, replay capacity and hidden units must be positive");
        }
        if !positive(self.reward_floor) {
            return fail("reward floor must be positive");
        }
        Ok(())
    }
}

/// Forward-policy, backward-policy and flow networks.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub forward: Mlp,
    pub backward: Mlp,
    pub flow: Mlp,
}

impl MlpParams {
    fn sizes(input_dim: usize, hidden: usize, out: usize) -> [usize; 4] {
        [input_dim, hidden, hidden, out]
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            forward: Mlp::zeros(&Self::sizes(input_dim, hidden, FORWARD_ACTIONS)),
            backward: Mlp::zeros(&Self::sizes(input_dim, hidden, BACKWARD_ACTIONS)),
            flow: Mlp::zeros(&Self::sizes(input_dim, hidden, 1)),
        }
    }

    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let forward = Mlp::init_uniform(&Self::sizes(input_dim, hidden, FORWARD_ACTIONS), rng);
        let backward = Mlp::init_uniform(&Self::sizes(input_dim, hidden, BACKWARD_ACTIONS), rng);
        let flow = Mlp::init_uniform(&Self::sizes(input_dim, hidden, 1), rng);
        Self { forward, backward, flow }
    }

    pub fn check_shapes(&self, input_dim: usize) -> Result<()> {
        for (net, out) in [(&self.forward, FORWARD_ACTIONS), (&self.backward, BACKWARD_ACTIONS), (&self.flow, 1)] {
            if net.input_dim() != input_dim || net.output_dim() != out {
                return Err(Error::ShapeMismatch(alloc::format!(
                    "network {:?} does not map {input_dim} inputs to {out} outputs",
                    net.sizes()
                )));
            }
        }
        Ok(())
    }

    pub fn nets(&self) -> [&Mlp; 3] {
        [&self.forward, &self.backward, &self.flow]
    }
}

/// Raw network outputs for one state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadOutputs {
    pub forward_logits: [f64; FORWARD_ACTIONS],
    pub backward_logits: [f64; BACKWARD_ACTIONS],
    pub log_flow: f64,
}

pub fn mlp_forward(params: &MlpParams, x: &FeatureVector) -> Result<HeadOutputs> {
    params.check_shapes(x.0.len())?;
    let f = params.forward.forward(&x.0);
    let b = params.backward.forward(&x.0);
    let lf = params.flow.forward(&x.0);
    Ok(HeadOutputs {
        forward_logits: [f[0], f[1], f[2]],
        backward_logits: [b[0], b[1]],
        log_flow: lf[0],
    })
}

/// Masked log-probabilities and log flow for one state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateHeads {
    pub log_pf: [f64; FORWARD_ACTIONS],
    pub log_pb: [f64; BACKWARD_ACTIONS],
    pub log_flow: f64,
}

pub fn forward_mask(grid: GridSpec, s: StateId) -> [bool; FORWARD_ACTIONS] {
    let (r, c) = grid.coords(s);
    [c + 1 < grid.width, r + 1 < grid.height, true]
}

pub fn backward_mask(grid: GridSpec, s: StateId) -> [bool; BACKWARD_ACTIONS] {
    let (r, c) = grid.coords(s);
    [c > 0, r > 0]
}

/// Forward action that moves `from` to `to`.
pub fn forward_action(grid: GridSpec, from: StateId, to: StateId) -> usize {
    if grid.coords(from).0 == grid.coords(to).0 {
        RIGHT
    } else {
        DOWN
    }
}

/// Backward slot of parent `from` as seen from `to`.
pub fn backward_slot(grid: GridSpec, from: StateId, to: StateId) -> usize {
    if grid.coords(from).0 == grid.coords(to).0 {
        FROM_LEFT
    } else {
        FROM_ABOVE
    }
}

fn log_softmax<const N: usize>(logits: &[f64], mask: [bool; N]) -> [f64; N] {
    let mut out = [f64::NEG_INFINITY; N];
    let max = (0..N).filter(|&i| mask[i]).map(|i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return out;
    }
    let sum: f64 = (0..N).filter(|&i| mask[i]).map(|i| math::exp(logits[i] - max)).sum();
    let lse = max + math::ln(sum);
    for i in (0..N).filter(|&i| mask[i]) {
        out[i] = logits[i] - lse;
    }
    out
}

/// Anything that supplies per-state heads on a grid.
pub trait Heads {
    fn grid(&self) -> GridSpec;
    fn state_heads(&self, s: StateId) -> StateHeads;
    fn log_z(&self) -> f64;
}

/// Heads computed by the networks of a checkpoint.
pub struct MlpHeads<'a> {
    pub params: &'a MlpParams,
    pub log_z: f64,
    pub grid: GridSpec,
}

impl Heads for MlpHeads<'_> {
    fn grid(&self) -> GridSpec {
        self.grid
    }

    fn state_heads(&self, s: StateId) -> StateHeads {
        let out = mlp_forward(self.params, &khot_encode(self.grid, s)).expect("shapes checked on construction");
        StateHeads {
            log_pf: log_softmax(&out.forward_logits, forward_mask(self.grid, s)),
            log_pb: log_softmax(&out.backward_logits, backward_mask(self.grid, s)),
            log_flow: out.log_flow,
        }
    }

    fn log_z(&self) -> f64 {
        self.log_z
    }
}

/// Per-state heads stored in a table.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularHeads {
    pub grid: GridSpec,
    pub rows: Vec<StateHeads>,
    pub log_z: f64,
}

impl TabularHeads {
    /// The heads a perfectly trained model would have for this flow.
    pub fn from_flow_model(grid: GridSpec, env: &EnvGraph, flow: &FlowModel) -> Result<Self> {
        if env.num_states() != grid.num_cells() || flow.state_flow.len() != grid.num_cells() {
            return Err(Error::ShapeMismatch("flow model does not match grid".into()));
        }
        let rows = env
            .states()
            .map(|s| {
                let mut log_pf = [f64::NEG_INFINITY; FORWARD_ACTIONS];
                let fwd = flow.forward.row(s);
                for (&child, &p) in env.children(s).iter().zip(&fwd.probs) {
                    log_pf[forward_action(grid, s, child)] = math::ln(p);
                }
                log_pf[STOP] = math::ln(fwd.terminate.unwrap_or(0.0));
                let mut log_pb = [f64::NEG_INFINITY; BACKWARD_ACTIONS];
                let bwd = flow.backward.row(s);
                for (&parent, &p) in env.parents(s).iter().zip(&bwd.probs) {
                    log_pb[backward_slot(grid, parent, s)] = math::ln(p);
                }
                StateHeads { log_pf, log_pb, log_flow: flow.log_state_flow[s.0] }
            })
            .collect();
        Ok(Self { grid, rows, log_z: flow.log_partition })
    }
}

impl Heads for TabularHeads {
    fn grid(&self) -> GridSpec {
        self.grid
    }

    fn state_heads(&self, s: StateId) -> StateHeads {
        self.rows[s.0]
    }

    fn log_z(&self) -> f64 {
        self.log_z
    }
}

/// `ln(max(r, floor))` for every cell.
pub fn log_rewards(values: &[f64], floor: f64) -> Vec<f64> {
    values.iter().map(|&r| math::ln(r.max(floor))).collect()
}

/// SubTB terms of `traj` under `heads`, with the sink tied to `log_reward`.
pub fn trajectory_terms(heads: &impl Heads, traj: &Trajectory, log_reward: &[f64]) -> TrajectoryTerms {
    let grid = heads.grid();
    let st = &traj.states;
    let n = st.len() - 1;
    let mut terms = TrajectoryTerms {
        log_pf: Vec::with_capacity(n + 1),
        log_pb: Vec::with_capacity(n + 1),
        log_flow: Vec::with_capacity(n + 2),
    };
    terms.log_flow.push(heads.log_z());
    let mut here = heads.state_heads(st[0]);
    for t in 0..n {
        let next = heads.state_heads(st[t + 1]);
        terms.log_pf.push(here.log_pf[forward_action(grid, st[t], st[t + 1])]);
        terms.log_pb.push(next.log_pb[backward_slot(grid, st[t], st[t + 1])]);
        terms.log_flow.push(next.log_flow);
        here = next;
    }
    terms.log_pf.push(here.log_pf[STOP]);
    terms.log_pb.push(0.0);
    terms.log_flow.push(log_reward[traj.terminal().0]);
    terms
}

/// Parameter gradients of the batch loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub forward: Vec<f64>,
    pub backward: Vec<f64>,
    pub flow: Vec<f64>,
    pub log_z: f64,
}

/// Mean SubTB loss over `batch` and its exact gradient.
///
/// Each distinct state of the batch goes through the networks once.
pub fn batch_loss_and_grad(
    params: &MlpParams,
    log_z: f64,
    grid: GridSpec,
    batch: &[Trajectory],
    log_reward: &[f64],
    lambda: f64,
) -> Result<(f64, Gradients)> {
    let dim = grid.feature_dim();
    params.check_shapes(dim)?;
    if log_reward.len() != grid.num_cells() {
        return Err(Error::ShapeMismatch("reward does not match grid".into()));
    }
    let mut slot = vec![usize::MAX; grid.num_cells()];
    let mut uniq = Vec::new();
    for s in batch.iter().flat_map(|t| t.states.iter()) {
        if slot[s.0] == usize::MAX {
            slot[s.0] = uniq.len();
            uniq.push(*s);
        }
    }
    let n = uniq.len();
    let mut xs = vec![0.0; n * dim];
    for (x, &s) in xs.chunks_exact_mut(dim).zip(&uniq) {
        for i in khot_indices(grid, s) {
            x[i] = 1.0;
        }
    }
    let (mut acts_f, mut acts_b, mut acts_l) = (Vec::new(), Vec::new(), Vec::new());
    params.forward.forward_batch(&xs, n, &mut acts_f);
    params.backward.forward_batch(&xs, n, &mut acts_b);
    params.flow.forward_batch(&xs, n, &mut acts_l);
    let heads = BatchHeads {
        grid,
        slot: &slot,
        rows: uniq
            .iter()
            .enumerate()
            .map(|(k, &s)| StateHeads {
                log_pf: log_softmax(&acts_f[2][k * 3..k * 3 + 3], forward_mask(grid, s)),
                log_pb: log_softmax(&acts_b[2][k * 2..k * 2 + 2], backward_mask(grid, s)),
                log_flow: acts_l[2][k],
            })
            .collect(),
        log_z,
    };

    let mut g_pf = vec![0.0; n * FORWARD_ACTIONS];
    let mut g_pb = vec![0.0; n * BACKWARD_ACTIONS];
    let mut g_flow = vec![0.0; n];
    let mut g_log_z = 0.0;
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for traj in batch {
        let terms = trajectory_terms(&heads, traj, log_reward);
        let (l, g) = subtb_loss_grad(&terms, lambda, scale);
        loss += l;
        let st = &traj.states;
        g_log_z += g.log_flow[0];
        for t in 0..st.len() - 1 {
            let (a, b) = (slot[st[t].0], slot[st[t + 1].0]);
            g_pf[a * 3 + forward_action(grid, st[t], st[t + 1])] += g.log_pf[t];
            g_pb[b * 2 + backward_slot(grid, st[t], st[t + 1])] += g.log_pb[t];
            g_flow[b] += g.log_flow[t + 1];
        }
        g_pf[slot[traj.terminal().0] * 3 + STOP] += g.log_pf[st.len() - 1];
    }

    // Log-softmax backward: dz_j = g_j - p_j * sum(g).
    for (k, row) in heads.rows.iter().enumerate() {
        softmax_backward(&mut g_pf[k * 3..k * 3 + 3], &row.log_pf);
        softmax_backward(&mut g_pb[k * 2..k * 2 + 2], &row.log_pb);
    }
    let mut grads = Gradients {
        forward: vec![0.0; params.forward.num_params()],
        backward: vec![0.0; params.backward.num_params()],
        flow: vec![0.0; params.flow.num_params()],
        log_z: g_log_z,
    };
    params.forward.backward_batch(&xs, n, &acts_f, &g_pf, &mut grads.forward);
    params.backward.backward_batch(&xs, n, &acts_b, &g_pb, &mut grads.backward);
    params.flow.backward_batch(&xs, n, &acts_l, &g_flow, &mut grads.flow);
    Ok((loss, grads))
}

fn softmax_backward(g: &mut [f64], log_p: &[f64]) {
    let total: f64 = g.iter().sum();
    for (gi, &lp) in g.iter_mut().zip(log_p) {
        *gi = if lp == f64::NEG_INFINITY { 0.0 } else { *gi - math::exp(lp) * total };
    }
}

struct BatchHeads<'a> {
    grid: GridSpec,
    slot: &'a [usize],
    rows: Vec<StateHeads>,
    log_z: f64,
}

impl Heads for BatchHeads<'_> {
    fn grid(&self) -> GridSpec {
        self.grid
    }

    fn state_heads(&self, s: StateId) -> StateHeads {
        self.rows[self.slot[s.0]]
    }

    fn log_z(&self) -> f64 {
        self.log_z
    }
}

/// Trained networks plus everything needed to rebuild and describe them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: MlpParams,
    pub log_z: f64,
    pub grid: GridSpec,
    pub reward_name: String,
    pub reward_params: BTreeMap<String, f64>,
    pub config: TrainConfig,
    /// Mean batch loss per iteration.
    pub loss_trace: Vec<f64>,
}

impl Checkpoint {
    pub fn heads(&self) -> MlpHeads<'_> {
        MlpHeads { params: &self.params, log_z: self.log_z, grid: self.grid }
    }
}

/// Samples one grid trajectory from the forward network, mixing in uniform
/// actions with probability `epsilon`.
fn sample_grid_trajectory<R: Rng + ?Sized>(
    grid: GridSpec,
    cache: &mut [Option<[f64; FORWARD_ACTIONS]>],
    forward: &Mlp,
    epsilon: f64,
    rng: &mut R,
) -> Trajectory {
    let mut s = StateId(0);
    let mut states = vec![s];
    loop {
        let mask = forward_mask(grid, s);
        let probs = *cache[s.0].get_or_insert_with(|| {
            let logits = forward.forward(&khot_encode(grid, s).0);
            log_softmax(&logits, mask).map(math::exp)
        });
        let valid = mask.iter().filter(|&&m| m).count() as f64;
        let mixed = (0..FORWARD_ACTIONS).map(|a| if mask[a] { (1.0 - epsilon) * probs[a] + epsilon / valid } else { 0.0 });
        let total: f64 = mixed.clone().sum();
        let a = sample_index(mixed, total, rng.gen::<f64>());
        let (r, c) = grid.coords(s);
        s = match a {
            RIGHT => grid.cell(r, c + 1),
            DOWN => grid.cell(r + 1, c),
            _ => return Trajectory::new(states),
        };
        states.push(s);
    }
}

/// Trains the three networks and `log Z` on `reward` over the grid.
///
/// Every iteration samples fresh trajectories with epsilon-greedy exploration.
/// Once the replay buffer holds a full batch, half of each batch is drawn
/// from it (uniformly, with replacement, before the fresh half is added).
pub fn train_gfn(grid: GridSpec, reward: &RewardField, cfg: &TrainConfig) -> Result<Checkpoint> {
    train_gfn_with(grid, reward, cfg, |_, _| {})
}

/// As [`train_gfn`], calling `progress(iteration, loss)` after each step.
pub fn train_gfn_with(
    grid: GridSpec,
    reward: &RewardField,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<Checkpoint> {
    cfg.validate()?;
    if reward.values.len() != grid.num_cells() {
        return Err(Error::ShapeMismatch(alloc::format!(
            "reward has {} cells, grid {grid} has {}",
            reward.values.len(),
            grid.num_cells()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = MlpParams::init(grid.feature_dim(), cfg.hidden_units, &mut rng);
    let mut log_z = 0.0;
    let log_reward = log_rewards(&reward.values, cfg.reward_floor);
    let mut opt = [
        AdamState::new(params.forward.num_params()),
        AdamState::new(params.backward.num_params()),
        AdamState::new(params.flow.num_params()),
    ];
    let mut opt_z = AdamState::new(1);
    let mut buffer: ReplayBuffer<Trajectory> = ReplayBuffer::new(cfg.replay_capacity);
    let mut cache = vec![None; grid.num_cells()];
    let mut loss_trace = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let n_fresh = if buffer.len() >= cfg.batch_size { cfg.batch_size / 2 } else { cfg.batch_size };
        cache.iter_mut().for_each(|c| *c = None);
        let mut batch: Vec<Trajectory> = (0..n_fresh)
            .map(|_| sample_grid_trajectory(grid, &mut cache, &params.forward, cfg.epsilon_greedy, &mut rng))
            .collect();
        for _ in n_fresh..cfg.batch_size {
            batch.push(buffer.sample(&mut rng).expect("buffer holds a full batch").clone());
        }
        for t in &batch[..n_fresh] {
            buffer.push(t.clone());
        }

        let (loss, grads) = batch_loss_and_grad(&params, log_z, grid, &batch, &log_reward, cfg.subtb_lambda)?;
        if !loss.is_finite() || !grads.log_z.is_finite() {
            return Err(Error::DivergedLoss { iteration: it });
        }
        adam_step(params.forward.params_mut(), &grads.forward, &mut opt[0], cfg.lr_params);
        adam_step(params.backward.params_mut(), &grads.backward, &mut opt[1], cfg.lr_params);
        adam_step(params.flow.params_mut(), &grads.flow, &mut opt[2], cfg.lr_params);
        let mut z = [log_z];
        adam_step(&mut z, &[grads.log_z], &mut opt_z, cfg.lr_log_z);
        log_z = z[0];
        loss_trace.push(loss);
        progress(it, loss);
    }

    Ok(Checkpoint {
        params,
        log_z,
        grid,
        reward_name: reward.name.clone(),
        reward_params: reward.params.clone(),
        config: cfg.clone(),
        loss_trace,
    })
}

/// Component built from any heads: masked-softmax forward policy,
/// `u(s) = exp(log F(s) - log Z)` with `u(s_0) = 1`, and `Z = exp(log Z)`.
pub fn component_from_heads(env: &EnvGraph, heads: &impl Heads) -> Result<ComponentModel> {
    let grid = heads.grid();
    if env.num_states() != grid.num_cells() {
        return Err(Error::ShapeMismatch(alloc::format!("grid {grid} does not match an env of {} states", env.num_states())));
    }
    let log_z = heads.log_z();
    let mut rows = Vec::with_capacity(env.num_states());
    let mut reach = Vec::with_capacity(env.num_states());
    for s in env.states() {
        let h = heads.state_heads(s);
        let probs = env.children(s).iter().map(|&c| math::exp(h.log_pf[forward_action(grid, s, c)])).collect();
        let terminate = env.is_terminating(s).then(|| math::exp(h.log_pf[STOP]));
        rows.push(TransitionDistribution::new(probs, terminate));
        reach.push(if s == env.initial() { 1.0 } else { math::exp(h.log_flow - log_z) });
    }
    ComponentModel::new(env, TabularPolicy::new(rows), reach, math::exp(log_z))
}

pub fn component_from_checkpoint(ckpt: &Checkpoint, env: &EnvGraph) -> Result<ComponentModel> {
    ckpt.params.check_shapes(ckpt.grid.feature_dim())?;
    component_from_heads(env, &ckpt.heads())
}

/// Builds the grid for `ckpt` and evaluates it.
pub fn checkpoint_component(ckpt: &Checkpoint) -> Result<ComponentModel> {
    component_from_checkpoint(ckpt, &build_grid(ckpt.grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::l1_error;
    use crate::dag::{sample_trajectory, TerminalDistribution};
    use crate::flows::{as_component, solve_exact_flows, BackwardMode};
    use crate::grid::{eval_reward_field, RewardName, RewardSpec};

    fn positive_field(grid: GridSpec) -> Vec<f64> {
        let f = eval_reward_field(&RewardSpec::new(RewardName::Shubert), grid).unwrap();
        f.values.iter().map(|v| v + 0.05).collect()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lr_params: 0.0, ..Default::default() },
            TrainConfig { lr_log_z: -1.0, ..Default::default() },
            TrainConfig { subtb_lambda: 0.0, ..Default::default() },
            TrainConfig { epsilon_greedy: 1.5, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn zero_networks_give_uniform_policy() {
        let grid = GridSpec::new(3, 4).unwrap();
        let params = MlpParams::zeros(grid.feature_dim(), 8);
        let out = mlp_forward(&params, &khot_encode(grid, StateId(0))).unwrap();
        assert_eq!(out.forward_logits, [0.0; 3]);
        let heads = MlpHeads { params: &params, log_z: 0.0, grid };
        let corner = heads.state_heads(grid.cell(2, 3));
        assert_eq!(corner.log_pf, [f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0]);
        let mid = heads.state_heads(grid.cell(1, 1));
        assert!(mid.log_pf.iter().all(|&l| (l + math::ln(3.0)).abs() < 1e-15));
        assert!(mlp_forward(&params, &FeatureVector(vec![0.0; 3])).is_err());
    }

    #[test]
    fn exact_heads_have_zero_loss() {
        let grid = GridSpec::new(5, 4).unwrap();
        let env = build_grid(grid);
        let reward = positive_field(grid);
        let flow = solve_exact_flows(&env, &reward, BackwardMode::Uniform).unwrap();
        let heads = TabularHeads::from_flow_model(grid, &env, &flow).unwrap();
        let log_r = log_rewards(&reward, 1e-4);
        let comp = as_component(&flow);
        for seed in 0..50 {
            let traj = sample_trajectory(&env, &comp, seed).unwrap();
            let terms = trajectory_terms(&heads, &traj, &log_r);
            assert!(subtb_loss(&terms, 2.0) < 1e-18);
        }
    }

    #[test]
    fn tabular_injection_round_trip() {
        let grid = GridSpec::new(6, 7).unwrap();
        let env = build_grid(grid);
        let flow = solve_exact_flows(&env, &positive_field(grid), BackwardMode::Uniform).unwrap();
        let heads = TabularHeads::from_flow_model(grid, &env, &flow).unwrap();
        let got = component_from_heads(&env, &heads).unwrap();
        let want = as_component(&flow);
        assert_eq!(got.reach[0], 1.0);
        assert!((got.partition - want.partition).abs() < 1e-10 * want.partition);
        for s in env.states() {
            assert!((got.reach[s.0] - want.reach[s.0]).abs() < 1e-10);
            for (a, b) in got.forward.row(s).actions().zip(want.forward.row(s).actions()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        assert!(l1_error(&got.terminal, &want.terminal) < 1e-10);
    }

    fn sample_batch(grid: GridSpec, params: &MlpParams, n: usize, seed: u64) -> Vec<Trajectory> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cache = vec![None; grid.num_cells()];
        (0..n).map(|_| sample_grid_trajectory(grid, &mut cache, &params.forward, 0.3, &mut rng)).collect()
    }

    #[test]
    fn batch_loss_matches_per_trajectory_loss() {
        let grid = GridSpec::new(4, 3).unwrap();
        let params = MlpParams::init(grid.feature_dim(), 16, &mut ChaCha8Rng::seed_from_u64(2));
        let log_r = log_rewards(&positive_field(grid), 1e-4);
        let batch = sample_batch(grid, &params, 10, 3);
        let (loss, _) = batch_loss_and_grad(&params, 0.7, grid, &batch, &log_r, 2.0).unwrap();
        let heads = MlpHeads { params: &params, log_z: 0.7, grid };
        let want: f64 = batch.iter().map(|t| subtb_loss(&trajectory_terms(&heads, t, &log_r), 2.0)).sum::<f64>() / 10.0;
        assert!((loss - want).abs() < 1e-12 * want);
    }

    #[test]
    fn exact_heads_have_zero_batch_gradient_wrt_log_z() {
        let grid = GridSpec::new(1, 1).unwrap();
        // A single cell: the only trajectory stops at once and log Z must equal log R.
        let params = MlpParams::zeros(grid.feature_dim(), 4);
        let log_r = [math::ln(0.3)];
        let batch = [Trajectory::new(vec![StateId(0)])];
        let (loss, g) = batch_loss_and_grad(&params, math::ln(0.3), grid, &batch, &log_r, 2.0).unwrap();
        assert!(loss < 1e-30 && g.log_z.abs() < 1e-15);
        assert!(g.forward.iter().chain(&g.flow).all(|&v| v == 0.0));
    }

    #[test]
    fn single_parent_chain_freezes_backward_net() {
        let grid = GridSpec::new(1, 6).unwrap();
        let params = MlpParams::init(grid.feature_dim(), 8, &mut ChaCha8Rng::seed_from_u64(5));
        let log_r = log_rewards(&positive_field(grid), 1e-4);
        let batch = sample_batch(grid, &params, 16, 1);
        let (loss, g) = batch_loss_and_grad(&params, 0.0, grid, &batch, &log_r, 2.0).unwrap();
        assert!(loss > 0.0);
        assert!(g.backward.iter().all(|&v| v == 0.0));
        assert!(g.forward.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let grid = GridSpec::new(3, 3).unwrap();
        let params = MlpParams::init(grid.feature_dim(), 12, &mut ChaCha8Rng::seed_from_u64(8));
        let log_r = log_rewards(&positive_field(grid), 1e-4);
        let batch = sample_batch(grid, &params, 6, 9);
        let log_z = 0.4;
        let (_, g) = batch_loss_and_grad(&params, log_z, grid, &batch, &log_r, 2.0).unwrap();
        let loss_at = |p: &MlpParams, z: f64| batch_loss_and_grad(p, z, grid, &batch, &log_r, 2.0).unwrap().0;
        let h = 1e-5;
        let rel = |a: f64, f: f64| (a - f).abs() / a.abs().max(f.abs()).max(1e-6);
        let fd_z = (loss_at(&params, log_z + h) - loss_at(&params, log_z - h)) / (2.0 * h);
        assert!(rel(g.log_z, fd_z) < 1e-4);
        for net in 0..3 {
            let analytic = [&g.forward, &g.backward, &g.flow][net];
            for k in 0..analytic.len() {
                let mut p = params.clone();
                fn buf(p: &mut MlpParams, net: usize) -> &mut [f64] {
                    match net {
                        0 => p.forward.params_mut(),
                        1 => p.backward.params_mut(),
                        _ => p.flow.params_mut(),
                    }
                }
                let orig = buf(&mut p, net)[k];
                buf(&mut p, net)[k] = orig + h;
                let up = loss_at(&p, log_z);
                buf(&mut p, net)[k] = orig - h;
                let down = loss_at(&p, log_z);
                let fd = (up - down) / (2.0 * h);
                assert!(rel(analytic[k], fd) < 1e-4, "net {net} param {k}: {} vs {fd}", analytic[k]);
            }
        }
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let grid = GridSpec::new(4, 4).unwrap();
        let reward = eval_reward_field(&RewardSpec::new(RewardName::Diagonal), grid).unwrap();
        let cfg = TrainConfig { iterations: 0, seed: 3, ..Default::default() };
        let ckpt = train_gfn(grid, &reward, &cfg).unwrap();
        let init = MlpParams::init(grid.feature_dim(), 64, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(ckpt.params, init);
        assert_eq!(ckpt.log_z, 0.0);
        assert!(ckpt.loss_trace.is_empty());
        let comp = checkpoint_component(&ckpt).unwrap();
        assert_eq!(comp.reach[0], 1.0);
        assert!((comp.terminal.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic() {
        let grid = GridSpec::new(4, 4).unwrap();
        let reward = eval_reward_field(&RewardSpec::new(RewardName::Diagonal), grid).unwrap();
        let cfg = TrainConfig { iterations: 30, batch_size: 16, seed: 7, ..Default::default() };
        let a = train_gfn(grid, &reward, &cfg).unwrap();
        let b = train_gfn(grid, &reward, &cfg).unwrap();
        assert_eq!(a, b);
        let c = train_gfn(grid, &reward, &TrainConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn diagonal_8x8_converges() {
        let grid = GridSpec::new(8, 8).unwrap();
        let reward = eval_reward_field(&RewardSpec::new(RewardName::Diagonal), grid).unwrap();
        let cfg = TrainConfig { iterations: 5000, seed: 1, ..Default::default() };
        let ckpt = train_gfn(grid, &reward, &cfg).unwrap();
        let comp = checkpoint_component(&ckpt).unwrap();
        let target = TerminalDistribution::normalized(reward.values.clone()).unwrap();
        let l1 = l1_error(&comp.terminal, &target);
        assert!(l1 < 0.05, "L1 = {l1}");
    }
}
