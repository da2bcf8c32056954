//! Finite DAG environments and the exact evaluation primitives every other
//! module builds on.
//!
//! The sink is not a node. A terminating state carries an extra "terminate"
//! edge, which is always the last entry of its [`TransitionDistribution`].

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::math;
use crate::{Error, Result};

/// Tolerance used to decide that a policy leaks probability mass.
pub const MASS_LEAK_TOLERANCE: f64 = 1e-6;

/// Dense index of a state inside its [`EnvGraph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StateId(pub usize);

impl StateId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// A finite directed graph of states with one initial state.
///
/// `children` order is significant: every [`TransitionDistribution`] for a
/// state is aligned with it.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvGraph {
    initial: StateId,
    children: Vec<Vec<StateId>>,
    parents: Vec<Vec<StateId>>,
    terminating: Vec<bool>,
    topo: Option<Vec<StateId>>,
}

impl EnvGraph {
    /// Builds a graph and derives `parents` as the transpose of `children`.
    ///
    /// Cycles are accepted here so that [`validate_env`] can report them;
    /// evaluation functions fail with [`Error::CycleDetected`] instead.
    pub fn new(initial: StateId, children: Vec<Vec<StateId>>, terminating: Vec<bool>) -> Result<Self> {
        let n = children.len();
        let mut parents = vec![Vec::new(); n];
        for (s, kids) in children.iter().enumerate() {
            for &c in kids {
                if c.0 >= n {
                    return Err(Error::InvalidEnv(alloc::format!("edge {s} -> {c} out of range")));
                }
                parents[c.0].push(StateId(s));
            }
        }
        Self::from_raw_parts(initial, children, parents, terminating)
    }

    /// Builds a graph with caller-supplied parent lists, which are not checked
    /// against `children` (see [`validate_env`]).
    pub fn from_raw_parts(
        initial: StateId,
        children: Vec<Vec<StateId>>,
        parents: Vec<Vec<StateId>>,
        terminating: Vec<bool>,
    ) -> Result<Self> {
        let n = children.len();
        if n == 0 {
            return Err(Error::InvalidEnv("no states".into()));
        }
        if parents.len() != n || terminating.len() != n {
            return Err(Error::InvalidEnv("adjacency and terminating lengths differ".into()));
        }
        if initial.0 >= n {
            return Err(Error::InvalidEnv("initial state out of range".into()));
        }
        let in_range = |lists: &[Vec<StateId>]| lists.iter().flatten().all(|s| s.0 < n);
        if !in_range(&children) || !in_range(&parents) {
            return Err(Error::InvalidEnv("adjacency references a missing state".into()));
        }
        let topo = kahn_order(&children);
        Ok(Self { initial, children, parents, terminating, topo })
    }

    #[inline]
    pub fn num_states(&self) -> usize {
        self.children.len()
    }

    #[inline]
    pub fn initial(&self) -> StateId {
        self.initial
    }

    #[inline]
    pub fn children(&self, s: StateId) -> &[StateId] {
        &self.children[s.0]
    }

    #[inline]
    pub fn parents(&self, s: StateId) -> &[StateId] {
        &self.parents[s.0]
    }

    #[inline]
    pub fn is_terminating(&self, s: StateId) -> bool {
        self.terminating[s.0]
    }

    /// Outgoing edges of `s`, counting the terminate edge.
    #[inline]
    pub fn num_actions(&self, s: StateId) -> usize {
        self.children[s.0].len() + usize::from(self.terminating[s.0])
    }

    pub fn num_edges(&self) -> usize {
        self.children.iter().map(Vec::len).sum()
    }

    pub fn states(&self) -> impl DoubleEndedIterator<Item = StateId> + ExactSizeIterator {
        (0..self.num_states()).map(StateId)
    }

    pub fn terminating_states(&self) -> impl Iterator<Item = StateId> + '_ {
        self.states().filter(move |&s| self.terminating[s.0])
    }

    /// Cached topological order, or [`Error::CycleDetected`].
    pub fn topo(&self) -> Result<&[StateId]> {
        self.topo.as_deref().ok_or(Error::CycleDetected)
    }
}

fn kahn_order(children: &[Vec<StateId>]) -> Option<Vec<StateId>> {
    let n = children.len();
    let mut indegree = vec![0usize; n];
    for c in children.iter().flatten() {
        indegree[c.0] += 1;
    }
    let mut queue: VecDeque<StateId> = (0..n).filter(|&s| indegree[s] == 0).map(StateId).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(s) = queue.pop_front() {
        order.push(s);
        for &c in &children[s.0] {
            indegree[c.0] -= 1;
            if indegree[c.0] == 0 {
                queue.push_back(c);
            }
        }
    }
    (order.len() == n).then_some(order)
}

/// Topological order of all states: every edge `a -> b` has `a` before `b`.
pub fn topological_order(env: &EnvGraph) -> Result<Vec<StateId>> {
    env.topo().map(<[StateId]>::to_vec)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ValidationFailure {
    CycleDetected,
    UnreachableState(StateId),
    NoTerminatingState,
    ParentsNotTranspose,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub failures: Vec<ValidationFailure>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn unreachable(&self) -> impl Iterator<Item = StateId> + '_ {
        self.failures.iter().filter_map(|f| match f {
            ValidationFailure::UnreachableState(s) => Some(*s),
            _ => None,
        })
    }
}

/// Checks acyclicity, reachability from the initial state, presence of a
/// terminating state and that `parents` is the transpose of `children`.
pub fn validate_env(env: &EnvGraph) -> ValidationReport {
    let mut failures = Vec::new();
    if env.topo.is_none() {
        failures.push(ValidationFailure::CycleDetected);
    }

    let n = env.num_states();
    let mut seen = vec![false; n];
    let mut stack = vec![env.initial];
    seen[env.initial.0] = true;
    while let Some(s) = stack.pop() {
        for &c in env.children(s) {
            if !seen[c.0] {
                seen[c.0] = true;
                stack.push(c);
            }
        }
    }
    failures.extend(
        seen.iter()
            .enumerate()
            .filter(|(_, &r)| !r)
            .map(|(s, _)| ValidationFailure::UnreachableState(StateId(s))),
    );

    if !env.terminating.iter().any(|&t| t) {
        failures.push(ValidationFailure::NoTerminatingState);
    }

    let mut expected: Vec<Vec<StateId>> = vec![Vec::new(); n];
    for s in env.states() {
        for &c in env.children(s) {
            expected[c.0].push(s);
        }
    }
    let transposed = expected.iter_mut().zip(&env.parents).all(|(want, got)| {
        let mut got = got.clone();
        want.sort_unstable();
        got.sort_unstable();
        *want == got
    });
    if !transposed {
        failures.push(ValidationFailure::ParentsNotTranspose);
    }

    ValidationReport { failures }
}

/// Forward transition probabilities out of one state, aligned with
/// `env.children(s)`, plus the terminate probability when `s` is terminating.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionDistribution {
    pub probs: Vec<f64>,
    pub terminate: Option<f64>,
}

impl TransitionDistribution {
    pub fn new(probs: Vec<f64>, terminate: Option<f64>) -> Self {
        Self { probs, terminate }
    }

    /// Uniform over the available actions of `s`.
    pub fn uniform(env: &EnvGraph, s: StateId) -> Self {
        let p = 1.0 / env.num_actions(s) as f64;
        Self {
            probs: vec![p; env.children(s).len()],
            terminate: env.is_terminating(s).then_some(p),
        }
    }

    /// Builds from per-action weights laid out as `[children..., terminate]`.
    pub fn from_actions(env: &EnvGraph, s: StateId, mut weights: Vec<f64>) -> Self {
        let terminate = if env.is_terminating(s) { weights.pop() } else { None };
        Self { probs: weights, terminate }
    }

    /// Action probabilities with the terminate edge last.
    pub fn actions(&self) -> impl Iterator<Item = f64> + '_ {
        self.probs.iter().copied().chain(self.terminate)
    }

    pub fn num_actions(&self) -> usize {
        self.probs.len() + usize::from(self.terminate.is_some())
    }

    /// Probability of action `a` in the `[children..., terminate]` layout.
    pub fn action(&self, a: usize) -> f64 {
        if a < self.probs.len() {
            self.probs[a]
        } else {
            self.terminate.unwrap_or(0.0)
        }
    }

    pub fn total(&self) -> f64 {
        self.actions().sum()
    }

    fn check_shape(&self, env: &EnvGraph, s: StateId) -> Result<()> {
        if self.probs.len() != env.children(s).len() || self.terminate.is_some() != env.is_terminating(s) {
            return Err(Error::PolicyMismatch(s));
        }
        Ok(())
    }
}

/// A forward (or backward) policy: a deterministic map from states to
/// transition distributions.
pub trait Policy {
    fn transition(&self, s: StateId) -> Result<TransitionDistribution>;
}

impl<P: Policy + ?Sized> Policy for &P {
    fn transition(&self, s: StateId) -> Result<TransitionDistribution> {
        (**self).transition(s)
    }
}

/// Uniform over the available actions at every state.
#[derive(Clone, Copy, Debug)]
pub struct UniformPolicy<'a> {
    env: &'a EnvGraph,
}

impl<'a> UniformPolicy<'a> {
    pub fn new(env: &'a EnvGraph) -> Self {
        Self { env }
    }
}

impl Policy for UniformPolicy<'_> {
    fn transition(&self, s: StateId) -> Result<TransitionDistribution> {
        Ok(TransitionDistribution::uniform(self.env, s))
    }
}

/// A policy stored as one row per state.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    rows: Vec<TransitionDistribution>,
}

impl TabularPolicy {
    pub fn new(rows: Vec<TransitionDistribution>) -> Self {
        Self { rows }
    }

    /// Materializes `policy` at every state of `env`.
    pub fn from_policy(env: &EnvGraph, policy: &impl Policy) -> Result<Self> {
        env.states().map(|s| policy.transition(s)).collect::<Result<_>>().map(Self::new)
    }

    #[inline]
    pub fn row(&self, s: StateId) -> &TransitionDistribution {
        &self.rows[s.0]
    }

    pub fn rows(&self) -> &[TransitionDistribution] {
        &self.rows
    }
}

impl Policy for TabularPolicy {
    fn transition(&self, s: StateId) -> Result<TransitionDistribution> {
        self.rows.get(s.0).cloned().ok_or(Error::PolicyMismatch(s))
    }
}

/// A complete trajectory `s0 -> ... -> x`, implicitly followed by the sink.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Trajectory {
    pub states: Vec<StateId>,
}

impl Trajectory {
    pub fn new(states: Vec<StateId>) -> Self {
        Self { states }
    }

    pub fn terminal(&self) -> StateId {
        *self.states.last().expect("trajectory is never empty")
    }

    /// Starts at the initial state, follows edges and ends at a terminating state.
    pub fn is_valid(&self, env: &EnvGraph) -> bool {
        let Some((&first, _)) = self.states.split_first() else {
            return false;
        };
        first == env.initial()
            && self.states.windows(2).all(|w| env.children(w[0]).contains(&w[1]))
            && env.is_terminating(self.terminal())
    }

    /// Log-probability of the whole trajectory, terminate edge included.
    pub fn log_prob(&self, env: &EnvGraph, policy: &impl Policy) -> Result<f64> {
        let mut logp = 0.0;
        for w in self.states.windows(2) {
            let row = policy.transition(w[0])?;
            let a = env.children(w[0]).iter().position(|&c| c == w[1]).ok_or(Error::PolicyMismatch(w[0]))?;
            logp += math::ln(row.probs[a]);
        }
        let x = self.terminal();
        let term = policy.transition(x)?.terminate.ok_or(Error::PolicyMismatch(x))?;
        Ok(logp + math::ln(term))
    }
}

/// Probability mass over terminating states, stored densely by state index
/// (non-terminating states always hold zero).
#[derive(Clone, Debug, PartialEq)]
pub struct TerminalDistribution {
    mass: Vec<f64>,
}

impl TerminalDistribution {
    pub fn from_mass(mass: Vec<f64>) -> Self {
        Self { mass }
    }

    /// Normalizes nonnegative weights; `None` when they sum to zero.
    pub fn normalized(weights: Vec<f64>) -> Option<Self> {
        let total: f64 = weights.iter().sum();
        (total > 0.0 && total.is_finite()).then(|| Self { mass: weights.into_iter().map(|w| w / total).collect() })
    }

    /// Point mass at `s` in an environment with `num_states` states.
    pub fn point(num_states: usize, s: StateId) -> Self {
        let mut mass = vec![0.0; num_states];
        mass[s.0] = 1.0;
        Self { mass }
    }

    #[inline]
    pub fn get(&self, s: StateId) -> f64 {
        self.mass.get(s.0).copied().unwrap_or(0.0)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.mass
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.mass
    }
}

/// One topological pass computing reaching probabilities and terminal mass.
///
/// States with zero reaching probability are never queried, so a policy may be
/// undefined (e.g. [`Error::DeadState`]) wherever it cannot be reached.
fn forward_pass(env: &EnvGraph, policy: &impl Policy) -> Result<(Vec<f64>, Vec<f64>)> {
    let order = env.topo()?;
    let n = env.num_states();
    let mut reach = vec![0.0; n];
    let mut terminal = vec![0.0; n];
    reach[env.initial().0] = 1.0;
    for &s in order {
        let u = reach[s.0];
        if u == 0.0 {
            continue;
        }
        let row = policy.transition(s)?;
        row.check_shape(env, s)?;
        for (&c, &p) in env.children(s).iter().zip(&row.probs) {
            reach[c.0] += u * p;
        }
        if let Some(t) = row.terminate {
            terminal[s.0] = u * t;
        }
    }
    Ok((reach, terminal))
}

/// Reaching probabilities `u(s)`: `u(s0) = 1` and
/// `u(s) = sum over parents p of u(p) * p_F(s | p)`.
pub fn reaching_probabilities(env: &EnvGraph, policy: &impl Policy) -> Result<Vec<f64>> {
    forward_pass(env, policy).map(|(reach, _)| reach)
}

/// Terminal distribution `p(x) = u(x) * p_F(sink | x)`.
///
/// Fails with [`Error::NonTerminatingPolicy`] when the total mass is off by
/// more than [`MASS_LEAK_TOLERANCE`].
pub fn terminating_distribution(env: &EnvGraph, policy: &impl Policy) -> Result<TerminalDistribution> {
    forward_pass(env, policy).and_then(|(_, terminal)| checked_terminal(terminal))
}

/// Both quantities from a single pass.
pub fn reach_and_terminal(env: &EnvGraph, policy: &impl Policy) -> Result<(Vec<f64>, TerminalDistribution)> {
    let (reach, terminal) = forward_pass(env, policy)?;
    Ok((reach, checked_terminal(terminal)?))
}

fn checked_terminal(terminal: Vec<f64>) -> Result<TerminalDistribution> {
    let mass: f64 = terminal.iter().sum();
    if !((mass - 1.0).abs() <= MASS_LEAK_TOLERANCE) {
        return Err(Error::NonTerminatingPolicy { mass });
    }
    Ok(TerminalDistribution::from_mass(terminal))
}

/// Result of explicitly enumerating every complete trajectory with nonzero
/// probability.
#[derive(Clone, Debug)]
pub struct Enumeration {
    pub terminal: TerminalDistribution,
    /// Total probability of complete trajectories passing through each state.
    pub visit: Vec<f64>,
    pub trajectories: usize,
}

/// Brute-force oracle: sums trajectory probabilities (accumulated in log
/// space) over all complete trajectories.
pub fn enumerate_trajectories(env: &EnvGraph, policy: &impl Policy, max_trajectories: usize) -> Result<Enumeration> {
    env.topo()?;
    let n = env.num_states();
    let mut terminal = vec![0.0; n];
    let mut visit = vec![0.0; n];
    let mut count = 0usize;

    // (state, log-prob of the prefix ending at it, depth in `path`)
    let mut stack = vec![(env.initial(), 0.0f64, 0usize)];
    let mut path: Vec<StateId> = Vec::new();
    while let Some((s, logp, depth)) = stack.pop() {
        path.truncate(depth);
        path.push(s);
        let row = policy.transition(s)?;
        row.check_shape(env, s)?;
        if let Some(t) = row.terminate.filter(|&t| t > 0.0) {
            count += 1;
            if count > max_trajectories {
                return Err(Error::TooManyTrajectories { cap: max_trajectories });
            }
            let p = math::exp(logp + math::ln(t));
            terminal[s.0] += p;
            for v in &path {
                visit[v.0] += p;
            }
        }
        for (&c, &p) in env.children(s).iter().zip(&row.probs).rev() {
            if p > 0.0 {
                stack.push((c, logp + math::ln(p), depth + 1));
            }
        }
    }
    Ok(Enumeration { terminal: TerminalDistribution::from_mass(terminal), visit, trajectories: count })
}

/// Terminal distribution by explicit trajectory enumeration.
pub fn enumerate_trajectory_distribution(
    env: &EnvGraph,
    policy: &impl Policy,
    max_trajectories: usize,
) -> Result<TerminalDistribution> {
    enumerate_trajectories(env, policy, max_trajectories).map(|e| e.terminal)
}

/// Ancestral sampling from the initial state, seeded.
pub fn sample_trajectory(env: &EnvGraph, policy: &impl Policy, rng_seed: u64) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sample_trajectory_with(env, policy, &mut rng)
}

/// Ancestral sampling drawing from a caller-owned RNG stream.
pub fn sample_trajectory_with<R: Rng + ?Sized>(env: &EnvGraph, policy: &impl Policy, rng: &mut R) -> Result<Trajectory> {
    let limit = env.num_states();
    let mut states = vec![env.initial()];
    loop {
        let s = *states.last().unwrap();
        let row = policy.transition(s)?;
        row.check_shape(env, s)?;
        let a = sample_index(row.actions(), row.total(), rng.gen::<f64>());
        if a >= row.probs.len() {
            return Ok(Trajectory::new(states));
        }
        if states.len() >= limit {
            return Err(Error::MaxLengthExceeded { limit });
        }
        states.push(env.children(s)[a]);
    }
}

/// Inverse-CDF draw from unnormalized weights; `u` is uniform in `[0, 1)`.
/// Never returns an index whose weight is zero.
pub(crate) fn sample_index(weights: impl Iterator<Item = f64>, total: f64, u: f64) -> usize {
    let target = u * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, w) in weights.enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last_positive = i;
        if target < acc {
            return i;
        }
    }
    last_positive
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, GridSpec};

    fn grid(h: usize, w: usize) -> EnvGraph {
        build_grid(GridSpec::new(h, w).unwrap())
    }

    fn cell(w: usize, r: usize, c: usize) -> StateId {
        StateId(r * w + c)
    }

    /// Always the first child; terminate only where there is no child.
    struct FirstChild<'a>(&'a EnvGraph);

    impl Policy for FirstChild<'_> {
        fn transition(&self, s: StateId) -> Result<TransitionDistribution> {
            let kids = self.0.children(s).len();
            let mut probs = vec![0.0; kids];
            if kids > 0 {
                probs[0] = 1.0;
            }
            Ok(TransitionDistribution::new(probs, Some(if kids == 0 { 1.0 } else { 0.0 })))
        }
    }

    #[test]
    fn single_state_env() {
        let env = EnvGraph::new(StateId(0), vec![vec![]], vec![true]).unwrap();
        assert_eq!(topological_order(&env).unwrap(), vec![StateId(0)]);
        let e = enumerate_trajectories(&env, &UniformPolicy::new(&env), 10).unwrap();
        assert_eq!(e.trajectories, 1);
        assert_eq!(e.terminal.get(StateId(0)), 1.0);
    }

    #[test]
    fn grid_2x2_order_endpoints() {
        let order = topological_order(&grid(2, 2)).unwrap();
        assert_eq!(order.first(), Some(&cell(2, 0, 0)));
        assert_eq!(order.last(), Some(&cell(2, 1, 1)));
    }

    #[test]
    fn two_cycle_is_reported() {
        let env = EnvGraph::new(StateId(0), vec![vec![StateId(1)], vec![StateId(0)]], vec![true, true]).unwrap();
        assert_eq!(topological_order(&env), Err(Error::CycleDetected));
        assert!(validate_env(&env).failures.contains(&ValidationFailure::CycleDetected));
        assert_eq!(reaching_probabilities(&env, &UniformPolicy::new(&env)), Err(Error::CycleDetected));
    }

    #[test]
    fn unreachable_and_broken_transpose() {
        let env = EnvGraph::new(StateId(0), vec![vec![StateId(1)], vec![], vec![]], vec![true; 3]).unwrap();
        let report = validate_env(&env);
        assert_eq!(report.unreachable().collect::<Vec<_>>(), vec![StateId(2)]);

        let bad = EnvGraph::from_raw_parts(
            StateId(0),
            vec![vec![StateId(1)], vec![]],
            vec![vec![], vec![]],
            vec![true, true],
        )
        .unwrap();
        assert!(validate_env(&bad).failures.contains(&ValidationFailure::ParentsNotTranspose));

        let no_term = EnvGraph::new(StateId(0), vec![vec![]], vec![false]).unwrap();
        assert!(validate_env(&no_term).failures.contains(&ValidationFailure::NoTerminatingState));
    }

    #[test]
    fn grid_2x2_uniform_values() {
        let env = grid(2, 2);
        let pol = UniformPolicy::new(&env);
        let (u, p) = reach_and_terminal(&env, &pol).unwrap();
        assert_eq!(u[0], 1.0);
        assert!((u[cell(2, 1, 1).0] - 1.0 / 3.0).abs() < 1e-15);
        let want = [1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 3.0];
        for (got, want) in p.as_slice().iter().zip(want) {
            assert!((got - want).abs() < 1e-15);
        }
        let e = enumerate_trajectories(&env, &pol, 100).unwrap();
        assert_eq!(e.trajectories, 5);
        for (a, b) in e.terminal.as_slice().iter().zip(p.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn enumeration_cap() {
        let env = grid(2, 2);
        assert_eq!(
            enumerate_trajectory_distribution(&env, &UniformPolicy::new(&env), 4),
            Err(Error::TooManyTrajectories { cap: 4 })
        );
    }

    #[test]
    fn terminate_at_start_is_point_mass() {
        let env = grid(3, 3);
        let mut rows = TabularPolicy::from_policy(&env, &UniformPolicy::new(&env)).unwrap().rows().to_vec();
        rows[0] = TransitionDistribution::new(vec![0.0, 0.0], Some(1.0));
        let p = terminating_distribution(&env, &TabularPolicy::new(rows)).unwrap();
        assert_eq!(p, TerminalDistribution::point(9, StateId(0)));
    }

    #[test]
    fn leaking_policy_is_rejected() {
        let env = grid(2, 2);
        let mut rows = TabularPolicy::from_policy(&env, &UniformPolicy::new(&env)).unwrap().rows().to_vec();
        rows[3] = TransitionDistribution::new(vec![], Some(0.5));
        let err = terminating_distribution(&env, &TabularPolicy::new(rows)).unwrap_err();
        assert!(matches!(err, Error::NonTerminatingPolicy { .. }));
    }

    #[test]
    fn misaligned_policy_is_rejected() {
        let env = grid(2, 2);
        let rows = vec![TransitionDistribution::new(vec![1.0], None); 4];
        assert_eq!(reaching_probabilities(&env, &TabularPolicy::new(rows)), Err(Error::PolicyMismatch(StateId(0))));
    }

    #[test]
    fn forced_path_sample() {
        let env = grid(2, 2);
        let t = sample_trajectory(&env, &FirstChild(&env), 7).unwrap();
        assert_eq!(t.states, vec![cell(2, 0, 0), cell(2, 0, 1), cell(2, 1, 1)]);
        assert!(t.is_valid(&env));
    }

    #[test]
    fn sampling_is_seeded() {
        let env = grid(6, 6);
        let pol = UniformPolicy::new(&env);
        for seed in 0..20 {
            assert_eq!(sample_trajectory(&env, &pol, seed).unwrap(), sample_trajectory(&env, &pol, seed).unwrap());
        }
    }

    #[test]
    fn monte_carlo_matches_dp() {
        let env = grid(2, 2);
        let pol = UniformPolicy::new(&env);
        let exact = terminating_distribution(&env, &pol).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 4];
        let n = 10_000;
        for _ in 0..n {
            counts[sample_trajectory_with(&env, &pol, &mut rng).unwrap().terminal().0] += 1;
        }
        for (s, c) in counts.iter().enumerate() {
            assert!((*c as f64 / n as f64 - exact.get(StateId(s))).abs() < 0.02);
        }
    }

    #[test]
    fn trajectory_log_prob() {
        let env = grid(2, 2);
        let t = Trajectory::new(vec![cell(2, 0, 0), cell(2, 1, 0), cell(2, 1, 1)]);
        let lp = t.log_prob(&env, &UniformPolicy::new(&env)).unwrap();
        assert!((lp - libm::log(1.0 / 6.0)).abs() < 1e-15);
    }

    #[test]
    fn sample_index_skips_zero_weights() {
        assert_eq!(sample_index([0.0, 1.0, 0.0].into_iter(), 1.0, 0.999_999), 1);
        assert_eq!(sample_index([0.5, 0.0, 0.5].into_iter(), 1.0, 0.75), 2);
    }
}
