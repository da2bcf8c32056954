//! Training-free composition of pre-trained GFlowNets.
//!
//! At a state `s` the mixing policy scores every outgoing action `a` with
//! `G(u_1(s) p_1(a|s), ..., u_k(s) p_k(a|s))` and normalizes the scores over
//! the actions of `s`. `G` is a [`Composition`] tree. Every node is
//! homogeneous of degree one, so nested operators can be applied pointwise
//! and the whole score vector can be rescaled before evaluation.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dag::{EnvGraph, Policy, StateId, TerminalDistribution, TransitionDistribution};
use crate::flows::ComponentModel;
use crate::math;
use crate::{Error, Result};

/// Expression tree over component indices.
#[derive(Clone, Debug, PartialEq)]
pub enum Composition {
    Leaf(usize),
    /// `sum_i w_i Z_i a_i`
    Linear { weights: Vec<f64>, leaves: Vec<usize> },
    /// `(sum_i w_i (Z_i a_i)^(1/beta))^beta`, for components trained on `R_i^beta`.
    Sharpened { beta: f64, weights: Vec<f64>, leaves: Vec<usize> },
    /// `u v / (u + v)`
    HarmonicMean(Box<Composition>, Box<Composition>),
    /// `u^2 / (u + v)`
    Contrast(Box<Composition>, Box<Composition>),
}

impl Composition {
    /// Linear scalarization over components `0..weights.len()`.
    pub fn linear(weights: Vec<f64>) -> Self {
        let leaves = (0..weights.len()).collect();
        Composition::Linear { weights, leaves }
    }

    pub fn sharpened(beta: f64, weights: Vec<f64>) -> Self {
        let leaves = (0..weights.len()).collect();
        Composition::Sharpened { beta, weights, leaves }
    }

    pub fn harmonic(a: Composition, b: Composition) -> Self {
        Composition::HarmonicMean(Box::new(a), Box::new(b))
    }

    pub fn contrast(a: Composition, b: Composition) -> Self {
        Composition::Contrast(Box::new(a), Box::new(b))
    }

    /// `((a op b) op c) op ...`
    pub fn chain(op: fn(Composition, Composition) -> Composition, operands: Vec<Composition>) -> Result<Self> {
        let mut it = operands.into_iter();
        let first = it.next().ok_or_else(|| Error::InvalidComposition("empty chain".into()))?;
        Ok(it.fold(first, op))
    }

    /// Component indices referenced anywhere in the tree, in visit order.
    pub fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves(&self, out: &mut Vec<usize>) {
        match self {
            Composition::Leaf(i) => out.push(*i),
            Composition::Linear { leaves, .. } | Composition::Sharpened { leaves, .. } => out.extend(leaves),
            Composition::HarmonicMean(a, b) | Composition::Contrast(a, b) => {
                a.collect_leaves(out);
                b.collect_leaves(out);
            }
        }
    }

    /// Structural checks plus a numeric degree-one homogeneity check.
    pub fn validate(&self, partitions: &[f64]) -> Result<()> {
        self.validate_structure(partitions.len())?;
        if let Some(i) = partitions.iter().position(|z| !(*z > 0.0 && z.is_finite())) {
            return Err(Error::InvalidComposition(alloc::format!("component {i} has partition {}", partitions[i])));
        }
        self.check_homogeneity(partitions, 0x5eed)
    }

    fn validate_structure(&self, k: usize) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidComposition(msg.into()));
        match self {
            Composition::Leaf(i) if *i >= k => bad("leaf index out of range"),
            Composition::Leaf(_) => Ok(()),
            Composition::Linear { weights, leaves } | Composition::Sharpened { weights, leaves, .. } => {
                if let Composition::Sharpened { beta, .. } = self {
                    if !(*beta >= 1.0 && beta.is_finite()) {
                        return bad("beta must be a finite value >= 1");
                    }
                }
                if weights.len() != leaves.len() || leaves.is_empty() {
                    return bad("weights and leaves differ in length");
                }
                if leaves.iter().any(|&i| i >= k) {
                    return bad("leaf index out of range");
                }
                if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
                    return bad("weights must be finite and nonnegative");
                }
                if weights.iter().all(|&w| w == 0.0) {
                    return bad("weights are all zero");
                }
                Ok(())
            }
            Composition::HarmonicMean(a, b) | Composition::Contrast(a, b) => {
                a.validate_structure(k)?;
                b.validate_structure(k)
            }
        }
    }

    /// Checks `G(c a) = c G(a)` at random positive points for every node.
    pub fn check_homogeneity(&self, partitions: &[f64], seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = partitions.len();
        for _ in 0..8 {
            let a: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
            for c in [1e-6, 0.37, 1e6] {
                let scaled: Vec<f64> = a.iter().map(|x| x * c).collect();
                let (lhs, rhs) = (self.eval(&scaled, partitions), c * self.eval(&a, partitions));
                if (lhs - rhs).abs() > 1e-12 * rhs.abs().max(lhs.abs()) {
                    return Err(Error::InvalidComposition("operator is not homogeneous of degree 1".into()));
                }
            }
        }
        Ok(())
    }

    /// Pointwise value of `G` at `a` (one entry per component).
    pub fn eval(&self, a: &[f64], partitions: &[f64]) -> f64 {
        match self {
            Composition::Leaf(i) => a[*i],
            Composition::Linear { weights, leaves } => {
                weights.iter().zip(leaves).map(|(w, &i)| w * partitions[i] * a[i]).sum()
            }
            Composition::Sharpened { beta, weights, leaves } => {
                if *beta == 1.0 {
                    return weights.iter().zip(leaves).map(|(w, &i)| w * partitions[i] * a[i]).sum();
                }
                let inv = 1.0 / beta;
                let inner: f64 = weights
                    .iter()
                    .zip(leaves)
                    .map(|(w, &i)| w * math::powf(partitions[i] * a[i], inv))
                    .sum();
                math::powf(inner, *beta)
            }
            Composition::HarmonicMean(l, r) => {
                let (u, v) = (l.eval(a, partitions), r.eval(a, partitions));
                if u + v == 0.0 {
                    0.0
                } else {
                    u * v / (u + v)
                }
            }
            Composition::Contrast(l, r) => {
                let (u, v) = (l.eval(a, partitions), r.eval(a, partitions));
                if u + v == 0.0 {
                    0.0
                } else {
                    u * u / (u + v)
                }
            }
        }
    }
}

/// `G(a)` with the partition functions used by linear and sharpened nodes.
pub fn eval_g(spec: &Composition, a: &[f64], partitions: &[f64]) -> f64 {
    spec.eval(a, partitions)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MixMode {
    /// Weight each component by its reaching probability `u_i(s)`.
    #[default]
    Reaching,
    /// Baseline: every `u_i(s)` replaced by one.
    Ensemble,
}

/// Forward policy mixing `components` through `spec`.
#[derive(Clone, Debug)]
pub struct MixingPolicy<'a> {
    spec: &'a Composition,
    components: &'a [ComponentModel],
    partitions: Vec<f64>,
    mode: MixMode,
}

impl<'a> MixingPolicy<'a> {
    pub fn new(spec: &'a Composition, components: &'a [ComponentModel], mode: MixMode) -> Result<Self> {
        let partitions: Vec<f64> = components.iter().map(|c| c.partition).collect();
        spec.validate(&partitions)?;
        Ok(Self { spec, components, partitions, mode })
    }

    pub fn spec(&self) -> &Composition {
        self.spec
    }

    pub fn partitions(&self) -> &[f64] {
        &self.partitions
    }

    fn component_weight(&self, i: usize, s: StateId) -> f64 {
        match self.mode {
            MixMode::Reaching => self.components[i].reach[s.0],
            MixMode::Ensemble => 1.0,
        }
    }

    fn rows(&self, s: StateId) -> Result<Vec<&TransitionDistribution>> {
        let rows: Vec<_> = self.components.iter().map(|c| c.forward.row(s)).collect();
        let first = rows[0];
        if rows
            .iter()
            .any(|r| r.probs.len() != first.probs.len() || r.terminate.is_some() != first.terminate.is_some())
        {
            return Err(Error::PolicyMismatch(s));
        }
        Ok(rows)
    }

    /// Per-action scores `G(u_i(s) p_i(a|s))` divided by `scale`.
    fn scores(&self, s: StateId, rows: &[&TransitionDistribution], scale: f64) -> Vec<f64> {
        let n = rows[0].num_actions();
        let mut args = vec![0.0; rows.len()];
        (0..n)
            .map(|a| {
                for (i, (arg, row)) in args.iter_mut().zip(rows).enumerate() {
                    *arg = self.component_weight(i, s) * row.action(a) / scale;
                }
                self.spec.eval(&args, &self.partitions)
            })
            .collect()
    }

    /// Unscaled scores; their sum is the local normalizer `N_M(s)`.
    pub fn raw_scores(&self, s: StateId) -> Result<Vec<f64>> {
        let rows = self.rows(s)?;
        Ok(self.scores(s, &rows, 1.0))
    }

    pub fn local_normalizer(&self, s: StateId) -> Result<f64> {
        Ok(self.raw_scores(s)?.iter().sum())
    }

    /// The mixed transition distribution at `s`.
    ///
    /// Scores are computed after dividing every argument by the largest one,
    /// which leaves the normalized result unchanged and avoids underflow for
    /// sharpened operators.
    pub fn mixing_transition(&self, s: StateId) -> Result<TransitionDistribution> {
        let rows = self.rows(s)?;
        let scale = rows
            .iter()
            .enumerate()
            .flat_map(|(i, r)| {
                let w = self.component_weight(i, s);
                r.actions().map(move |p| w * p)
            })
            .fold(0.0, f64::max);
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::DeadState(s));
        }
        let mut scores = self.scores(s, &rows, scale);
        let norm: f64 = scores.iter().sum();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::DeadState(s));
        }
        for w in &mut scores {
            *w /= norm;
        }
        let terminate = rows[0].terminate.is_some().then(|| scores.pop().unwrap());
        Ok(TransitionDistribution::new(scores, terminate))
    }
}

impl Policy for MixingPolicy<'_> {
    fn transition(&self, s: StateId) -> Result<TransitionDistribution> {
        self.mixing_transition(s)
    }
}

pub fn mixing_policy<'a>(spec: &'a Composition, components: &'a [ComponentModel]) -> Result<MixingPolicy<'a>> {
    MixingPolicy::new(spec, components, MixMode::Reaching)
}

pub fn ensemble_policy<'a>(spec: &'a Composition, components: &'a [ComponentModel]) -> Result<MixingPolicy<'a>> {
    MixingPolicy::new(spec, components, MixMode::Ensemble)
}

/// Unnormalized target `G(p_1(x), ..., p_k(x))` per state.
pub fn composition_values(spec: &Composition, components: &[ComponentModel]) -> Result<Vec<f64>> {
    let partitions: Vec<f64> = components.iter().map(|c| c.partition).collect();
    spec.validate(&partitions)?;
    let n = components.iter().map(|c| c.terminal.len()).max().unwrap_or(0);
    let mut args = vec![0.0; components.len()];
    Ok((0..n)
        .map(|x| {
            for (arg, c) in args.iter_mut().zip(components) {
                *arg = c.terminal.get(StateId(x));
            }
            spec.eval(&args, &partitions)
        })
        .collect())
}

/// Target distribution `p*(x) ∝ G(p_1(x), ..., p_k(x))`.
pub fn target_distribution(spec: &Composition, components: &[ComponentModel], env: &EnvGraph) -> Result<TerminalDistribution> {
    let mut values = composition_values(spec, components)?;
    values.resize(env.num_states(), 0.0);
    for s in env.states().filter(|&s| !env.is_terminating(s)) {
        values[s.0] = 0.0;
    }
    TerminalDistribution::normalized(values).ok_or(Error::ZeroMass)
}
