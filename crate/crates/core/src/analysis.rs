//! Evaluation quantities: L1 error, distortion factors, the L1 decomposition
//! identity, preference lattices and preference sweeps.

use alloc::vec;
use alloc::vec::Vec;

use crate::compose::{composition_values, Composition, MixMode, MixingPolicy};
use crate::dag::{reach_and_terminal, EnvGraph, StateId, TerminalDistribution};
use crate::flows::ComponentModel;
use crate::{Error, Result};

/// `sum_x |p(x) - q(x)|`. Missing entries count as zero.
pub fn l1_error(p: &TerminalDistribution, q: &TerminalDistribution) -> f64 {
    let (p, q) = (p.as_slice(), q.as_slice());
    (0..p.len().max(q.len()))
        .map(|i| (p.get(i).copied().unwrap_or(0.0) - q.get(i).copied().unwrap_or(0.0)).abs())
        .sum()
}

/// Quantile by linear interpolation between order statistics (the inclusive
/// convention): position `q (n - 1)` in the sorted sample.
pub fn quantile_inclusive(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q * (n - 1) as f64;
            let lo = pos as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = pos - lo as f64;
            sorted[lo] + frac * (sorted[hi] - sorted[lo])
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistortionProfile {
    /// Terminating states, in index order.
    pub states: Vec<StateId>,
    /// `u_M(x) / N_M(x)`
    pub delta: Vec<f64>,
    /// Unnormalized target `G(p_1(x), ..., p_k(x))`.
    pub gval: Vec<f64>,
    pub outlier: Vec<bool>,
    /// Mixed reaching probability `u_M(x)`.
    pub reach: Vec<f64>,
    pub z_mix: f64,
    pub inv_z_mix: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
}

impl DistortionProfile {
    pub fn num_outliers(&self) -> usize {
        self.outlier.iter().filter(|&&o| o).count()
    }

    /// `max_x |delta(x) Z_M - 1|`
    pub fn max_constancy_deviation(&self) -> f64 {
        self.delta.iter().map(|d| (d * self.z_mix - 1.0).abs()).fold(0.0, f64::max)
    }

    /// Per-state terms of `sum_x |delta(x) - 1/Z_M| gval(x)`.
    pub fn error_terms(&self) -> Vec<f64> {
        self.delta.iter().zip(&self.gval).map(|(d, g)| (d - self.inv_z_mix).abs() * g).collect()
    }

    pub fn decomposed_l1(&self) -> f64 {
        self.error_terms().iter().sum()
    }
}

pub fn distortion_profile(env: &EnvGraph, components: &[ComponentModel], spec: &Composition) -> Result<DistortionProfile> {
    let mix = MixingPolicy::new(spec, components, MixMode::Reaching)?;
    profile_with(env, components, &mix).map(|(profile, _)| profile)
}

fn profile_with(
    env: &EnvGraph,
    components: &[ComponentModel],
    mix: &MixingPolicy<'_>,
) -> Result<(DistortionProfile, TerminalDistribution)> {
    let (reach, induced) = reach_and_terminal(env, mix)?;
    let all_gval = composition_values(mix.spec(), components)?;
    let states: Vec<StateId> = env.terminating_states().collect();
    let mut delta = Vec::with_capacity(states.len());
    let mut gval = Vec::with_capacity(states.len());
    let mut reach_x = Vec::with_capacity(states.len());
    for &x in &states {
        let n = mix.local_normalizer(x)?;
        delta.push(if n > 0.0 { reach[x.0] / n } else { 0.0 });
        gval.push(all_gval.get(x.0).copied().unwrap_or(0.0));
        reach_x.push(reach[x.0]);
    }
    let z_mix: f64 = gval.iter().sum();
    if !(z_mix > 0.0) {
        return Err(Error::ZeroMass);
    }
    let mut sorted = delta.clone();
    sorted.sort_by(f64::total_cmp);
    let (q1, q3) = (quantile_inclusive(&sorted, 0.25), quantile_inclusive(&sorted, 0.75));
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let outlier = delta.iter().map(|&d| d < lo || d > hi).collect();
    let profile = DistortionProfile {
        states,
        delta,
        gval,
        outlier,
        reach: reach_x,
        z_mix,
        inv_z_mix: 1.0 / z_mix,
        q1,
        q3,
        iqr,
    };
    Ok((profile, induced))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecompositionCheck {
    /// `L1(p_M, p*_M)` from the induced distribution.
    pub lhs: f64,
    /// `sum_x |delta(x) - 1/Z_M| gval(x)`
    pub rhs: f64,
    pub residual: f64,
}

pub fn l1_decomposition_check(env: &EnvGraph, components: &[ComponentModel], spec: &Composition) -> Result<DecompositionCheck> {
    let mix = MixingPolicy::new(spec, components, MixMode::Reaching)?;
    let (profile, induced) = profile_with(env, components, &mix)?;
    let mut target = vec![0.0; env.num_states()];
    for (x, g) in profile.states.iter().zip(&profile.gval) {
        target[x.0] = g / profile.z_mix;
    }
    let lhs = l1_error(&induced, &TerminalDistribution::from_mass(target));
    let rhs = profile.decomposed_l1();
    Ok(DecompositionCheck { lhs, rhs, residual: (lhs - rhs).abs() })
}

/// Where the distortion error sits relative to the composition value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Localization {
    /// Share of the decomposed L1 carried by the top states by `gval`.
    pub error_share: f64,
    /// Share of `Z_M` carried by the same states.
    pub gval_share: f64,
    /// `error_share / gval_share`; below one means errors sit in low-value regions.
    pub ratio: f64,
}

/// Diagnostic over the top `fraction` of terminating states ranked by `gval`.
pub fn localization(profile: &DistortionProfile, fraction: f64) -> Localization {
    let mut order: Vec<usize> = (0..profile.gval.len()).collect();
    order.sort_by(|&a, &b| profile.gval[b].total_cmp(&profile.gval[a]).then(a.cmp(&b)));
    let top = (libm::ceil(order.len() as f64 * fraction) as usize).clamp(1, order.len().max(1));
    let terms = profile.error_terms();
    let total_err: f64 = terms.iter().sum();
    let top_err: f64 = order.iter().take(top).map(|&i| terms[i]).sum();
    let top_g: f64 = order.iter().take(top).map(|&i| profile.gval[i]).sum();
    let error_share = if total_err > 0.0 { top_err / total_err } else { 0.0 };
    let gval_share = top_g / profile.z_mix;
    Localization { error_share, gval_share, ratio: error_share / gval_share }
}

fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k.min(n));
    (0..k).fold(1usize, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// Evenly spaced preference vectors on the `k`-simplex.
///
/// For two objectives the points are `(i/(n-1), 1 - i/(n-1))`. For more, the
/// smallest lattice `{m_i / m}` with at least `n` points is enumerated in
/// lexicographic order of `(m_1, m_2, ...)` and truncated to `n`.
pub fn simplex_grid(k: usize, n: usize) -> Result<Vec<Vec<f64>>> {
    if k < 2 || n == 0 {
        return Err(Error::InvalidConfig(alloc::format!("simplex grid needs k >= 2 and n >= 1, got k={k}, n={n}")));
    }
    if n == 1 {
        return Ok(vec![vec![1.0 / k as f64; k]]);
    }
    if k == 2 {
        let d = (n - 1) as f64;
        return Ok((0..n).map(|i| vec![i as f64 / d, 1.0 - i as f64 / d]).collect());
    }
    let mut m = 1;
    while binomial(m + k - 1, k - 1) < n {
        m += 1;
    }
    let mut out = Vec::with_capacity(n);
    let mut parts = vec![0usize; k];
    lattice(&mut parts, 0, m, m, n, &mut out);
    Ok(out)
}

fn lattice(parts: &mut [usize], i: usize, left: usize, m: usize, n: usize, out: &mut Vec<Vec<f64>>) {
    if out.len() == n {
        return;
    }
    if i == parts.len() - 1 {
        parts[i] = left;
        out.push(parts.iter().map(|&p| p as f64 / m as f64).collect());
        return;
    }
    for v in 0..=left {
        parts[i] = v;
        lattice(parts, i + 1, left - v, m, n, out);
        if out.len() == n {
            return;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub preferences: Vec<Vec<f64>>,
    /// `None` where the mixing policy hit a dead state.
    pub l1: Vec<Option<f64>>,
    /// Mean over the preferences that evaluated.
    pub mean: f64,
}

impl SweepResult {
    pub fn dead(&self) -> impl Iterator<Item = usize> + '_ {
        self.l1.iter().enumerate().filter(|(_, v)| v.is_none()).map(|(i, _)| i)
    }
}

/// L1 of the linear mixture against its target for every point of
/// `simplex_grid(components.len(), n)`.
pub fn preference_sweep(env: &EnvGraph, components: &[ComponentModel], n: usize, mode: MixMode) -> Result<SweepResult> {
    let preferences = simplex_grid(components.len(), n)?;
    let mut l1 = Vec::with_capacity(preferences.len());
    for w in &preferences {
        let spec = Composition::linear(w.clone());
        let target = crate::compose::target_distribution(&spec, components, env)?;
        let mix = MixingPolicy::new(&spec, components, mode)?;
        match reach_and_terminal(env, &mix) {
            Ok((_, induced)) => l1.push(Some(l1_error(&induced, &target))),
            Err(Error::DeadState(_)) => l1.push(None),
            Err(e) => return Err(e),
        }
    }
    let ok: Vec<f64> = l1.iter().flatten().copied().collect();
    let mean = if ok.is_empty() { f64::NAN } else { ok.iter().sum::<f64>() / ok.len() as f64 };
    Ok(SweepResult { preferences, l1, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compose::Composition as C;
    use crate::flows::{as_component, solve_exact_flows, BackwardMode};
    use crate::grid::{build_grid, eval_reward_field, GridSpec, RewardName, RewardSpec};
    use proptest::prelude::*;

    fn exact(env: &EnvGraph, g: GridSpec, name: RewardName) -> ComponentModel {
        let f = eval_reward_field(&RewardSpec::new(name), g).unwrap();
        as_component(&solve_exact_flows(env, &f.values, BackwardMode::Uniform).unwrap())
    }

    fn dist(v: &[f64]) -> TerminalDistribution {
        TerminalDistribution::normalized(v.to_vec()).unwrap()
    }

    #[test]
    fn l1_examples() {
        let p = dist(&[0.2, 0.3, 0.5]);
        assert_eq!(l1_error(&p, &p), 0.0);
        let a = TerminalDistribution::point(4, StateId(0));
        let b = TerminalDistribution::point(4, StateId(3));
        assert_eq!(l1_error(&a, &b), 2.0);
        assert_eq!(l1_error(&TerminalDistribution::from_mass(vec![1.0]), &b), 2.0);
    }

    proptest! {
        #[test]
        fn l1_is_a_metric(a in proptest::collection::vec(0.01f64..1.0, 6), b in proptest::collection::vec(0.01f64..1.0, 6), c in proptest::collection::vec(0.01f64..1.0, 6)) {
            let (p, q, r) = (dist(&a), dist(&b), dist(&c));
            prop_assert_eq!(l1_error(&p, &q), l1_error(&q, &p));
            prop_assert_eq!(l1_error(&p, &p), 0.0);
            prop_assert!(l1_error(&p, &r) <= l1_error(&p, &q) + l1_error(&q, &r) + 1e-15);
            prop_assert!(l1_error(&p, &q) <= 2.0 + 1e-15);
        }

        #[test]
        fn simplex_points_sum_to_one(k in 2usize..6, n in 1usize..200) {
            let grid = simplex_grid(k, n).unwrap();
            prop_assert_eq!(grid.len(), n);
            for w in &grid {
                prop_assert_eq!(w.len(), k);
                prop_assert!(w.iter().all(|&x| x >= 0.0));
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn simplex_examples() {
        assert_eq!(simplex_grid(2, 3).unwrap(), vec![vec![0.0, 1.0], vec![0.5, 0.5], vec![1.0, 0.0]]);
        assert_eq!(binomial(17, 2), 136);
        assert_eq!(binomial(16, 2), 120);
        let g = simplex_grid(3, 128).unwrap();
        assert_eq!(g.len(), 128);
        // m = 15 lattice, first entries in lexicographic order.
        assert_eq!(g[0], vec![0.0, 0.0, 1.0]);
        assert_eq!(g[1], vec![0.0, 1.0 / 15.0, 14.0 / 15.0]);
        assert_eq!(g[16], vec![1.0 / 15.0, 0.0, 14.0 / 15.0]);
        assert!(simplex_grid(1, 3).is_err());
        assert!(simplex_grid(2, 0).is_err());
    }

    #[test]
    fn quantiles() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_inclusive(&s, 0.25), 1.75);
        assert_eq!(quantile_inclusive(&s, 0.75), 3.25);
        assert_eq!(quantile_inclusive(&s, 0.5), 2.5);
        assert_eq!(quantile_inclusive(&[7.0], 0.3), 7.0);
    }

    #[test]
    fn linear_distortion_is_constant() {
        let g = GridSpec::new(16, 16).unwrap();
        let env = build_grid(g);
        let comps = [exact(&env, g, RewardName::Shubert), exact(&env, g, RewardName::Diagonal)];
        let prof = distortion_profile(&env, &comps, &C::linear(vec![0.4, 0.6])).unwrap();
        assert!(prof.max_constancy_deviation() < 1e-8);
        let check = l1_decomposition_check(&env, &comps, &C::linear(vec![0.4, 0.6])).unwrap();
        assert!(check.lhs < 1e-8 && check.rhs < 1e-8 && check.residual < 1e-10);
    }

    #[test]
    fn identity_spec_has_unit_delta() {
        let g = GridSpec::new(6, 5).unwrap();
        let env = build_grid(g);
        let comps = [exact(&env, g, RewardName::Branin)];
        let prof = distortion_profile(&env, &comps, &C::Leaf(0)).unwrap();
        assert!((prof.z_mix - 1.0).abs() < 1e-12);
        assert!(prof.delta.iter().all(|d| (d - 1.0).abs() < 1e-10));
    }

    #[test]
    fn decomposition_identity_for_nonlinear_operators() {
        let g = GridSpec::new(16, 16).unwrap();
        let env = build_grid(g);
        let comps = [exact(&env, g, RewardName::Circle1), exact(&env, g, RewardName::Circle2)];
        for spec in [
            C::harmonic(C::Leaf(0), C::Leaf(1)),
            C::contrast(C::Leaf(1), C::Leaf(0)),
            C::sharpened(4.0, vec![0.5, 0.5]),
        ] {
            let check = l1_decomposition_check(&env, &comps, &spec).unwrap();
            assert!(check.residual < 1e-10, "{check:?}");
            assert!(check.lhs > 1e-4);
        }
        let prof = distortion_profile(&env, &comps, &C::harmonic(C::Leaf(0), C::Leaf(1))).unwrap();
        assert!(prof.max_constancy_deviation() > 1e-3);
        let loc = localization(&prof, 0.1);
        assert!(loc.gval_share > 0.0 && loc.error_share >= 0.0);
    }

    #[test]
    fn exact_sweep_is_exact() {
        let g = GridSpec::new(10, 10).unwrap();
        let env = build_grid(g);
        let comps = [
            exact(&env, g, RewardName::Shubert),
            exact(&env, g, RewardName::Diagonal),
            exact(&env, g, RewardName::Currin),
        ];
        let res = preference_sweep(&env, &comps, 20, MixMode::Reaching).unwrap();
        assert_eq!(res.l1.len(), 20);
        assert!(res.mean < 1e-8);
        assert_eq!(res.dead().count(), 0);
        let ens = preference_sweep(&env, &comps[..2], 9, MixMode::Ensemble).unwrap();
        assert!(ens.mean > 1e-3);
    }
}
