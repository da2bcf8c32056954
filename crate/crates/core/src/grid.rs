//! The 2D grid environment and its benchmark reward fields.
//!
//! Cells are states, indexed row-major, starting at `(0, 0)`. Every cell can
//! terminate; the only moves are one step right or one step down.
//!
//! Rewards are evaluated at normalized coordinates `t = (r / (H-1), c / (W-1))`
//! (zero on a degenerate axis), mapped into each benchmark's usual domain,
//! sign-flipped for minimization benchmarks and min-max normalized to `[0, 1]`.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;

use crate::dag::{EnvGraph, StateId};
use crate::math;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
}

impl GridSpec {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidGrid { height, width });
        }
        Ok(Self { height, width })
    }

    pub fn num_cells(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn cell(&self, row: usize, col: usize) -> StateId {
        debug_assert!(row < self.height && col < self.width);
        StateId(row * self.width + col)
    }

    #[inline]
    pub fn coords(&self, s: StateId) -> (usize, usize) {
        (s.0 / self.width, s.0 % self.width)
    }

    /// Normalized `(row, col)` coordinates in `[0, 1]^2`.
    pub fn unit_coords(&self, s: StateId) -> (f64, f64) {
        let (r, c) = self.coords(s);
        (unit(r, self.height), unit(c, self.width))
    }

    /// Input width of the K-hot encoding.
    pub fn feature_dim(&self) -> usize {
        self.height + self.width
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

fn unit(i: usize, n: usize) -> f64 {
    if n > 1 {
        i as f64 / (n - 1) as f64
    } else {
        0.0
    }
}

/// Builds the grid DAG. Children of `(r, c)` are `(r, c+1)` then `(r+1, c)`.
pub fn build_grid(spec: GridSpec) -> EnvGraph {
    let children = (0..spec.num_cells())
        .map(|i| {
            let (r, c) = spec.coords(StateId(i));
            let mut kids = Vec::with_capacity(2);
            if c + 1 < spec.width {
                kids.push(spec.cell(r, c + 1));
            }
            if r + 1 < spec.height {
                kids.push(spec.cell(r + 1, c));
            }
            kids
        })
        .collect();
    EnvGraph::new(StateId(0), children, vec![true; spec.num_cells()]).expect("grid adjacency is in range")
}

/// Concatenated one-hot row and column indicators.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

pub fn khot_encode(spec: GridSpec, s: StateId) -> FeatureVector {
    let mut v = vec![0.0; spec.feature_dim()];
    for i in khot_indices(spec, s) {
        v[i] = 1.0;
    }
    FeatureVector(v)
}

/// Positions of the two ones in [`khot_encode`].
#[inline]
pub fn khot_indices(spec: GridSpec, s: StateId) -> [usize; 2] {
    let (r, c) = spec.coords(s);
    [r, spec.height + c]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RewardName {
    Shubert,
    Diagonal,
    Currin,
    Sphere,
    Branin,
    Circle1,
    Circle2,
    Circle3,
}

impl RewardName {
    pub const ALL: [RewardName; 8] = [
        RewardName::Shubert,
        RewardName::Diagonal,
        RewardName::Currin,
        RewardName::Sphere,
        RewardName::Branin,
        RewardName::Circle1,
        RewardName::Circle2,
        RewardName::Circle3,
    ];

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str() == name)
            .ok_or_else(|| Error::UnknownReward(name.to_string()))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RewardName::Shubert => "shubert",
            RewardName::Diagonal => "diagonal",
            RewardName::Currin => "currin",
            RewardName::Sphere => "sphere",
            RewardName::Branin => "branin",
            RewardName::Circle1 => "circle1",
            RewardName::Circle2 => "circle2",
            RewardName::Circle3 => "circle3",
        }
    }

    /// Every parameter the reward accepts, with its default.
    pub fn default_params(self) -> BTreeMap<String, f64> {
        let own: &[(&str, f64)] = match self {
            RewardName::Shubert => &[("lo", -2.0), ("hi", 2.0)],
            RewardName::Diagonal => &[("k", 10.0)],
            RewardName::Currin | RewardName::Branin => &[],
            RewardName::Sphere => &[("cr", 0.5), ("cc", 0.5)],
            RewardName::Circle1 => &CIRCLE1,
            RewardName::Circle2 => &CIRCLE2,
            RewardName::Circle3 => &CIRCLE3,
        };
        own.iter().chain(&[("beta", 1.0)]).map(|&(k, v)| (k.to_string(), v)).collect()
    }
}

const CIRCLE1: [(&str, f64); 5] = [("cr", 0.35), ("cc", 0.35), ("sigma", 0.2), ("radius", 0.6), ("background", 0.1)];
const CIRCLE2: [(&str, f64); 5] = [("cr", 0.65), ("cc", 0.45), ("sigma", 0.2), ("radius", 0.6), ("background", 0.1)];
const CIRCLE3: [(&str, f64); 5] = [("cr", 0.5), ("cc", 0.75), ("sigma", 0.2), ("radius", 0.6), ("background", 0.1)];

impl fmt::Display for RewardName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A named reward with parameter overrides. Missing parameters take defaults.
///
/// Every reward accepts `beta`: the normalized field is raised to that power,
/// which is how reward-sharpened components are described.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardSpec {
    pub name: RewardName,
    pub params: BTreeMap<String, f64>,
}

impl RewardSpec {
    pub fn new(name: RewardName) -> Self {
        Self { name, params: BTreeMap::new() }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    /// Defaults overlaid with the overrides; rejects unknown keys.
    pub fn resolved_params(&self) -> Result<BTreeMap<String, f64>> {
        let mut all = self.name.default_params();
        for (k, &v) in &self.params {
            let slot = all.get_mut(k).ok_or_else(|| Error::UnknownRewardParam {
                reward: self.name.as_str().to_string(),
                param: k.clone(),
            })?;
            if !v.is_finite() {
                return Err(Error::InvalidRewardParam(k.clone()));
            }
            *slot = v;
        }
        Ok(all)
    }
}

/// Reward per cell, in `[0, 1]` with at least one positive value.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardField {
    pub name: String,
    pub params: BTreeMap<String, f64>,
    pub values: Vec<f64>,
}

impl RewardField {
    pub fn get(&self, s: StateId) -> f64 {
        self.values[s.0]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// `R^beta`, for components trained on a sharpened reward.
    pub fn sharpened(&self, beta: f64) -> RewardField {
        let mut params = self.params.clone();
        let prev = params.get("beta").copied().unwrap_or(1.0);
        params.insert("beta".to_string(), prev * beta);
        RewardField {
            name: self.name.clone(),
            params,
            values: self.values.iter().map(|&v| sharpen(v, beta)).collect(),
        }
    }
}

fn sharpen(v: f64, beta: f64) -> f64 {
    if beta == 1.0 {
        v
    } else {
        math::powf(v, beta)
    }
}

/// Min-max normalization `(x - min) / (max - min)`.
pub fn normalize_field(raw: &[f64]) -> Result<RewardField> {
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if raw.iter().any(|v| !v.is_finite()) || !(hi > lo) {
        return Err(Error::DegenerateField);
    }
    let span = hi - lo;
    Ok(RewardField {
        name: "custom".to_string(),
        params: BTreeMap::new(),
        values: raw.iter().map(|&v| (v - lo) / span).collect(),
    })
}

/// Evaluates, normalizes and (for `beta != 1`) sharpens a named reward.
pub fn eval_reward_field(reward: &RewardSpec, spec: GridSpec) -> Result<RewardField> {
    let params = reward.resolved_params()?;
    let beta = params["beta"];
    if !(beta > 0.0) {
        return Err(Error::InvalidRewardParam("beta".to_string()));
    }
    let raw = raw_reward_values(reward.name, &params, spec)?;
    // A single cell has no range to normalize over; it gets the top value.
    let mut field = if raw.len() == 1 && raw[0].is_finite() {
        RewardField { name: String::new(), params: BTreeMap::new(), values: vec![1.0] }
    } else {
        normalize_field(&raw)?
    };
    for v in &mut field.values {
        *v = sharpen(*v, beta);
    }
    field.name = reward.name.as_str().to_string();
    field.params = params;
    Ok(field)
}

/// Field values before normalization. `params` must be fully resolved.
pub fn raw_reward_values(name: RewardName, params: &BTreeMap<String, f64>, spec: GridSpec) -> Result<Vec<f64>> {
    let p = |k: &str| {
        params
            .get(k)
            .copied()
            .ok_or_else(|| Error::InvalidRewardParam(k.to_string()))
    };
    let f: &dyn Fn(f64, f64) -> f64 = match name {
        RewardName::Shubert => {
            let (lo, hi) = (p("lo")?, p("hi")?);
            &move |tr, tc| -(shubert_1d(lo + (hi - lo) * tc) * shubert_1d(lo + (hi - lo) * tr))
        }
        RewardName::Diagonal => {
            let k = p("k")?;
            &move |tr, tc| 1.0 / (1.0 + math::exp(-k * (tr + tc - 1.0)))
        }
        RewardName::Currin => &|tr, tc| currin(tc, tr),
        RewardName::Sphere => {
            let (cr, cc) = (p("cr")?, p("cc")?);
            &move |tr, tc| -((tr - cr) * (tr - cr) + (tc - cc) * (tc - cc))
        }
        RewardName::Branin => &|tr, tc| -branin(-5.0 + 15.0 * tc, 15.0 * tr),
        RewardName::Circle1 | RewardName::Circle2 | RewardName::Circle3 => {
            let (cr, cc, sigma, radius, background) =
                (p("cr")?, p("cc")?, p("sigma")?, p("radius")?, p("background")?);
            if !(sigma > 0.0) {
                return Err(Error::InvalidRewardParam("sigma".to_string()));
            }
            &move |tr, tc| {
                let d2 = (tr - cr) * (tr - cr) + (tc - cc) * (tc - cc);
                if d2 <= radius * radius {
                    math::exp(-d2 / (2.0 * sigma * sigma)) / (2.0 * PI * sigma * sigma)
                } else {
                    background
                }
            }
        }
    };
    Ok((0..spec.num_cells())
        .map(|i| {
            let (tr, tc) = spec.unit_coords(StateId(i));
            f(tr, tc)
        })
        .collect())
}

fn shubert_1d(x: f64) -> f64 {
    (1..=5).map(|j| j as f64 * math::cos((j + 1) as f64 * x + j as f64)).sum()
}

fn currin(x1: f64, x2: f64) -> f64 {
    let factor = 1.0 - math::exp(-1.0 / (2.0 * x2));
    let num = 2300.0 * x1 * x1 * x1 + 1900.0 * x1 * x1 + 2092.0 * x1 + 60.0;
    let den = 100.0 * x1 * x1 * x1 + 500.0 * x1 * x1 + 4.0 * x1 + 20.0;
    factor * num / den
}

fn branin(x1: f64, x2: f64) -> f64 {
    let b = 5.1 / (4.0 * PI * PI);
    let c = 5.0 / PI;
    let t = 1.0 / (8.0 * PI);
    let a = x2 - b * x1 * x1 + c * x1 - 6.0;
    a * a + 10.0 * (1.0 - t) * math::cos(x1) + 10.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::validate_env;

    #[test]
    fn grid_sizes() {
        let one = build_grid(GridSpec::new(1, 1).unwrap());
        assert_eq!((one.num_states(), one.num_edges()), (1, 0));
        assert!(one.is_terminating(StateId(0)));
        let two = build_grid(GridSpec::new(2, 2).unwrap());
        assert_eq!((two.num_states(), two.num_edges()), (4, 4));
        let big = build_grid(GridSpec::new(32, 32).unwrap());
        assert_eq!((big.num_states(), big.num_edges()), (1024, 2 * 32 * 32 - 32 - 32));
        assert_eq!(GridSpec::new(0, 3), Err(Error::InvalidGrid { height: 0, width: 3 }));
    }

    #[test]
    fn grids_validate() {
        for h in 1..=64 {
            for w in [1, 2, 7, h, 64] {
                assert!(validate_env(&build_grid(GridSpec::new(h, w).unwrap())).is_valid());
            }
        }
    }

    #[test]
    fn khot_examples() {
        let g = GridSpec::new(2, 2).unwrap();
        assert_eq!(khot_encode(g, g.cell(0, 0)).0, vec![1.0, 0.0, 1.0, 0.0]);
        assert_eq!(khot_encode(g, g.cell(1, 0)).0, vec![0.0, 1.0, 1.0, 0.0]);
        let g = GridSpec::new(32, 32).unwrap();
        let mut seen = alloc::collections::BTreeSet::new();
        for i in 0..g.num_cells() {
            let v = khot_encode(g, StateId(i)).0;
            assert_eq!(v.len(), 64);
            assert_eq!(v.iter().filter(|&&x| x == 1.0).count(), 2);
            assert_eq!(v.iter().filter(|&&x| x == 0.0).count(), 62);
            assert!(seen.insert(khot_indices(g, StateId(i))));
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_field(&[2.0, 4.0, 2.0]).unwrap().values, vec![0.0, 1.0, 0.0]);
        let unit = [0.0, 0.25, 1.0, 0.5];
        assert_eq!(normalize_field(&unit).unwrap().values, unit.to_vec());
        assert_eq!(normalize_field(&[3.0; 5]), Err(Error::DegenerateField));
    }

    #[test]
    fn single_cell_field_is_one() {
        let g = GridSpec::new(1, 1).unwrap();
        for name in RewardName::ALL {
            assert_eq!(eval_reward_field(&RewardSpec::new(name), g).unwrap().values, vec![1.0]);
        }
    }

    #[test]
    fn every_field_spans_unit_interval() {
        let g = GridSpec::new(32, 32).unwrap();
        for name in RewardName::ALL {
            let f = eval_reward_field(&RewardSpec::new(name), g).unwrap();
            let lo = f.values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = f.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!((lo, hi), (0.0, 1.0), "{name}");
            assert_eq!(f.name, name.as_str());
        }
    }

    #[test]
    fn diagonal_increases_along_main_diagonal() {
        let g = GridSpec::new(32, 32).unwrap();
        let f = eval_reward_field(&RewardSpec::new(RewardName::Diagonal), g).unwrap();
        for i in 0..31 {
            assert!(f.get(g.cell(i, i)) < f.get(g.cell(i + 1, i + 1)));
        }
    }

    #[test]
    fn circle_background_before_normalization() {
        let g = GridSpec::new(32, 32).unwrap();
        let params = RewardName::Circle1.default_params();
        let raw = raw_reward_values(RewardName::Circle1, &params, g).unwrap();
        // (31, 31) sits at distance ~0.92 from (0.35, 0.35).
        assert_eq!(raw[g.cell(31, 31).0], 0.1);
        assert!(raw[g.cell(11, 11).0] > 1.0);
    }

    #[test]
    fn reward_errors() {
        assert_eq!(RewardName::parse("rosenbrock"), Err(Error::UnknownReward("rosenbrock".into())));
        let bad = RewardSpec::new(RewardName::Diagonal).with("sigma", 1.0);
        assert!(matches!(bad.resolved_params(), Err(Error::UnknownRewardParam { .. })));
        let g = GridSpec::new(4, 4).unwrap();
        assert!(eval_reward_field(&RewardSpec::new(RewardName::Sphere).with("beta", 0.0), g).is_err());
    }

    #[test]
    fn beta_sharpens_after_normalization() {
        let g = GridSpec::new(8, 8).unwrap();
        let base = eval_reward_field(&RewardSpec::new(RewardName::Currin), g).unwrap();
        let sharp = eval_reward_field(&RewardSpec::new(RewardName::Currin).with("beta", 3.0), g).unwrap();
        for (a, b) in base.values.iter().zip(&sharp.values) {
            assert!((a * a * a - b).abs() < 1e-15);
        }
        assert_eq!(base.sharpened(3.0).values, sharp.values);
        assert_eq!(base.sharpened(3.0).params["beta"], 3.0);
    }

    #[test]
    fn single_row_grid_rewards() {
        let g = GridSpec::new(1, 5).unwrap();
        let f = eval_reward_field(&RewardSpec::new(RewardName::Branin), g).unwrap();
        assert_eq!(f.values.len(), 5);
    }
}
