//! Loading components and running evaluations; shared by every command.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use flowmix_core::analysis::{distortion_profile, l1_decomposition_check, l1_error, localization, preference_sweep};
use flowmix_core::compose::{composition_values, target_distribution, MixMode, MixingPolicy};
use flowmix_core::dag::{terminating_distribution, EnvGraph};
use flowmix_core::flows::ComponentModel;
use flowmix_core::grid::{build_grid, GridSpec, RewardName, RewardSpec};

use crate::error::{AppError, AppResult};
use crate::export;
use crate::grammar::{format_spec, ParsedSpec};
use crate::model::{ExactModel, ModelFile};

/// `HxW`, e.g. `32x32`.
pub fn parse_grid(text: &str) -> AppResult<GridSpec> {
    let bad = || AppError::Usage(format!("grid must look like 32x32, got `{text}`"));
    let (h, w) = text.split_once(['x', 'X']).ok_or_else(bad)?;
    let h = h.trim().parse().map_err(|_| bad())?;
    let w = w.trim().parse().map_err(|_| bad())?;
    Ok(GridSpec::new(h, w)?)
}

/// `NAME[:k=v,...]`, e.g. `circle1:sigma=0.3,beta=2`.
pub fn parse_reward(text: &str) -> AppResult<RewardSpec> {
    let (name, rest) = match text.split_once(':') {
        Some((n, r)) => (n, Some(r)),
        None => (text, None),
    };
    let mut spec = RewardSpec::new(RewardName::parse(name.trim())?);
    for kv in rest.into_iter().flat_map(|r| r.split(',')).filter(|s| !s.trim().is_empty()) {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| AppError::Usage(format!("reward parameter `{kv}` is not key=value")))?;
        let v: f64 = v.trim().parse().map_err(|_| AppError::Usage(format!("reward parameter `{kv}` is not a number")))?;
        spec = spec.with(k.trim(), v);
    }
    spec.resolved_params()?;
    Ok(spec)
}

#[derive(Clone, Debug)]
pub enum ComponentSource {
    /// Solved on the fly for the given reward.
    Exact(RewardSpec),
    File(PathBuf),
    Model(Box<ModelFile>),
}

/// `LABEL=PATH` or `LABEL=exact:REWARD[:k=v,...]`.
pub fn parse_component(text: &str) -> AppResult<(String, ComponentSource)> {
    let (label, src) = text
        .split_once('=')
        .ok_or_else(|| AppError::Usage(format!("component `{text}` must be LABEL=PATH or LABEL=exact:REWARD")))?;
    let label = label.trim();
    if label.is_empty() {
        return Err(AppError::Usage(format!("component `{text}` has an empty label")));
    }
    let source = match src.strip_prefix("exact:") {
        Some(reward) => ComponentSource::Exact(parse_reward(reward)?),
        None => ComponentSource::File(PathBuf::from(src)),
    };
    Ok((label.to_string(), source))
}

/// Components evaluated on one shared grid.
pub struct Loaded {
    pub grid: GridSpec,
    pub env: EnvGraph,
    pub labels: Vec<String>,
    pub components: Vec<ComponentModel>,
}

impl Loaded {
    /// Components in the order of `labels`.
    pub fn select(&self, labels: &[String]) -> AppResult<Vec<ComponentModel>> {
        labels
            .iter()
            .map(|l| {
                let i = self
                    .labels
                    .iter()
                    .position(|x| x == l)
                    .ok_or_else(|| AppError::Usage(format!("composition references unknown component `{l}`")))?;
                Ok(self.components[i].clone())
            })
            .collect()
    }
}

pub fn load_components(grid: Option<GridSpec>, defs: Vec<(String, ComponentSource)>) -> AppResult<Loaded> {
    let mut models = Vec::new();
    let mut labels = Vec::new();
    for (label, src) in defs {
        if labels.contains(&label) {
            return Err(AppError::Usage(format!("component label `{label}` used twice")));
        }
        let model = match src {
            ComponentSource::Exact(reward) => {
                let g = grid.ok_or_else(|| AppError::Usage(format!("component `{label}` is exact; pass --grid")))?;
                ModelFile::Exact(ExactModel::solve(g, reward)?)
            }
            ComponentSource::File(path) => ModelFile::load(&path)?,
            ComponentSource::Model(m) => *m,
        };
        labels.push(label);
        models.push(model);
    }
    let grid = match (grid, models.first()) {
        (Some(g), _) => g,
        (None, Some(m)) => m.grid(),
        (None, None) => return Err(AppError::Usage("no components given".into())),
    };
    for (l, m) in labels.iter().zip(&models) {
        if m.grid() != grid {
            return Err(AppError::Usage(format!("component `{l}` lives on grid {}, expected {grid}", m.grid())));
        }
    }
    let env = build_grid(grid);
    let components = models.iter().map(|m| m.component(&env)).collect::<AppResult<_>>()?;
    Ok(Loaded { grid, env, labels, components })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EvalKind {
    L1,
    Sweep,
    Distortion,
    Decomp,
}

pub struct EvalRequest<'a> {
    pub spec: Option<&'a ParsedSpec>,
    pub evals: &'a [EvalKind],
    pub n_prefs: usize,
    pub mode: MixMode,
}

fn mode_name(mode: MixMode) -> &'static str {
    match mode {
        MixMode::Reaching => "reaching",
        MixMode::Ensemble => "ensemble",
    }
}

/// Runs the requested evaluations, writing CSVs into `out`, and returns
/// the JSON fragment for the summary.
pub fn evaluate(loaded: &Loaded, req: &EvalRequest<'_>, out: &Path) -> AppResult<Value> {
    fs::create_dir_all(out).map_err(AppError::io(out))?;
    let grid = loaded.grid;
    let env = &loaded.env;
    let located = |e: flowmix_core::Error| AppError::from(e).locate(grid);
    let mut results = serde_json::Map::new();
    results.insert("mode".into(), json!(mode_name(req.mode)));
    let need_spec = || {
        req.spec.ok_or_else(|| AppError::Usage("this evaluation needs a composition spec (--spec)".into()))
    };
    for &eval in req.evals {
        match eval {
            EvalKind::L1 => {
                let spec = need_spec()?;
                let comps = loaded.select(&spec.labels)?;
                let target = target_distribution(&spec.composition, &comps, env)?;
                let mix = MixingPolicy::new(&spec.composition, &comps, req.mode)?;
                let induced = terminating_distribution(env, &mix).map_err(located)?;
                let z_mix: f64 = composition_values(&spec.composition, &comps)?.iter().sum();
                export::write_grid_csv(&out.join("induced.csv"), grid, induced.as_slice())?;
                export::write_grid_csv(&out.join("target.csv"), grid, target.as_slice())?;
                results.insert("l1".into(), json!({ "l1": l1_error(&induced, &target), "z_mix": z_mix }));
            }
            EvalKind::Sweep => {
                let labels = match req.spec {
                    Some(s) => s.labels.clone(),
                    None => loaded.labels.clone(),
                };
                let comps = loaded.select(&labels)?;
                let sweep = preference_sweep(env, &comps, req.n_prefs, req.mode)?;
                export::write_sweep_csv(&out.join("sweep.csv"), &sweep)?;
                let dead: Vec<usize> = sweep.dead().collect();
                if !dead.is_empty() {
                    eprintln!("warning: {} preference vectors hit a dead state and are excluded from the mean", dead.len());
                }
                results.insert(
                    "sweep".into(),
                    json!({
                        "components": labels,
                        "n_prefs": sweep.preferences.len(),
                        "mean_l1": sweep.mean,
                        "dead_preferences": dead,
                        "simplex": if labels.len() == 2 { "uniform" } else { "lattice-truncated" },
                    }),
                );
            }
            EvalKind::Distortion => {
                let spec = need_spec()?;
                let comps = loaded.select(&spec.labels)?;
                let prof = distortion_profile(env, &comps, &spec.composition).map_err(located)?;
                export::write_distortion_csv(&out.join("distortion.csv"), grid, &prof)?;
                let loc = localization(&prof, 0.1);
                results.insert(
                    "distortion".into(),
                    json!({
                        "z_mix": prof.z_mix,
                        "inv_z_mix": prof.inv_z_mix,
                        "q1": prof.q1,
                        "q3": prof.q3,
                        "iqr": prof.iqr,
                        "outliers": prof.num_outliers(),
                        "max_constancy_deviation": prof.max_constancy_deviation(),
                        "top10_error_share": loc.error_share,
                        "top10_gval_share": loc.gval_share,
                        "top10_ratio": loc.ratio,
                    }),
                );
            }
            EvalKind::Decomp => {
                let spec = need_spec()?;
                let comps = loaded.select(&spec.labels)?;
                let check = l1_decomposition_check(env, &comps, &spec.composition).map_err(located)?;
                export::write_decomposition_csv(&out.join("decomposition.csv"), &check)?;
                results.insert(
                    "decomposition".into(),
                    json!({ "lhs": check.lhs, "rhs": check.rhs, "residual": check.residual }),
                );
            }
        }
    }
    if let Some(spec) = req.spec {
        results.insert("spec".into(), json!(format_spec(&spec.composition, &spec.labels)));
    }
    Ok(Value::Object(results))
}

/// Experiment file accepted by `flowmix run`.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: crate::model::GridDoc,
    /// Reward definitions by label.
    #[serde(default)]
    pub rewards: BTreeMap<String, crate::model::RewardDoc>,
    pub components: BTreeMap<String, ComponentDef>,
    #[serde(default)]
    pub composition: Option<String>,
    #[serde(default = "default_evals")]
    pub eval: Vec<EvalKind>,
    #[serde(default = "default_n_prefs")]
    pub n_prefs: usize,
    #[serde(default)]
    pub ensemble: bool,
    pub out: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_evals() -> Vec<EvalKind> {
    vec![EvalKind::L1]
}

fn default_n_prefs() -> usize {
    128
}

#[derive(Clone, Debug, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum ComponentDef {
    /// Reward label (or `NAME[:k=v,...]` text) solved exactly.
    Exact(String),
    Checkpoint(PathBuf),
    Train(TrainDef),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainDef {
    pub reward: String,
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub hidden_units: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> AppResult<Self> {
        let text = fs::read_to_string(path).map_err(AppError::io(path))?;
        serde_json::from_str(&text).map_err(|e| AppError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn reward(&self, key: &str) -> AppResult<RewardSpec> {
        match self.rewards.get(key) {
            Some(doc) => doc.spec(),
            None => parse_reward(key),
        }
    }

    pub fn check_labels(&self, spec: &ParsedSpec) -> AppResult<()> {
        match spec.labels.iter().find(|l| !self.components.contains_key(*l)) {
            Some(l) => Err(AppError::Usage(format!("composition references unknown component `{l}`"))),
            None => Ok(()),
        }
    }
}
