//! JSON model files: exact flow solutions and trained checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use flowmix_core::dag::EnvGraph;
use flowmix_core::flows::{as_component, solve_exact_flows, BackwardMode, ComponentModel, FlowModel};
use flowmix_core::grid::{build_grid, eval_reward_field, GridSpec, RewardName, RewardSpec};
use flowmix_core::train::{component_from_checkpoint, Checkpoint, Mlp, MlpParams, TrainConfig};

use crate::error::{AppError, AppResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Exact,
    Trained,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridDoc {
    pub h: usize,
    pub w: usize,
}

impl GridDoc {
    pub fn spec(self) -> AppResult<GridSpec> {
        Ok(GridSpec::new(self.h, self.w)?)
    }
}

impl From<GridSpec> for GridDoc {
    fn from(g: GridSpec) -> Self {
        GridDoc { h: g.height, w: g.width }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardDoc {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl RewardDoc {
    pub fn spec(&self) -> AppResult<RewardSpec> {
        Ok(RewardSpec { name: RewardName::parse(&self.name)?, params: self.params.clone() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDoc {
    /// `[fan_in, fan_out]`
    pub shape: [usize; 2],
    /// Row-major `fan_in x fan_out`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDoc {
    pub layers: Vec<LayerDoc>,
}

impl NetworkDoc {
    fn from_mlp(net: &Mlp) -> Self {
        let layers = (0..net.num_layers())
            .map(|l| {
                let (w, b) = net.layer(l);
                LayerDoc { shape: [net.sizes()[l], net.sizes()[l + 1]], weights: w.to_vec(), bias: b.to_vec() }
            })
            .collect();
        NetworkDoc { layers }
    }

    fn to_mlp(&self, what: &str) -> AppResult<Mlp> {
        let bad = |msg: String| AppError::Format(format!("network {what}: {msg}"));
        let first = self.layers.first().ok_or_else(|| bad("no layers".into()))?;
        let mut sizes = vec![first.shape[0]];
        let mut params = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let [fi, fo] = layer.shape;
            if fi != *sizes.last().unwrap() {
                return Err(bad(format!("layer {l} expects {fi} inputs after a layer of {}", sizes.last().unwrap())));
            }
            if layer.weights.len() != fi * fo || layer.bias.len() != fo {
                return Err(bad(format!("layer {l} arrays do not match shape {fi}x{fo}")));
            }
            sizes.push(fo);
            params.extend_from_slice(&layer.weights);
            params.extend_from_slice(&layer.bias);
        }
        Ok(Mlp::from_params(&sizes, params)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworksDoc {
    pub forward: NetworkDoc,
    pub backward: NetworkDoc,
    pub flow: NetworkDoc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfigDoc {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_params: f64,
    pub lr_log_z: f64,
    pub epsilon_greedy: f64,
    pub subtb_lambda: f64,
    pub replay_capacity: usize,
    pub hidden_units: usize,
    pub reward_floor: f64,
}

impl TrainConfigDoc {
    fn new(c: &TrainConfig) -> Self {
        TrainConfigDoc {
            iterations: c.iterations,
            batch_size: c.batch_size,
            lr_params: c.lr_params,
            lr_log_z: c.lr_log_z,
            epsilon_greedy: c.epsilon_greedy,
            subtb_lambda: c.subtb_lambda,
            replay_capacity: c.replay_capacity,
            hidden_units: c.hidden_units,
            reward_floor: c.reward_floor,
        }
    }

    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            lr_params: self.lr_params,
            lr_log_z: self.lr_log_z,
            epsilon_greedy: self.epsilon_greedy,
            subtb_lambda: self.subtb_lambda,
            replay_capacity: self.replay_capacity,
            hidden_units: self.hidden_units,
            reward_floor: self.reward_floor,
            seed,
        }
    }
}

/// On-disk layout. Exact files carry `state_flow` and `z`; trained files
/// carry `networks`, `log_z`, `train_config`, `seed` and `loss_trace`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDoc {
    pub schema_version: u32,
    pub kind: ModelKind,
    pub grid: GridDoc,
    pub reward: RewardDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_flow: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub networks: Option<NetworksDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_z: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_config: Option<TrainConfigDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_trace: Option<Vec<f64>>,
}

/// Exact flows for a named reward on a grid.
#[derive(Clone, Debug)]
pub struct ExactModel {
    pub grid: GridSpec,
    pub reward: RewardSpec,
    pub flow: FlowModel,
}

impl ExactModel {
    pub fn solve(grid: GridSpec, reward: RewardSpec) -> AppResult<Self> {
        let field = eval_reward_field(&reward, grid)?;
        let flow = solve_exact_flows(&build_grid(grid), &field.values, BackwardMode::Uniform)?;
        // Store every parameter so the file does not depend on defaults.
        let reward = RewardSpec { params: reward.resolved_params()?, ..reward };
        Ok(Self { grid, reward, flow })
    }
}

#[derive(Clone, Debug)]
pub enum ModelFile {
    Exact(ExactModel),
    Trained(Checkpoint),
}

impl ModelFile {
    pub fn grid(&self) -> GridSpec {
        match self {
            ModelFile::Exact(m) => m.grid,
            ModelFile::Trained(c) => c.grid,
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ModelFile::Exact(_) => ModelKind::Exact,
            ModelFile::Trained(_) => ModelKind::Trained,
        }
    }

    pub fn component(&self, env: &EnvGraph) -> AppResult<ComponentModel> {
        match self {
            ModelFile::Exact(m) => {
                if env.num_states() != m.grid.num_cells() {
                    return Err(AppError::Usage(format!("exact model for {} used on another grid", m.grid)));
                }
                Ok(as_component(&m.flow))
            }
            ModelFile::Trained(c) => Ok(component_from_checkpoint(c, env)?),
        }
    }

    pub fn to_doc(&self) -> ModelDoc {
        let blank = |kind, grid: GridSpec, reward: RewardDoc| ModelDoc {
            schema_version: SCHEMA_VERSION,
            kind,
            grid: grid.into(),
            reward,
            state_flow: None,
            z: None,
            networks: None,
            log_z: None,
            train_config: None,
            seed: None,
            loss_trace: None,
        };
        match self {
            ModelFile::Exact(m) => {
                let reward = RewardDoc { name: m.reward.name.as_str().into(), params: m.reward.params.clone() };
                ModelDoc {
                    state_flow: Some(m.flow.state_flow.clone()),
                    z: Some(m.flow.partition),
                    ..blank(ModelKind::Exact, m.grid, reward)
                }
            }
            ModelFile::Trained(c) => {
                let reward = RewardDoc { name: c.reward_name.clone(), params: c.reward_params.clone() };
                ModelDoc {
                    networks: Some(NetworksDoc {
                        forward: NetworkDoc::from_mlp(&c.params.forward),
                        backward: NetworkDoc::from_mlp(&c.params.backward),
                        flow: NetworkDoc::from_mlp(&c.params.flow),
                    }),
                    log_z: Some(c.log_z),
                    train_config: Some(TrainConfigDoc::new(&c.config)),
                    seed: Some(c.config.seed),
                    loss_trace: Some(c.loss_trace.clone()),
                    ..blank(ModelKind::Trained, c.grid, reward)
                }
            }
        }
    }

    pub fn from_doc(doc: ModelDoc) -> AppResult<Self> {
        if doc.schema_version != SCHEMA_VERSION {
            return Err(AppError::Format(format!("unsupported schema_version {}", doc.schema_version)));
        }
        let grid = doc.grid.spec()?;
        let missing = |field: &str| AppError::Format(format!("{:?} model is missing `{field}`", doc.kind));
        match doc.kind {
            ModelKind::Exact => {
                let stored = doc.state_flow.as_ref().ok_or_else(|| missing("state_flow"))?;
                let z = doc.z.ok_or_else(|| missing("z"))?;
                if stored.len() != grid.num_cells() {
                    return Err(AppError::Format(format!("state_flow has {} entries for grid {grid}", stored.len())));
                }
                let model = ExactModel::solve(grid, doc.reward.spec()?)?;
                let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs());
                if !close(model.flow.partition, z) || !stored.iter().zip(&model.flow.state_flow).all(|(&a, &b)| close(a, b)) {
                    return Err(AppError::Format("stored state_flow does not match the reward it names".into()));
                }
                Ok(ModelFile::Exact(model))
            }
            ModelKind::Trained => {
                let nets = doc.networks.as_ref().ok_or_else(|| missing("networks"))?;
                let params = MlpParams {
                    forward: nets.forward.to_mlp("forward")?,
                    backward: nets.backward.to_mlp("backward")?,
                    flow: nets.flow.to_mlp("flow")?,
                };
                params.check_shapes(grid.feature_dim())?;
                let cfg = doc.train_config.as_ref().ok_or_else(|| missing("train_config"))?;
                let seed = doc.seed.ok_or_else(|| missing("seed"))?;
                Ok(ModelFile::Trained(Checkpoint {
                    params,
                    log_z: doc.log_z.ok_or_else(|| missing("log_z"))?,
                    grid,
                    reward_name: doc.reward.name.clone(),
                    reward_params: doc.reward.params.clone(),
                    config: cfg.config(seed),
                    loss_trace: doc.loss_trace.clone().unwrap_or_default(),
                }))
            }
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(&self.to_doc()).expect("model documents always serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> AppResult<Self> {
        let doc: ModelDoc = serde_json::from_str(text).map_err(|e| AppError::Format(format!("model file: {e}")))?;
        Self::from_doc(doc)
    }

    pub fn save(&self, path: &Path) -> AppResult<()> {
        fs::write(path, self.to_json()).map_err(AppError::io(path))
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let text = fs::read_to_string(path).map_err(AppError::io(path))?;
        Self::from_json(&text).map_err(|e| match e {
            AppError::Format(m) => AppError::Format(format!("{}: {m}", path.display())),
            e => e,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use flowmix_core::grid::RewardField;
    use flowmix_core::train::train_gfn;

    #[test]
    fn exact_round_trip_is_byte_identical() {
        let g = GridSpec::new(5, 6).unwrap();
        let m = ModelFile::Exact(ExactModel::solve(g, RewardSpec::new(RewardName::Circle2).with("sigma", 0.3)).unwrap());
        let text = m.to_json();
        let back = ModelFile::from_json(&text).unwrap();
        assert_eq!(back.to_json(), text);
        assert!(text.contains("\"kind\":\"exact\""));
    }

    #[test]
    fn trained_round_trip_is_byte_identical() {
        let g = GridSpec::new(3, 4).unwrap();
        let field = eval_reward_field(&RewardSpec::new(RewardName::Currin), g).unwrap();
        let cfg = TrainConfig { iterations: 5, batch_size: 8, hidden_units: 6, seed: 4, ..Default::default() };
        let m = ModelFile::Trained(train_gfn(g, &field, &cfg).unwrap());
        let text = m.to_json();
        let back = ModelFile::from_json(&text).unwrap();
        assert_eq!(back.to_json(), text);
        match back {
            ModelFile::Trained(c) => assert_eq!(c.config, cfg),
            _ => panic!("kind changed"),
        }
    }

    #[test]
    fn tampered_files_are_rejected() {
        let g = GridSpec::new(2, 2).unwrap();
        let m = ModelFile::Exact(ExactModel::solve(g, RewardSpec::new(RewardName::Currin)).unwrap());
        let mut doc = m.to_doc();
        doc.state_flow.as_mut().unwrap()[1] *= 1.5;
        assert!(matches!(ModelFile::from_doc(doc), Err(AppError::Format(_))));
        let mut doc = m.to_doc();
        doc.schema_version = 9;
        assert!(ModelFile::from_doc(doc).is_err());
        let mut doc = m.to_doc();
        doc.state_flow = None;
        assert!(ModelFile::from_doc(doc).is_err());
        assert!(ModelFile::from_json("{\"schema_version\":1}").is_err());
    }

    #[test]
    fn layer_shapes_are_checked() {
        let g = GridSpec::new(2, 3).unwrap();
        let field = RewardField { name: "custom".into(), params: BTreeMap::new(), values: vec![0.5; 6] };
        let cfg = TrainConfig { iterations: 0, hidden_units: 4, ..Default::default() };
        let m = ModelFile::Trained(train_gfn(g, &field, &cfg).unwrap());
        let mut doc = m.to_doc();
        doc.networks.as_mut().unwrap().flow.layers[1].bias.pop();
        assert!(ModelFile::from_doc(doc).is_err());
        let mut doc = m.to_doc();
        doc.grid = GridDoc { h: 3, w: 3 };
        assert!(ModelFile::from_doc(doc).is_err());
    }
}
