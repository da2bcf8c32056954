//! Command-line surface. Every command exits 0 on success, 2 on a
//! configuration or usage error and 3 on a numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use flowmix_core::compose::MixMode;
use flowmix_core::grid::{eval_reward_field, GridSpec};
use flowmix_core::train::{train_gfn, TrainConfig};

use crate::error::{AppError, AppResult};
use crate::experiment::{
    evaluate, load_components, parse_component, parse_grid, parse_reward, ComponentDef, ComponentSource, EvalKind,
    EvalRequest, ExperimentConfig,
};
use crate::export;
use crate::grammar::parse_spec;
use crate::model::{ExactModel, ModelFile, SCHEMA_VERSION};

#[derive(Debug, Parser)]
#[command(name = "flowmix", version, about = "Exact, trained and composed GFlowNets on 2D grids")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve exact flows for a reward and write a model file.
    Solve {
        #[arg(long, value_parser = parse_grid)]
        grid: GridSpec,
        #[arg(long)]
        reward: String,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train a GFlowNet with sub-trajectory balance and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a composition of components.
    Compose(ComposeArgs),
    /// Linear preference sweep over the given components.
    Sweep {
        #[command(flatten)]
        components: ComponentArgs,
        #[arg(long)]
        spec: Option<String>,
        #[arg(long, default_value_t = 128)]
        n_prefs: usize,
        #[arg(long)]
        ensemble: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Write CSV and PGM heatmaps of reward fields and distributions.
    Export {
        #[arg(long, value_parser = parse_grid)]
        grid: Option<GridSpec>,
        /// Reward fields to export.
        #[arg(long)]
        reward: Vec<String>,
        /// Components whose terminal distributions are exported.
        #[arg(long)]
        component: Vec<String>,
        /// Also export the induced and target distributions of this composition.
        #[arg(long)]
        spec: Option<String>,
        #[arg(long)]
        ensemble: bool,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run an experiment file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_grid)]
    pub grid: GridSpec,
    #[arg(long)]
    pub reward: String,
    #[arg(long, default_value_t = 20_000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 2.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.05)]
    pub epsilon: f64,
    /// Checkpoint path; the loss trace goes next to it as `<stem>.loss.csv`.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ComponentArgs {
    /// `LABEL=PATH` or `LABEL=exact:REWARD[:k=v,...]`; repeatable.
    #[arg(long = "component", required = true)]
    pub component: Vec<String>,
    /// Grid for exact components; must match every model file.
    #[arg(long, value_parser = parse_grid)]
    pub grid: Option<GridSpec>,
}

#[derive(Debug, Args)]
pub struct ComposeArgs {
    #[command(flatten)]
    pub components: ComponentArgs,
    #[arg(long)]
    pub spec: Option<String>,
    #[arg(long = "eval", value_enum, default_values_t = [EvalKind::L1])]
    pub eval: Vec<EvalKind>,
    #[arg(long, default_value_t = 128)]
    pub n_prefs: usize,
    /// Mix without reaching probabilities (the ensemble baseline).
    #[arg(long)]
    pub ensemble: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(short, long)]
    pub out: PathBuf,
}

fn mode(ensemble: bool) -> MixMode {
    if ensemble {
        MixMode::Ensemble
    } else {
        MixMode::Reaching
    }
}

fn write_summary(dir: &Path, command: &str, seed: u64, start: Instant, mut body: Value) -> AppResult<Value> {
    fs::create_dir_all(dir).map_err(AppError::io(dir))?;
    let obj = body.as_object_mut().expect("summary bodies are objects");
    obj.insert("schema_version".into(), json!(SCHEMA_VERSION));
    obj.insert("command".into(), json!(command));
    obj.insert("seed".into(), json!(seed));
    obj.insert("wall_time_s".into(), json!(start.elapsed().as_secs_f64()));
    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&body).expect("summary serializes") + "\n";
    fs::write(&path, text).map_err(AppError::io(&path))?;
    Ok(body)
}

fn ensure_parent(path: &Path) -> AppResult<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(AppError::io(dir)),
        None => Ok(()),
    }
}

/// Loss trace path that sits next to a checkpoint.
pub fn loss_trace_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("loss.csv")
}

fn component_defs(args: &ComponentArgs) -> AppResult<Vec<(String, ComponentSource)>> {
    args.component.iter().map(|c| parse_component(c)).collect()
}

fn train_to(path: &Path, grid: GridSpec, reward: &flowmix_core::grid::RewardSpec, cfg: &TrainConfig) -> AppResult<ModelFile> {
    let field = eval_reward_field(reward, grid)?;
    let ckpt = train_gfn(grid, &field, cfg)?;
    ensure_parent(path)?;
    export::write_loss_csv(&loss_trace_path(path), &ckpt.loss_trace)?;
    let model = ModelFile::Trained(ckpt);
    model.save(path)?;
    Ok(model)
}

pub fn run(cli: Cli) -> AppResult<()> {
    let start = Instant::now();
    match cli.command {
        Command::Solve { grid, reward, out } => {
            let model = ExactModel::solve(grid, parse_reward(&reward)?)?;
            let z = model.flow.partition;
            ensure_parent(&out)?;
            ModelFile::Exact(model).save(&out)?;
            println!("Z = {z:?}");
        }
        Command::Train(a) => {
            let cfg = TrainConfig {
                iterations: a.iters,
                batch_size: a.batch_size,
                hidden_units: a.hidden,
                subtb_lambda: a.lambda,
                epsilon_greedy: a.epsilon,
                seed: a.seed,
                ..TrainConfig::default()
            };
            let model = train_to(&a.out, a.grid, &parse_reward(&a.reward)?, &cfg)?;
            if let ModelFile::Trained(c) = &model {
                let last = c.loss_trace.last().copied().unwrap_or(f64::NAN);
                println!("log Z = {:?}, final loss = {last:?}", c.log_z);
            }
        }
        Command::Compose(a) => {
            let loaded = load_components(a.components.grid, component_defs(&a.components)?)?;
            let spec = a.spec.as_deref().map(parse_spec).transpose()?;
            let req = EvalRequest { spec: spec.as_ref(), evals: &a.eval, n_prefs: a.n_prefs, mode: mode(a.ensemble) };
            let body = evaluate(&loaded, &req, &a.out)?;
            let summary = write_summary(&a.out, "compose", a.seed, start, json!({ "grid": grid_json(loaded.grid), "results": body }))?;
            println!("{}", serde_json::to_string_pretty(&summary["results"]).unwrap());
        }
        Command::Sweep { components, spec, n_prefs, ensemble, seed, out } => {
            let loaded = load_components(components.grid, component_defs(&components)?)?;
            let spec = spec.as_deref().map(parse_spec).transpose()?;
            let req = EvalRequest { spec: spec.as_ref(), evals: &[EvalKind::Sweep], n_prefs, mode: mode(ensemble) };
            let body = evaluate(&loaded, &req, &out)?;
            write_summary(&out, "sweep", seed, start, json!({ "grid": grid_json(loaded.grid), "results": body }))?;
            println!("mean L1 = {:?}", body["sweep"]["mean_l1"].as_f64().unwrap_or(f64::NAN));
        }
        Command::Export { grid, reward, component, spec, ensemble, out } => {
            fs::create_dir_all(&out).map_err(AppError::io(&out))?;
            for r in &reward {
                let g = grid.ok_or_else(|| AppError::Usage("exporting a reward needs --grid".into()))?;
                let spec = parse_reward(r)?;
                let field = eval_reward_field(&spec, g)?;
                export::write_heatmap(&out, &format!("reward_{}", spec.name), g, &field.values)?;
            }
            if !component.is_empty() {
                let defs = component.iter().map(|c| parse_component(c)).collect::<AppResult<Vec<_>>>()?;
                let loaded = load_components(grid, defs)?;
                for (label, comp) in loaded.labels.iter().zip(&loaded.components) {
                    export::write_heatmap(&out, label, loaded.grid, comp.terminal.as_slice())?;
                }
                if let Some(text) = spec {
                    let spec = parse_spec(&text)?;
                    let comps = loaded.select(&spec.labels)?;
                    let target = flowmix_core::compose::target_distribution(&spec.composition, &comps, &loaded.env)?;
                    let mix = flowmix_core::compose::MixingPolicy::new(&spec.composition, &comps, mode(ensemble))?;
                    let induced = flowmix_core::dag::terminating_distribution(&loaded.env, &mix)
                        .map_err(|e| AppError::from(e).locate(loaded.grid))?;
                    export::write_heatmap(&out, "induced", loaded.grid, induced.as_slice())?;
                    export::write_heatmap(&out, "target", loaded.grid, target.as_slice())?;
                }
            } else if spec.is_some() {
                return Err(AppError::Usage("--spec needs --component".into()));
            }
        }
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            run_experiment(&cfg, start)?;
        }
    }
    Ok(())
}

fn grid_json(g: GridSpec) -> Value {
    json!({ "h": g.height, "w": g.width })
}

/// Builds every component of `cfg` (training where asked), then evaluates.
pub fn run_experiment(cfg: &ExperimentConfig, start: Instant) -> AppResult<Value> {
    let grid = cfg.grid.spec()?;
    let spec = cfg.composition.as_deref().map(parse_spec).transpose()?;
    if let Some(s) = &spec {
        cfg.check_labels(s)?;
    }
    fs::create_dir_all(&cfg.out).map_err(AppError::io(&cfg.out))?;
    let mut defs = Vec::new();
    for (label, def) in &cfg.components {
        let source = match def {
            ComponentDef::Exact(r) => ComponentSource::Exact(cfg.reward(r)?),
            ComponentDef::Checkpoint(p) => ComponentSource::File(p.clone()),
            ComponentDef::Train(t) => {
                let defaults = TrainConfig::default();
                let tc = TrainConfig {
                    iterations: t.iterations.unwrap_or(defaults.iterations),
                    batch_size: t.batch_size.unwrap_or(defaults.batch_size),
                    hidden_units: t.hidden_units.unwrap_or(defaults.hidden_units),
                    seed: cfg.seed,
                    ..defaults
                };
                let path = cfg.out.join(format!("{label}.json"));
                ComponentSource::Model(Box::new(train_to(&path, grid, &cfg.reward(&t.reward)?, &tc)?))
            }
        };
        defs.push((label.clone(), source));
    }
    let loaded = load_components(Some(grid), defs)?;
    let req = EvalRequest { spec: spec.as_ref(), evals: &cfg.eval, n_prefs: cfg.n_prefs, mode: mode(cfg.ensemble) };
    let body = evaluate(&loaded, &req, &cfg.out)?;
    write_summary(&cfg.out, "run", cfg.seed, start, json!({ "grid": grid_json(grid), "results": body }))
}

/// Parses `args`, runs, reports errors on stderr and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(main_with_args(["flowmix", "solve", "--grid", "3x3"]), 2);
        assert_eq!(main_with_args(["flowmix", "solve", "--grid", "3by3", "--reward", "sphere", "-o", "x"]), 2);
        assert_eq!(main_with_args(["flowmix", "bogus"]), 2);
    }

    #[test]
    fn loss_path_sits_next_to_checkpoint() {
        assert_eq!(loss_trace_path(Path::new("m/shubert.json")), Path::new("m/shubert.loss.csv"));
    }
}
