//! Command-line surface: scene generation, training, evaluation,
//! prediction, ablation, ensembling and attention export.
//!
//! Every command writes a [`RunManifest`] next to its outputs.

pub mod manifest;
pub mod plot;
pub mod predfile;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use mapfuse_core::metrics::{
    constant_velocity, ensemble_cluster, evaluate, evaluate_model, focal_targets, predict_focal, run_ablation,
    standard_rows, write_metrics_csv, EvalReport,
};
use mapfuse_core::net::{ModelConfig, Prediction, Topology};
use mapfuse_core::scene::io::read_scenes;
use mapfuse_core::scene::{to_focal_frame, Scene};
use mapfuse_core::scenegen::{generate_dataset, manifest_path, DatasetEntry, DatasetSpec, ScenarioKind, Split};
use mapfuse_core::train::{resume, train, Checkpoint, Schedule, TrainConfig, TrainOptions};

pub use manifest::{config_hash, RunManifest, ARTIFACT_VERSION};
pub use predfile::{read_predictions, write_predictions, PRED_FORMAT};

/// Environment variable holding the log filter (e.g. `debug`).
pub const LOG_ENV: &str = "MAPFUSE_LOG";

/// Scenes per forward pass at inference.
const PREDICT_BATCH: usize = 16;

#[derive(Debug, Parser)]
#[command(
    name = "mapfuse",
    version,
    about = "Multi-modal motion forecasting on vectorized lane maps"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene file.
    Gen(GenArgs),
    /// Train a model; resumes when given a checkpoint.
    Train(TrainArgs),
    /// Write a metrics table for checkpoints or prediction files.
    Eval(EvalArgs),
    /// Write focal-agent predictions of one checkpoint.
    Predict(PredictArgs),
    /// Train and evaluate one model per interaction topology.
    Ablate(AblateArgs),
    /// Cluster the predictions of several checkpoints into one set of modes.
    Ensemble(EnsembleArgs),
    /// Write the focal agent's attention weights and a plot of one scene.
    ExportAttention(AttentionArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
pub enum SplitArg {
    Train,
    Val,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset spec as JSON; replaces the per-kind flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Scenes per scenario kind.
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    /// Comma list of scenario kinds (default: all).
    #[arg(long, value_delimiter = ',')]
    pub kinds: Vec<String>,
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub history_steps: Option<usize>,
    #[arg(long)]
    pub future_steps: Option<usize>,
    #[arg(long)]
    pub agents: Option<usize>,
}

/// Model and training configuration, as read from `--config`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON file with optional `model` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `full`, `one-stage` or a comma list of m2a_e, a2a, m2a_s, m2a_m.
    #[arg(long)]
    pub topology: Option<String>,
    /// Comma list of stage:epochs@lr, e.g. warmup:8@1e-3,allocation:12@1e-3.
    #[arg(long)]
    pub stage_schedule: Option<String>,
}

impl ConfigArgs {
    /// Config file (or defaults) with the command-line overrides applied.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(t) = &self.topology {
            cfg.model.topology = t.parse::<Topology>()?;
        }
        if let Some(s) = &self.stage_schedule {
            cfg.train.schedule = s.parse::<Schedule>()?;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub scenes: PathBuf,
    /// Checkpoint to write (updated after every epoch).
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint; its configuration is kept.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// One table row per checkpoint.
    #[arg(long = "checkpoints", alias = "checkpoint", value_delimiter = ',', num_args = 1..)]
    pub checkpoints: Vec<PathBuf>,
    /// One table row per prediction file.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub predictions: Vec<PathBuf>,
    /// Add a constant-velocity row.
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Training scenes.
    #[arg(long)]
    pub scenes: PathBuf,
    /// Evaluation scenes.
    #[arg(long)]
    pub eval_scenes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Topologies to compare (repeatable; default: the six standard rows).
    #[arg(long = "row")]
    pub rows: Vec<String>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long, default_value_t = 6)]
    pub k_out: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttentionArgs {
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Position of the scene in the file.
    #[arg(long, default_value_t = 0)]
    pub scene_index: usize,
    /// Output directory for `attention.csv` and `attention.svg`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Runs one command and writes its manifest.
pub fn run(cli: Cli, argv: Vec<String>) -> Result<RunManifest> {
    let start = Instant::now();
    let mut m = match cli.command {
        Command::Gen(a) => cmd_gen(&a)?,
        Command::Train(a) => cmd_train(&a)?,
        Command::Eval(a) => cmd_eval(&a)?,
        Command::Predict(a) => cmd_predict(&a)?,
        Command::Ablate(a) => cmd_ablate(&a)?,
        Command::Ensemble(a) => cmd_ensemble(&a)?,
        Command::ExportAttention(a) => cmd_export_attention(&a)?,
    };
    m.args = argv;
    m.wall_time_s = start.elapsed().as_secs_f64();
    let primary = PathBuf::from(&m.outputs[0]);
    let path = m.write(&primary)?;
    info!("wrote {}", path.display());
    Ok(m)
}

fn manifest(command: &str, hash: String, seed: Option<u64>, inputs: &[&Path], outputs: &[&Path]) -> RunManifest {
    let s = |p: &[&Path]| p.iter().map(|p| p.display().to_string()).collect();
    RunManifest {
        command: command.into(),
        args: Vec::new(),
        config_hash: hash,
        seed,
        inputs: s(inputs),
        outputs: s(outputs),
        artifact_version: ARTIFACT_VERSION.into(),
        wall_time_s: 0.0,
    }
}

fn load_scenes(path: &Path) -> Result<Vec<Scene>> {
    let scenes = read_scenes(path)?;
    ensure!(!scenes.is_empty(), "{}: no scenes", path.display());
    Ok(scenes)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

fn check_horizon(ck: &Checkpoint, scenes: &[Scene], path: &Path) -> Result<()> {
    let cfg = &ck.model_config;
    if let Some(s) = scenes.iter().find(|s| s.history_len() != cfg.history_steps) {
        bail!(
            "{}: scene {} has {} history steps, the model expects {}",
            path.display(),
            s.id(),
            s.history_len(),
            cfg.history_steps
        );
    }
    Ok(())
}

pub fn cmd_gen(a: &GenArgs) -> Result<RunManifest> {
    let spec: DatasetSpec = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => {
            let kinds: Vec<ScenarioKind> = if a.kinds.is_empty() {
                ScenarioKind::ALL.to_vec()
            } else {
                a.kinds.iter().map(|k| k.parse()).collect::<Result<_, _>>()?
            };
            let entries = kinds
                .into_iter()
                .map(|k| {
                    let mut e = DatasetEntry::new(k, a.count);
                    e.history_steps = a.history_steps.unwrap_or(e.history_steps);
                    e.future_steps = a.future_steps.unwrap_or(e.future_steps);
                    e.n_agents = a.agents.unwrap_or(e.n_agents);
                    e
                })
                .collect();
            DatasetSpec {
                entries,
                base_seed: a.seed,
                split: match a.split {
                    SplitArg::Train => Split::Train,
                    SplitArg::Val => Split::Val,
                },
            }
        }
    };
    let m = generate_dataset(&spec, &a.out)?;
    info!("wrote {} scenes to {}", m.seeds.len(), a.out.display());
    let dataset_manifest = manifest_path(&a.out);
    Ok(manifest(
        "gen",
        config_hash(&spec),
        Some(a.seed),
        &[],
        &[&a.out, &dataset_manifest],
    ))
}

pub fn cmd_train(a: &TrainArgs) -> Result<RunManifest> {
    let scenes = load_scenes(&a.scenes)?;
    let mut log_name = a.out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    log_name.push(".log.csv");
    let log_path = a.out.with_file_name(log_name);
    let options = TrainOptions {
        checkpoint_path: Some(a.out.clone()),
        log_path: Some(log_path.clone()),
        max_epochs: None,
    };
    let outcome = match &a.checkpoint {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            check_horizon(&ck, &scenes, &a.scenes)?;
            info!("resuming {} after epoch {}", p.display(), ck.epochs_done);
            resume(ck, &scenes, &options)?
        }
        None => {
            let cfg = a.config.resolve()?;
            if log_path.exists() {
                std::fs::remove_file(&log_path)?;
            }
            train(&scenes, cfg.model, &cfg.train, &options)?
        }
    };
    let ck = &outcome.checkpoint;
    // A finished schedule still leaves a checkpoint behind.
    ck.save(&a.out)?;
    let cfg = RunConfig {
        model: ck.model_config.clone(),
        train: ck.train_config.clone(),
    };
    let mut inputs = vec![a.scenes.as_path()];
    inputs.extend(a.checkpoint.as_deref());
    Ok(manifest(
        "train",
        config_hash(&cfg),
        Some(cfg.train.seed),
        &inputs,
        &[&a.out, &log_path],
    ))
}

/// Focal-agent predictions of a checkpoint, in each scene's own frame.
fn checkpoint_predictions(path: &Path, scenes: &[Scene]) -> Result<Vec<Prediction>> {
    let ck = load_checkpoint(path)?;
    check_horizon(&ck, scenes, path)?;
    let model = ck.model()?;
    Ok(predict_focal(&model, &ck.params, scenes, PREDICT_BATCH)?)
}

fn row_name(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<RunManifest> {
    ensure!(
        !a.checkpoints.is_empty() || !a.predictions.is_empty() || a.baseline,
        "nothing to evaluate: pass --checkpoints, --predictions or --baseline"
    );
    let scenes = load_scenes(&a.scenes)?;
    let targets = focal_targets(&scenes)?;
    let mut rows: Vec<(String, EvalReport)> = Vec::new();
    for p in &a.checkpoints {
        let ck = load_checkpoint(p)?;
        check_horizon(&ck, &scenes, p)?;
        rows.push((row_name(p), evaluate_model(&ck.model()?, &ck.params, &scenes)?));
    }
    for p in &a.predictions {
        let preds = read_predictions(p)?;
        ensure!(
            preds.len() == scenes.len() && preds.iter().zip(&scenes).all(|((id, _), s)| id == s.id()),
            "{}: scene ids do not match {}",
            p.display(),
            a.scenes.display()
        );
        let preds: Vec<Prediction> = preds.into_iter().map(|(_, p)| p).collect();
        rows.push((row_name(p), evaluate(&preds, &targets)?));
    }
    if a.baseline {
        let preds: Vec<Prediction> = scenes.iter().map(constant_velocity).collect();
        rows.push(("constant-velocity".into(), evaluate(&preds, &targets)?));
    }
    write_table(&a.out, &rows)?;
    let mut inputs = vec![a.scenes.as_path()];
    inputs.extend(a.checkpoints.iter().map(PathBuf::as_path));
    inputs.extend(a.predictions.iter().map(PathBuf::as_path));
    let hash = config_hash(&(&inputs, a.baseline));
    Ok(manifest("eval", hash, None, &inputs, &[&a.out]))
}

fn write_table(path: &Path, rows: &[(String, EvalReport)]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_metrics_csv(&mut out, rows)?;
    out.flush()?;
    for (name, r) in rows {
        info!(
            "{name}: minADE {:.3} minFDE {:.3} MR {:.3}",
            r.min_ade, r.min_fde, r.miss_rate
        );
    }
    Ok(())
}

pub fn cmd_predict(a: &PredictArgs) -> Result<RunManifest> {
    let scenes = load_scenes(&a.scenes)?;
    let preds = checkpoint_predictions(&a.checkpoint, &scenes)?;
    let rows: Vec<(String, Prediction)> = scenes.iter().map(|s| s.id().to_string()).zip(preds).collect();
    write_predictions(&a.out, &rows)?;
    let hash = config_hash(&Checkpoint::load(&a.checkpoint)?.model_config);
    Ok(manifest("predict", hash, None, &[&a.scenes, &a.checkpoint], &[&a.out]))
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<RunManifest> {
    let cfg = a.config.resolve()?;
    let train_scenes = load_scenes(&a.scenes)?;
    let eval_scenes = load_scenes(&a.eval_scenes)?;
    let rows: Vec<(String, Topology)> = if a.rows.is_empty() {
        standard_rows()
    } else {
        a.rows
            .iter()
            .map(|r| Ok((r.clone(), r.parse::<Topology>()?)))
            .collect::<Result<_>>()?
    };
    let table = run_ablation(&train_scenes, &eval_scenes, &cfg.model, &rows, &cfg.train)?;
    write_table(&a.out, &table)?;
    let hash = config_hash(&(&cfg, rows.iter().map(|r| r.1.to_string()).collect::<Vec<_>>()));
    Ok(manifest(
        "ablate",
        hash,
        Some(cfg.train.seed),
        &[&a.scenes, &a.eval_scenes],
        &[&a.out],
    ))
}

pub fn cmd_ensemble(a: &EnsembleArgs) -> Result<RunManifest> {
    let scenes = load_scenes(&a.scenes)?;
    let members = a
        .checkpoints
        .iter()
        .map(|p| checkpoint_predictions(p, &scenes))
        .collect::<Result<Vec<_>>>()?;
    let rows = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let per_scene: Vec<Prediction> = members.iter().map(|m| m[i].clone()).collect();
            Ok((s.id().to_string(), ensemble_cluster(&per_scene, a.k_out)?))
        })
        .collect::<Result<Vec<_>>>()?;
    write_predictions(&a.out, &rows)?;
    let mut inputs = vec![a.scenes.as_path()];
    inputs.extend(a.checkpoints.iter().map(PathBuf::as_path));
    Ok(manifest(
        "ensemble",
        config_hash(&(&inputs, a.k_out)),
        None,
        &inputs,
        &[&a.out],
    ))
}

pub fn cmd_export_attention(a: &AttentionArgs) -> Result<RunManifest> {
    let scenes = load_scenes(&a.scenes)?;
    let Some(scene) = scenes.get(a.scene_index) else {
        bail!(
            "{} has {} scenes, no index {}",
            a.scenes.display(),
            scenes.len(),
            a.scene_index
        );
    };
    let ck = load_checkpoint(&a.checkpoint)?;
    check_horizon(&ck, std::slice::from_ref(scene), &a.scenes)?;
    let model = ck.model()?;
    let (framed, _) = to_focal_frame(scene)?;
    let out = model.forward(&ck.params, &framed, true)?;
    let focal = framed.focal_index();
    let records: Vec<_> = out.attention.into_iter().filter(|r| r.agent == focal).collect();

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let csv_path = a.out.join("attention.csv");
    let svg_path = a.out.join("attention.svg");
    let segments = framed.lane_graph().segments();
    let mut csv = BufWriter::new(File::create(&csv_path)?);
    writeln!(csv, "stage,mode,node,x,y,weight")?;
    for r in &records {
        let c = segments[r.node].center;
        let mode = r.mode.map_or("NA".into(), |m| m.to_string());
        writeln!(
            csv,
            "{},{mode},{},{},{},{}",
            r.stage.name(),
            r.node,
            c[0],
            c[1],
            r.weight
        )?;
    }
    csv.flush()?;
    let svg = plot::render_svg(&framed, &out.agents[focal], &records);
    std::fs::write(&svg_path, svg)?;
    info!("wrote {} attention records for scene {}", records.len(), scene.id());
    let hash = config_hash(&(&ck.model_config, a.scene_index));
    Ok(manifest(
        "export-attention",
        hash,
        None,
        &[&a.scenes, &a.checkpoint],
        &[&a.out, &csv_path, &svg_path],
    ))
}
