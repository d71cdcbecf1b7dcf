//! Two-stage training: warm-up with best-mode regression, then allocation
//! over every branch, following a per-epoch learning-rate schedule.
//!
//! Scenes are moved into their focal frames once. Every epoch shuffles the
//! scene order, augments each scene and runs batches of stacked scenes
//! through the model; one Adam step follows each batch after global-norm
//! clipping. A single seeded ChaCha stream drives shuffling and
//! augmentation, so runs and resumed runs are bit-identical within a build.

mod adam;
mod augment;
mod checkpoint;

use std::fmt;
use std::fs::OpenOptions;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamGrads, ParamStore, Tape};
use crate::losses::{loss_on_tape, LossConfig, LossError, LossStage};
use crate::net::{Model, ModelConfig, NetError, SceneBatch};
use crate::scene::{to_focal_frame, Future, Scene, SceneError};

pub use adam::{clip_global_norm, AdamConfig, AdamState};
pub use augment::{augment, mask_history, masked_steps};
pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("no training scene has a ground-truth future")]
    NoTargets,
    #[error("checkpoint was made for a different model config")]
    ModelMismatch,
    #[error("training diverged in epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        /// State at the end of the last completed epoch.
        last_good: Box<Checkpoint>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// `epochs` epochs of one loss stage at a fixed learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub stage: LossStage,
    pub epochs: usize,
    pub lr: f64,
}

/// Ordered training phases, written `stage:epochs@lr` and comma separated,
/// e.g. `warmup:8@1e-3,warmup:1@1e-4,allocation:12@1e-3,allocation:3@1e-4`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schedule(pub Vec<Phase>);

impl Schedule {
    /// Desk-scale default: 8 + 1 warm-up epochs, then 12 + 3 allocation
    /// epochs, each pair at 1e-3 then 1e-4.
    pub fn toy() -> Self {
        Self(vec![
            Phase {
                stage: LossStage::Warmup,
                epochs: 8,
                lr: 1e-3,
            },
            Phase {
                stage: LossStage::Warmup,
                epochs: 1,
                lr: 1e-4,
            },
            Phase {
                stage: LossStage::Allocation,
                epochs: 12,
                lr: 1e-3,
            },
            Phase {
                stage: LossStage::Allocation,
                epochs: 3,
                lr: 1e-4,
            },
        ])
    }

    /// The long schedule for full-size datasets: 32 + 2 warm-up epochs and
    /// 46 + 10 allocation epochs.
    pub fn full() -> Self {
        Self(vec![
            Phase {
                stage: LossStage::Warmup,
                epochs: 32,
                lr: 1e-3,
            },
            Phase {
                stage: LossStage::Warmup,
                epochs: 2,
                lr: 1e-4,
            },
            Phase {
                stage: LossStage::Allocation,
                epochs: 46,
                lr: 1e-3,
            },
            Phase {
                stage: LossStage::Allocation,
                epochs: 10,
                lr: 1e-4,
            },
        ])
    }

    pub fn total_epochs(&self) -> usize {
        self.0.iter().map(|p| p.epochs).sum()
    }

    /// Stage and learning rate of every epoch, in order.
    pub fn epochs(&self) -> Vec<(LossStage, f64)> {
        self.0
            .iter()
            .flat_map(|p| std::iter::repeat_n((p.stage, p.lr), p.epochs))
            .collect()
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|p| format!("{}:{}@{}", p.stage, p.epochs, p.lr))
            .collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for Schedule {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |part: &str| TrainError::Config(format!("bad schedule entry {part:?}, expected stage:epochs@lr"));
        let phases = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|part| {
                let (stage, rest) = part.split_once(':').ok_or_else(|| bad(part))?;
                let (epochs, lr) = rest.split_once('@').ok_or_else(|| bad(part))?;
                Ok(Phase {
                    stage: stage.trim().parse().map_err(|_| bad(part))?,
                    epochs: epochs.trim().parse().map_err(|_| bad(part))?,
                    lr: lr.trim().parse().map_err(|_| bad(part))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Schedule(phases))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub schedule: Schedule,
    /// Scenes per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub flip_prob: f64,
    pub mask_prob: f64,
    /// Leading fraction of the history hidden by the mask.
    pub mask_fraction: f64,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::toy(),
            batch_size: 32,
            seed: 0,
            flip_prob: 0.3,
            mask_prob: 0.3,
            mask_fraction: 0.3,
            adam: AdamConfig::default(),
            clip_norm: 10.0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN as well
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(TrainError::Config(m));
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("mask_prob", self.mask_prob),
            ("mask_fraction", self.mask_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return err(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if let Some(p) = self.schedule.0.iter().find(|p| !(p.lr > 0.0 && p.lr.is_finite())) {
            return err(format!("learning rate must be positive, got {}", p.lr));
        }
        if !(self.clip_norm > 0.0) {
            return err("clip_norm must be positive".into());
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return err("adam decays must lie in [0, 1) and epsilon be positive".into());
        }
        self.loss.validate()?;
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    /// 1-based epoch over the whole schedule.
    pub epoch: usize,
    pub stage: LossStage,
    pub mean_loss: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch,stage,mean_loss,lr";

impl LogRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.stage, self.mean_loss, self.lr)
    }
}

/// Where to persist progress while training.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Overwritten after every epoch.
    pub checkpoint_path: Option<PathBuf>,
    /// Rows are appended; the header is written when the file is new.
    pub log_path: Option<PathBuf>,
    /// Stop after this many epochs of this call (the checkpoint then
    /// resumes where it stopped).
    pub max_epochs: Option<usize>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

impl Checkpoint {
    /// Untrained state: parameters from `train.seed`, zero moments, and a
    /// data stream separate from the initialization stream.
    pub fn initial(model: ModelConfig, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        let (_, params) = Model::init(model.clone(), train.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        rng.set_stream(1);
        Ok(Self {
            model_config: model,
            adam: AdamState::new(&params),
            params,
            train_config: train,
            epochs_done: 0,
            rng,
        })
    }

    /// Stage of the next epoch to run (the last stage once finished).
    pub fn stage(&self) -> Option<LossStage> {
        let epochs = self.train_config.schedule.epochs();
        epochs.get(self.epochs_done).or(epochs.last()).map(|e| e.0)
    }
}

/// Trains from scratch.
pub fn train(
    scenes: &[Scene],
    model: ModelConfig,
    config: &TrainConfig,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    resume(Checkpoint::initial(model, config.clone())?, scenes, options)
}

/// Scenes moved to their focal frames, keeping only those with futures.
fn prepare(scenes: &[Scene]) -> Result<Vec<Scene>> {
    let mut out = Vec::with_capacity(scenes.len());
    for s in scenes.iter().filter(|s| s.futures().is_some()) {
        out.push(to_focal_frame(s)?.0);
    }
    if out.is_empty() {
        return Err(TrainError::NoTargets);
    }
    Ok(out)
}

/// Gradients and loss value of one batch of focal-frame scenes.
pub fn batch_gradients(
    model: &Model,
    params: &ParamStore,
    scenes: &[&Scene],
    loss: &LossConfig,
) -> Result<(f64, ParamGrads)> {
    let batch = SceneBatch::new(model, scenes)?;
    let mut targets: Vec<Option<&Future>> = Vec::with_capacity(batch.n_agents());
    for s in scenes {
        match s.futures() {
            Some(f) => targets.extend(f.iter().map(Some)),
            None => targets.extend(std::iter::repeat_n(None, s.agents().len())),
        }
    }
    let mut t = Tape::new();
    let vars = model.forward_batch(&mut t, params, &batch, false)?;
    let terms = loss_on_tape(&mut t, vars.trajectories, vars.scores, &targets, loss)?;
    let value = t.scalar(terms.total);
    let grads = t.backward(terms.total).map_err(NetError::from)?;
    Ok((value, t.param_grads(&grads, params)))
}

fn is_divergence(e: &TrainError) -> Option<String> {
    match e {
        TrainError::Net(NetError::Autodiff(AutodiffError::NonFinite(op)))
        | TrainError::Loss(LossError::Autodiff(AutodiffError::NonFinite(op))) => {
            Some(format!("non-finite value in {op}"))
        }
        _ => None,
    }
}

/// Continues training from `state` until the schedule (or
/// `options.max_epochs`) is exhausted.
pub fn resume(mut state: Checkpoint, scenes: &[Scene], options: &TrainOptions) -> Result<TrainOutcome> {
    let config = state.train_config.clone();
    config.validate()?;
    let model = state.model()?;
    let scenes = prepare(scenes)?;
    let epochs = config.schedule.epochs();
    let mut log = Vec::new();
    let stop = options
        .max_epochs
        .map_or(epochs.len(), |m| (state.epochs_done + m).min(epochs.len()));

    while state.epochs_done < stop {
        let epoch = state.epochs_done;
        let (stage, lr) = epochs[epoch];
        let loss_cfg = config.loss.with_stage(stage);
        let good = state.clone();
        let diverged = |reason: String, good: Checkpoint| TrainError::Diverged {
            epoch: epoch + 1,
            reason,
            last_good: Box::new(good),
        };

        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut state.rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let augmented: Vec<Scene> = chunk
                .iter()
                .map(|i| augment(&scenes[*i], &config, &mut state.rng))
                .collect();
            let refs: Vec<&Scene> = augmented.iter().collect();
            let (value, mut grads) = match batch_gradients(&model, &state.params, &refs, &loss_cfg) {
                Ok(v) => v,
                Err(e) => match is_divergence(&e) {
                    Some(reason) => return Err(diverged(reason, good)),
                    None => return Err(e),
                },
            };
            let norm = clip_global_norm(&mut grads, config.clip_norm);
            if !value.is_finite() || !norm.is_finite() {
                return Err(diverged(format!("loss {value}, gradient norm {norm}"), good));
            }
            state.adam.update(&mut state.params, &grads, lr, &config.adam);
            total += value;
            steps += 1;
        }
        if state.params.iter().any(|(_, t)| !t.is_finite()) {
            return Err(diverged("non-finite parameters".into(), good));
        }
        state.epochs_done += 1;
        let row = LogRow {
            epoch: state.epochs_done,
            stage,
            mean_loss: total / steps.max(1) as f64,
            lr,
        };
        info!("epoch {} ({stage}, lr {lr}): mean loss {:.5}", row.epoch, row.mean_loss);
        if let Some(path) = &options.log_path {
            append_log(path, &row)?;
        }
        if let Some(path) = &options.checkpoint_path {
            state.save(path)?;
        }
        log.push(row);
    }
    Ok(TrainOutcome { checkpoint: state, log })
}

fn append_log(path: &Path, row: &LogRow) -> Result<()> {
    let io = |source| TrainError::Io {
        path: path.into(),
        source,
    };
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    if fresh {
        writeln!(f, "{LOG_HEADER}").map_err(io)?;
    }
    writeln!(f, "{}", row.csv()).map_err(io)
}
