//! Component ablation: one model per interaction topology, trained and
//! evaluated under identical seeds and schedule.

use thiserror::Error;

use crate::net::{ModelConfig, Topology};
use crate::scene::Scene;
use crate::train::{train, TrainConfig, TrainError, TrainOptions};

use super::{evaluate_model, EvalReport, MetricsError};

#[derive(Debug, Error)]
pub enum AblationError {
    #[error("no topologies requested")]
    NoRows,
    #[error("{row}: {source}")]
    Train {
        row: String,
        #[source]
        source: TrainError,
    },
    #[error("{row}: {source}")]
    Eval {
        row: String,
        #[source]
        source: MetricsError,
    },
}

/// Trains `base` with each topology in `rows` on `train_scenes` and
/// evaluates on `eval_scenes`. Rows keep their request order and names.
pub fn run_ablation(
    train_scenes: &[Scene],
    eval_scenes: &[Scene],
    base: &ModelConfig,
    rows: &[(String, Topology)],
    config: &TrainConfig,
) -> Result<Vec<(String, EvalReport)>, AblationError> {
    if rows.is_empty() {
        return Err(AblationError::NoRows);
    }
    rows.iter()
        .map(|(name, topology)| {
            let model_cfg = ModelConfig {
                topology: *topology,
                ..base.clone()
            };
            let out = train(train_scenes, model_cfg, config, &TrainOptions::default()).map_err(|source| {
                AblationError::Train {
                    row: name.clone(),
                    source,
                }
            })?;
            let ck = out.checkpoint;
            let eval_err = |source| AblationError::Eval {
                row: name.clone(),
                source,
            };
            let model = ck.model().map_err(|e| eval_err(e.into()))?;
            let report = evaluate_model(&model, &ck.params, eval_scenes).map_err(eval_err)?;
            Ok((name.clone(), report))
        })
        .collect()
}

/// The standard six rows: one-stage, the full model without each stage in
/// turn, and the full model.
pub fn standard_rows() -> Vec<(String, Topology)> {
    Topology::ablation_rows()
        .into_iter()
        .map(|(n, t)| (n.to_string(), t))
        .collect()
}
