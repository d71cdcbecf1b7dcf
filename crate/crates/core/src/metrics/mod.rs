//! Displacement metrics, per-branch diagnostics, the metrics table and the
//! self-ensemble clustering step.
//!
//! Metrics are computed per scene on the focal agent and averaged over
//! scenes. The best mode `k̂` of a scene is the branch with the smallest
//! final displacement error (ties go to the smallest index).

mod ablation;
mod ensemble;

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::ParamStore;
use crate::net::{Model, NetError, Prediction};
use crate::scene::{to_focal_frame, Future, Scene, SceneError, Vec2};

pub use ablation::{run_ablation, standard_rows, AblationError};
pub use ensemble::{ensemble_cluster, KMEANS_ITERATIONS};

/// A scene misses when its minFDE exceeds this many meters.
pub const MISS_THRESHOLD: f64 = 2.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("scene {scene}: {got} modes, expected {expected}")]
    ModeCount { scene: usize, got: usize, expected: usize },
    #[error("scene {scene}: prediction has {got} steps, ground truth {expected}")]
    Horizon { scene: usize, got: usize, expected: usize },
    #[error("scene {scene}: ground-truth endpoint is not valid")]
    InvalidEndpoint { scene: usize },
    #[error("{predictions} predictions for {targets} ground truths")]
    Count { predictions: usize, targets: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("ensemble needs at least {needed} member modes, got {got}")]
    TooFewModes { needed: usize, got: usize },
    #[error("scene {0} has no ground-truth future")]
    MissingFuture(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Net(#[from] NetError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Diagnostics of one prediction branch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchStats {
    /// Model order of the branch.
    pub branch: usize,
    /// Fraction of scenes in which this branch is the best mode.
    pub hit_rate: f64,
    /// Mean minFDE over the scenes in which this branch is the best mode;
    /// `None` if it never is.
    pub fde_when_best: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_scenes: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub brier_min_fde: f64,
    pub miss_rate: f64,
    /// One entry per branch, in model order.
    pub per_branch: Vec<BranchStats>,
}

impl EvalReport {
    pub fn k(&self) -> usize {
        self.per_branch.len()
    }

    /// Branches ordered by their FDE when best (never-best branches last,
    /// then model order).
    pub fn sorted_branches(&self) -> Vec<BranchStats> {
        let mut v = self.per_branch.clone();
        v.sort_by(|a, b| match (a.fde_when_best, b.fde_when_best) {
            (Some(x), Some(y)) => x.total_cmp(&y).then(a.branch.cmp(&b.branch)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => a.branch.cmp(&b.branch),
        });
        v
    }

    pub fn min_hit_rate(&self) -> f64 {
        self.per_branch.iter().map(|b| b.hit_rate).fold(f64::INFINITY, f64::min)
    }
}

fn dist(a: Vec2, b: Vec2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Per-scene numbers behind a report.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneMetrics {
    pub min_ade: f64,
    pub min_fde: f64,
    pub best: usize,
    pub brier_min_fde: f64,
}

/// Metrics of one prediction against one ground truth (valid endpoint
/// required; the ADE averages over valid steps).
pub fn scene_metrics(prediction: &Prediction, gt: &Future) -> Option<SceneMetrics> {
    let end = gt.endpoint()?;
    let steps = gt.valid_steps() as f64;
    let mut min_ade = f64::INFINITY;
    let (mut best, mut min_fde) = (0, f64::INFINITY);
    for (k, traj) in prediction.trajectories.iter().enumerate() {
        let total: f64 = traj
            .iter()
            .zip(&gt.positions)
            .zip(&gt.validity)
            .filter(|(_, v)| **v)
            .map(|((p, q), _)| dist(*p, *q))
            .sum();
        min_ade = min_ade.min(total / steps);
        let fde = dist(*traj.last().expect("non-empty trajectory"), end);
        if fde < min_fde {
            best = k;
            min_fde = fde;
        }
    }
    let miss_score = 1.0 - prediction.scores[best];
    Some(SceneMetrics {
        min_ade,
        min_fde,
        best,
        brier_min_fde: min_fde + miss_score * miss_score,
    })
}

/// Dataset metrics for one prediction per scene.
pub fn evaluate(predictions: &[Prediction], targets: &[Future]) -> Result<EvalReport> {
    if predictions.len() != targets.len() {
        return Err(MetricsError::Count {
            predictions: predictions.len(),
            targets: targets.len(),
        });
    }
    let k = predictions.first().ok_or(MetricsError::Empty)?.k();
    let mut per_scene = Vec::with_capacity(predictions.len());
    for (s, (p, gt)) in predictions.iter().zip(targets).enumerate() {
        if p.k() != k || p.trajectories.len() != k {
            return Err(MetricsError::ModeCount {
                scene: s,
                got: p.k(),
                expected: k,
            });
        }
        if let Some(tr) = p.trajectories.iter().find(|tr| tr.len() != gt.positions.len()) {
            return Err(MetricsError::Horizon {
                scene: s,
                got: tr.len(),
                expected: gt.positions.len(),
            });
        }
        per_scene.push(scene_metrics(p, gt).ok_or(MetricsError::InvalidEndpoint { scene: s })?);
    }
    Ok(aggregate(&per_scene, k))
}

/// Scene averages of per-scene metrics.
pub fn aggregate(per_scene: &[SceneMetrics], k: usize) -> EvalReport {
    let n = per_scene.len();
    let mean = |f: &dyn Fn(&SceneMetrics) -> f64| per_scene.iter().map(f).sum::<f64>() / n as f64;
    let per_branch = (0..k)
        .map(|b| {
            let hits: Vec<f64> = per_scene.iter().filter(|m| m.best == b).map(|m| m.min_fde).collect();
            BranchStats {
                branch: b,
                hit_rate: hits.len() as f64 / n as f64,
                fde_when_best: (!hits.is_empty()).then(|| hits.iter().sum::<f64>() / hits.len() as f64),
            }
        })
        .collect();
    EvalReport {
        n_scenes: n,
        min_ade: mean(&|m| m.min_ade),
        min_fde: mean(&|m| m.min_fde),
        brier_min_fde: mean(&|m| m.brier_min_fde),
        miss_rate: mean(&|m| if m.min_fde > MISS_THRESHOLD { 1.0 } else { 0.0 }),
        per_branch,
    }
}

/// Focal-agent predictions in each scene's own frame, batched `batch` scenes
/// per forward pass.
pub fn predict_focal(model: &Model, params: &ParamStore, scenes: &[Scene], batch: usize) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(batch.max(1)) {
        let framed = chunk
            .iter()
            .map(to_focal_frame)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let refs: Vec<&Scene> = framed.iter().map(|(s, _)| s).collect();
        let preds = model.predict_batch(params, &refs)?;
        for ((scene, frame), agents) in framed.iter().zip(preds) {
            let back = frame.transform.inverse();
            out.push(agents[scene.focal_index()].map_points(|p| back.apply_point(p)));
        }
    }
    Ok(out)
}

/// Focal ground truths of scenes, in each scene's own frame.
pub fn focal_targets(scenes: &[Scene]) -> Result<Vec<Future>> {
    scenes
        .iter()
        .map(|s| {
            s.futures()
                .map(|f| f[s.focal_index()].clone())
                .ok_or_else(|| MetricsError::MissingFuture(s.id().to_string()))
        })
        .collect()
}

/// Evaluates a model on the focal agents of `scenes`.
pub fn evaluate_model(model: &Model, params: &ParamStore, scenes: &[Scene]) -> Result<EvalReport> {
    let preds = predict_focal(model, params, scenes, 16)?;
    evaluate(&preds, &focal_targets(scenes)?)
}

/// Single-mode prediction extrapolating the focal agent's last velocity.
pub fn constant_velocity(scene: &Scene) -> Prediction {
    let focal = scene.focal();
    let p = focal.current_position();
    let v = focal.last_velocity();
    Prediction {
        trajectories: vec![(1..=scene.horizon())
            .map(|t| [p[0] + v[0] * t as f64, p[1] + v[1] * t as f64])
            .collect()],
        scores: vec![1.0],
    }
}

/// Writes the metrics table: header plus one row per named report. Branch
/// columns run to the largest K among the rows; missing values are `NA`.
pub fn write_metrics_csv<W: Write>(mut out: W, rows: &[(String, EvalReport)]) -> io::Result<()> {
    let k = rows.iter().map(|(_, r)| r.k()).max().unwrap_or(0);
    let mut header = vec![
        "name".to_string(),
        "minADE".into(),
        "minFDE".into(),
        "brier_minFDE".into(),
        "MR".into(),
    ];
    header.extend((1..=k).map(|i| format!("hit_{i}")));
    header.extend((1..=k).map(|i| format!("fde_{i}")));
    writeln!(out, "{}", header.join(","))?;
    for (name, r) in rows {
        let mut cells = vec![
            name.replace(',', ";"),
            r.min_ade.to_string(),
            r.min_fde.to_string(),
            r.brier_min_fde.to_string(),
            r.miss_rate.to_string(),
        ];
        let branch = |i: usize| r.per_branch.get(i);
        cells.extend((0..k).map(|i| branch(i).map_or("NA".into(), |b| b.hit_rate.to_string())));
        cells.extend((0..k).map(|i| {
            branch(i)
                .and_then(|b| b.fde_when_best)
                .map_or("NA".into(), |v| v.to_string())
        }));
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}
