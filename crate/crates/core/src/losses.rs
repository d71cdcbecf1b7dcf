//! Training objectives: max-margin scoring with a Brier term, best-mode
//! regression, allocation regression over every branch, and the endpoint
//! loss, combined per training stage.
//!
//! Every loss is built on a [`Tape`] from constant masks, so the same code
//! serves training and the value-level helpers. The best mode `k̂` of an
//! agent is the branch closest to the ground truth at its last valid future
//! step; agents without any valid future step are skipped. Each term is
//! normalized by batch totals:
//!
//! * scoring: `N·K` for the hinge and `N` for the Brier term (`N` = agents
//!   with a target),
//! * regression: the number of valid future steps (times `K` for the
//!   allocation term),
//! * endpoint: the number of agents whose final step is valid.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::net::Prediction;
use crate::scene::{Future, Vec2};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossStage {
    /// Scoring plus best-mode regression.
    Warmup,
    /// Adds the allocation and endpoint terms.
    Allocation,
}

impl fmt::Display for LossStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossStage::Warmup => "warmup",
            LossStage::Allocation => "allocation",
        })
    }
}

impl FromStr for LossStage {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warmup" => Ok(LossStage::Warmup),
            "allocation" => Ok(LossStage::Allocation),
            other => Err(LossError::Config(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Hinge margin.
    pub epsilon: f64,
    /// Brier-term weight.
    pub eta: f64,
    /// Allocation numerator `ζ` in `ζ / (ς + ‖Δp‖²)`.
    pub zeta: f64,
    /// Allocation offset `ς`.
    pub varsigma: f64,
    /// Allocation-term weight in the second stage.
    pub alpha: f64,
    /// Endpoint-term weight in the second stage.
    pub beta: f64,
    pub stage: LossStage,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            eta: 2.0,
            zeta: 8.0,
            varsigma: 4.0,
            alpha: 1.0,
            beta: 0.2,
            stage: LossStage::Warmup,
        }
    }
}

impl LossConfig {
    pub fn with_stage(&self, stage: LossStage) -> Self {
        Self { stage, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("eta", self.eta), ("zeta", self.zeta), ("varsigma", self.varsigma)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(LossError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [("epsilon", self.epsilon), ("alpha", self.alpha), ("beta", self.beta)];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LossError::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Index of the endpoint closest to `gt`; ties go to the smallest index.
pub fn best_mode(endpoints: &[Vec2], gt: Vec2) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, p) in endpoints.iter().enumerate() {
        let d = dist(*p, gt);
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Softmax over branches of `ζ / (ς + e²)` for endpoint errors `e`.
pub fn allocation_weights(errors: &[f64], config: &LossConfig) -> Vec<f64> {
    let f: Vec<f64> = errors.iter().map(|e| config.zeta / (config.varsigma + e * e)).collect();
    let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = f.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|v| v / z).collect()
}

fn dist(a: Vec2, b: Vec2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Values of every term and of the stage's total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    pub alloc: f64,
    pub endpoint: f64,
    pub total: f64,
}

/// The differentiable total plus the value of each term.
pub struct LossTerms {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Best mode and allocation weights of one agent.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentPlan {
    pub best: usize,
    pub weights: Vec<f64>,
}

/// Per-agent targeting decisions taken from prediction values. They enter
/// the losses as constants: neither the choice of `k̂` nor the allocation
/// weights carry gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct LossPlan {
    pub agents: Vec<Option<AgentPlan>>,
}

impl LossPlan {
    /// Plans from trajectory values `[K·N, 2F]` (k-major).
    pub fn new(trajectories: &Tensor, targets: &[Option<&Future>], config: &LossConfig) -> Result<Self> {
        let n = targets.len();
        let (rows, cols) = (trajectories.rows(), trajectories.cols());
        if n == 0 || rows % n != 0 || cols % 2 != 0 {
            return Err(LossError::Shape(format!(
                "{n} targets, trajectories {:?}",
                trajectories.shape()
            )));
        }
        let (k, f) = (rows / n, cols / 2);
        let mut agents = Vec::with_capacity(n);
        for (i, target) in targets.iter().enumerate() {
            let plan = match target {
                Some(fut) if fut.positions.len() != f || fut.validity.len() != f => {
                    return Err(LossError::Shape(format!(
                        "agent {i}: future has {} steps, predictions {f}",
                        fut.positions.len()
                    )));
                }
                Some(fut) => fut.validity.iter().rposition(|v| *v).map(|last| {
                    let gt = fut.positions[last];
                    let ends: Vec<Vec2> = (0..k)
                        .map(|m| {
                            let row = trajectories.row(m * n + i);
                            [row[2 * last], row[2 * last + 1]]
                        })
                        .collect();
                    let errors: Vec<f64> = ends.iter().map(|p| dist(*p, gt)).collect();
                    AgentPlan {
                        best: best_mode(&ends, gt),
                        weights: allocation_weights(&errors, config),
                    }
                }),
                None => None,
            };
            agents.push(plan);
        }
        Ok(Self { agents })
    }
}

/// Builds every loss term for trajectories `[K·N, 2F]` (k-major) and scores
/// `[N, K]`. `targets[i]` is agent `i`'s ground truth, if any.
pub fn loss_on_tape(
    t: &mut Tape,
    trajectories: Var,
    scores: Var,
    targets: &[Option<&Future>],
    config: &LossConfig,
) -> Result<LossTerms> {
    config.validate()?;
    let plan = LossPlan::new(t.value(trajectories), targets, config)?;
    loss_with_plan(t, trajectories, scores, targets, &plan, config)
}

/// As [`loss_on_tape`] with the best modes and allocation weights fixed by
/// `plan`.
pub fn loss_with_plan(
    t: &mut Tape,
    trajectories: Var,
    scores: Var,
    targets: &[Option<&Future>],
    plan: &LossPlan,
    config: &LossConfig,
) -> Result<LossTerms> {
    config.validate()?;
    let (n, k) = (t.value(scores).rows(), t.value(scores).cols());
    let traj = t.value(trajectories);
    if n != targets.len() || plan.agents.len() != n || traj.rows() != n * k || traj.cols() % 2 != 0 {
        return Err(LossError::Shape(format!(
            "{} targets, scores {:?}, trajectories {:?}",
            targets.len(),
            t.value(scores).shape(),
            traj.shape()
        )));
    }
    let f = traj.cols() / 2;
    let plans = &plan.agents;
    let best: Vec<Option<usize>> = plans.iter().map(|p| p.as_ref().map(|p| p.best)).collect();
    let cls = cls_on_tape(t, scores, &best, config)?;

    let n_steps: usize = targets
        .iter()
        .zip(plans.iter())
        .filter(|(_, p)| p.is_some())
        .map(|(f, _)| f.unwrap().valid_steps())
        .sum();
    let n_end = targets
        .iter()
        .zip(plans.iter())
        .filter(|(f, p)| p.is_some() && f.unwrap().endpoint().is_some())
        .count();
    let width = 2 * f;
    let mut gt = vec![0.0; n * k * width];
    let mut m_reg = vec![0.0; n * k * width];
    let mut m_alloc = vec![0.0; n * k * width];
    let mut m_end = vec![0.0; n * k * width];
    for (i, (target, plan)) in targets.iter().zip(plans.iter()).enumerate() {
        let (Some(fut), Some(plan)) = (target, plan) else {
            continue;
        };
        for m in 0..k {
            let row = (m * n + i) * width;
            for s in 0..f {
                if !fut.validity[s] {
                    continue;
                }
                for c in 0..2 {
                    let at = row + 2 * s + c;
                    gt[at] = fut.positions[s][c];
                    m_alloc[at] = plan.weights[m] / (k * n_steps) as f64;
                    if m == plan.best {
                        m_reg[at] = 1.0 / n_steps as f64;
                        if s == f - 1 {
                            m_end[at] = 1.0 / n_end as f64;
                        }
                    }
                }
            }
        }
    }
    let shape = [n * k, width];
    let gt = t.constant(Tensor::new(shape.to_vec(), gt).expect("sized above"));
    let diff = t.sub(trajectories, gt)?;
    let phi = t.smooth_l1(diff)?;
    let sq = t.square(diff)?;
    let mut masked_sum = |src: Var, mask: Vec<f64>| -> Result<Var> {
        let mask = t.constant(Tensor::new(shape.to_vec(), mask).expect("sized above"));
        let x = t.mul(src, mask)?;
        Ok(t.sum(x)?)
    };
    let reg = masked_sum(phi, m_reg)?;
    let alloc = masked_sum(phi, m_alloc)?;
    let endpoint = masked_sum(sq, m_end)?;

    let mut total = t.add(cls, reg)?;
    if config.stage == LossStage::Allocation {
        let a = t.scale(alloc, config.alpha)?;
        let b = t.scale(endpoint, config.beta)?;
        total = t.add(total, a)?;
        total = t.add(total, b)?;
    }
    Ok(LossTerms {
        total,
        breakdown: LossBreakdown {
            cls: t.scalar(cls),
            reg: t.scalar(reg),
            alloc: t.scalar(alloc),
            endpoint: t.scalar(endpoint),
            total: t.scalar(total),
        },
    })
}

/// Hinge over non-best scores plus the Brier term `η (1 − s^k̂)²`, once per
/// agent. Rows without a best mode are ignored.
fn cls_on_tape(t: &mut Tape, scores: Var, best: &[Option<usize>], config: &LossConfig) -> Result<Var> {
    let (n, k) = (t.value(scores).rows(), t.value(scores).cols());
    let count = best.iter().flatten().count();
    let mut onehot = vec![0.0; n * k];
    let mut others = vec![0.0; n * k];
    let mut brier = vec![0.0; n];
    for (i, b) in best.iter().enumerate() {
        let Some(b) = b else { continue };
        for m in 0..k {
            if m == *b {
                onehot[i * k + m] = 1.0;
            } else {
                others[i * k + m] = 1.0 / (count * k) as f64;
            }
        }
        brier[i] = config.eta / count as f64;
    }
    let onehot = t.constant(Tensor::matrix(n, k, onehot));
    let others = t.constant(Tensor::matrix(n, k, others));
    let brier = t.constant(Tensor::matrix(n, 1, brier));

    let picked = t.mul(scores, onehot)?;
    let s_best = t.row_sum(picked)?;
    let s_best_k = t.broadcast_cols(s_best, k)?;
    let gap = t.sub(scores, s_best_k)?;
    let gap = t.offset(gap, config.epsilon)?;
    let hinge = t.relu(gap)?;
    let hinge = t.mul(hinge, others)?;
    let hinge = t.sum(hinge)?;
    let miss = t.scale(s_best, -1.0)?;
    let miss = t.offset(miss, 1.0)?;
    let miss = t.square(miss)?;
    let miss = t.mul(miss, brier)?;
    let miss = t.sum(miss)?;
    Ok(t.add(hinge, miss)?)
}

/// Scoring loss for `[N][K]` scores and the best mode of each agent.
pub fn cls_loss(scores: &[Vec<f64>], best: &[usize], config: &LossConfig) -> Result<f64> {
    config.validate()?;
    let k = scores.first().map_or(0, Vec::len);
    if scores.len() != best.len() || scores.iter().any(|s| s.len() != k) || best.iter().any(|b| *b >= k) {
        return Err(LossError::Shape("scores and best modes disagree".into()));
    }
    let mut t = Tape::new();
    let s = t.constant(Tensor::matrix(scores.len(), k, scores.concat()));
    let best: Vec<Option<usize>> = best.iter().copied().map(Some).collect();
    let v = cls_on_tape(&mut t, s, &best, config)?;
    Ok(t.scalar(v))
}

/// Every loss term for value-level predictions, one per agent.
pub fn loss_breakdown(predictions: &[Prediction], targets: &[Future], config: &LossConfig) -> Result<LossBreakdown> {
    if predictions.len() != targets.len() {
        return Err(LossError::Shape(format!(
            "{} predictions, {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let n = predictions.len();
    let k = predictions.first().map_or(0, Prediction::k);
    let f = predictions
        .first()
        .and_then(|p| p.trajectories.first())
        .map_or(0, Vec::len);
    if predictions
        .iter()
        .any(|p| p.k() != k || p.trajectories.len() != k || p.trajectories.iter().any(|tr| tr.len() != f))
    {
        return Err(LossError::Shape("predictions differ in K or horizon".into()));
    }
    let mut traj = Vec::with_capacity(n * k * 2 * f);
    for m in 0..k {
        for p in predictions {
            traj.extend(p.trajectories[m].iter().flat_map(|q| [q[0], q[1]]));
        }
    }
    let scores: Vec<f64> = predictions.iter().flat_map(|p| p.scores.iter().copied()).collect();
    let mut t = Tape::new();
    let traj = t.constant(Tensor::matrix(n * k, 2 * f, traj));
    let scores = t.constant(Tensor::matrix(n, k, scores));
    let targets: Vec<Option<&Future>> = targets.iter().map(Some).collect();
    Ok(loss_on_tape(&mut t, traj, scores, &targets, config)?.breakdown)
}

/// Best-mode smooth-L1 regression.
pub fn reg_l1(predictions: &[Prediction], targets: &[Future]) -> Result<f64> {
    Ok(loss_breakdown(predictions, targets, &LossConfig::default())?.reg)
}

/// Allocation-weighted regression over every branch.
pub fn reg_allocation(predictions: &[Prediction], targets: &[Future], config: &LossConfig) -> Result<f64> {
    Ok(loss_breakdown(predictions, targets, config)?.alloc)
}

/// Squared endpoint error of the best mode.
pub fn reg_endpoint(predictions: &[Prediction], targets: &[Future]) -> Result<f64> {
    Ok(loss_breakdown(predictions, targets, &LossConfig::default())?.endpoint)
}

/// The stage's total objective.
pub fn total_loss(predictions: &[Prediction], targets: &[Future], config: &LossConfig) -> Result<f64> {
    Ok(loss_breakdown(predictions, targets, config)?.total)
}

#[cfg(test)]
mod tests;
