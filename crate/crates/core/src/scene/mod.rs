//! Agents, lane maps and scenes in the vectorized representation.
//!
//! A history of `T` positions becomes a `T x 2` displacement matrix plus a
//! validity column. Row 1 is always zero; row `t` holds `p(t) - p(t-1)` when
//! both positions were observed and zero otherwise. Absolute positions are
//! kept alongside because neighbour selection needs real geometry.

mod frame;
pub mod io;
mod lane_graph;

use thiserror::Error;

pub use frame::{to_focal_frame, FocalFrame, HeadingSource, RigidTransform};
pub use lane_graph::{build_lane_graph, Adjacency, LaneGraph, LaneSegment, RuleFlags, DILATIONS};

pub type Vec2 = [f64; 2];

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("history is empty")]
    EmptyHistory,
    #[error("history has no valid step")]
    NoValidStep,
    #[error("{positions} positions but {validity} validity flags")]
    LengthMismatch { positions: usize, validity: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("lane successor pair ({from}, {to}) out of range for {n} segments")]
    LaneIndex { from: usize, to: usize, n: usize },
    #[error("lane segment {0} lists itself as a successor")]
    SelfLoop(usize),
    #[error("rule flags must be {width} binary values, got {0:?}", width = RuleFlags::WIDTH)]
    RuleFlags(Vec<u8>),
    #[error("focal index {focal} out of range for {agents} agents")]
    FocalIndex { focal: usize, agents: usize },
    #[error("scene has no agents")]
    NoAgents,
    #[error("agent {agent} has {got} history steps, expected {expected}")]
    HistoryLength { agent: usize, got: usize, expected: usize },
    #[error("future {agent}: {got} steps, expected horizon {expected}")]
    FutureLength { agent: usize, got: usize, expected: usize },
    #[error("{got} futures for {agents} agents")]
    FutureCount { got: usize, agents: usize },
    #[error("focal agent is not observed at the last history step")]
    FocalNotObserved,
}

/// One agent's observed past in the vectorized encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentHistory {
    displacements: Vec<Vec2>,
    validity: Vec<bool>,
    positions: Vec<Vec2>,
    last_velocity: Vec2,
}

/// Encodes raw positions as displacements with validity flags.
pub fn preprocess_history(positions: &[Vec2], validity: &[bool]) -> Result<AgentHistory, SceneError> {
    if positions.is_empty() {
        return Err(SceneError::EmptyHistory);
    }
    if positions.len() != validity.len() {
        return Err(SceneError::LengthMismatch {
            positions: positions.len(),
            validity: validity.len(),
        });
    }
    if !validity.iter().any(|v| *v) {
        return Err(SceneError::NoValidStep);
    }
    if positions
        .iter()
        .zip(validity)
        .any(|(p, v)| *v && !(p[0].is_finite() && p[1].is_finite()))
    {
        return Err(SceneError::NonFinite("history position"));
    }
    let mut displacements = vec![[0.0, 0.0]; positions.len()];
    for t in 1..positions.len() {
        if validity[t] && validity[t - 1] {
            displacements[t] = [
                positions[t][0] - positions[t - 1][0],
                positions[t][1] - positions[t - 1][1],
            ];
        }
    }
    let last_velocity = estimate_velocity(positions, validity);
    // Unobserved rows carry no position information.
    let positions = positions
        .iter()
        .zip(validity)
        .map(|(p, v)| if *v { *p } else { [0.0, 0.0] })
        .collect();
    Ok(AgentHistory {
        displacements,
        validity: validity.to_vec(),
        positions,
        last_velocity,
    })
}

/// Per-step velocity from the last two observed positions.
fn estimate_velocity(positions: &[Vec2], validity: &[bool]) -> Vec2 {
    let mut seen = (0..positions.len()).rev().filter(|t| validity[*t]);
    match (seen.next(), seen.next()) {
        (Some(b), Some(a)) => {
            let dt = (b - a) as f64;
            [
                (positions[b][0] - positions[a][0]) / dt,
                (positions[b][1] - positions[a][1]) / dt,
            ]
        }
        _ => [0.0, 0.0],
    }
}

impl AgentHistory {
    pub fn len(&self) -> usize {
        self.validity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.validity.is_empty()
    }

    pub fn displacements(&self) -> &[Vec2] {
        &self.displacements
    }

    pub fn validity(&self) -> &[bool] {
        &self.validity
    }

    pub fn positions(&self) -> &[Vec2] {
        &self.positions
    }

    pub fn last_velocity(&self) -> Vec2 {
        self.last_velocity
    }

    /// Position at the last history step; extrapolated from the last
    /// observation when that step is missing.
    pub fn current_position(&self) -> Vec2 {
        let t_last = self.len() - 1;
        let seen = (0..self.len()).rev().find(|t| self.validity[*t]).unwrap_or(t_last);
        let gap = (t_last - seen) as f64;
        let p = self.positions[seen];
        [p[0] + gap * self.last_velocity[0], p[1] + gap * self.last_velocity[1]]
    }

    /// Rebuilds the encoding from (possibly edited) raw positions.
    pub(crate) fn reencode(&self, positions: &[Vec2], validity: &[bool]) -> Result<AgentHistory, SceneError> {
        debug_assert_eq!(positions.len(), self.len());
        preprocess_history(positions, validity)
    }
}

/// Ground-truth future of one agent.
#[derive(Clone, Debug, PartialEq)]
pub struct Future {
    pub positions: Vec<Vec2>,
    pub validity: Vec<bool>,
}

impl Future {
    pub fn fully_observed(positions: Vec<Vec2>) -> Self {
        let validity = vec![true; positions.len()];
        Self { positions, validity }
    }

    pub fn endpoint(&self) -> Option<Vec2> {
        match self.validity.last() {
            Some(true) => self.positions.last().copied(),
            _ => None,
        }
    }

    pub fn valid_steps(&self) -> usize {
        self.validity.iter().filter(|v| **v).count()
    }
}

/// Agents, map and (optionally) futures of one forecasting instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    id: String,
    label: Option<String>,
    agents: Vec<AgentHistory>,
    lane_graph: LaneGraph,
    focal_index: usize,
    futures: Option<Vec<Future>>,
    horizon: usize,
}

impl Scene {
    pub fn new(
        id: impl Into<String>,
        agents: Vec<AgentHistory>,
        lane_graph: LaneGraph,
        focal_index: usize,
        futures: Option<Vec<Future>>,
        horizon: usize,
    ) -> Result<Self, SceneError> {
        if agents.is_empty() {
            return Err(SceneError::NoAgents);
        }
        if focal_index >= agents.len() {
            return Err(SceneError::FocalIndex {
                focal: focal_index,
                agents: agents.len(),
            });
        }
        let t = agents[0].len();
        for (i, a) in agents.iter().enumerate() {
            if a.len() != t {
                return Err(SceneError::HistoryLength {
                    agent: i,
                    got: a.len(),
                    expected: t,
                });
            }
        }
        if let Some(f) = &futures {
            if f.len() != agents.len() {
                return Err(SceneError::FutureCount {
                    got: f.len(),
                    agents: agents.len(),
                });
            }
            for (i, fut) in f.iter().enumerate() {
                if fut.positions.len() != horizon || fut.validity.len() != horizon {
                    return Err(SceneError::FutureLength {
                        agent: i,
                        got: fut.positions.len().min(fut.validity.len()),
                        expected: horizon,
                    });
                }
            }
        }
        Ok(Self {
            id: id.into(),
            label: None,
            agents,
            lane_graph,
            focal_index,
            futures,
            horizon,
        })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Free-form tag, e.g. the scenario kind of a generated scene.
    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }

    pub fn agents(&self) -> &[AgentHistory] {
        &self.agents
    }

    pub fn lane_graph(&self) -> &LaneGraph {
        &self.lane_graph
    }

    pub fn focal_index(&self) -> usize {
        self.focal_index
    }

    pub fn focal(&self) -> &AgentHistory {
        &self.agents[self.focal_index]
    }

    pub fn futures(&self) -> Option<&[Future]> {
        self.futures.as_deref()
    }

    /// Future steps `F`.
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// History steps `T`.
    pub fn history_len(&self) -> usize {
        self.agents[0].len()
    }

    pub fn without_futures(&self) -> Scene {
        Scene {
            futures: None,
            ..self.clone()
        }
    }

    /// Applies a rigid transform to every position, future point and lane
    /// segment; displacements and velocities are re-derived from the moved
    /// positions.
    pub fn transformed(&self, tf: &RigidTransform) -> Scene {
        self.map_geometry(|p| tf.apply_point(p), |v| tf.apply_vector(v))
            .expect("rigid transforms keep histories valid")
    }

    /// Mirror image across the x-axis: every y-coordinate is negated and
    /// left/right turn flags swap. Applying it twice restores the scene.
    pub fn reflected_y(&self) -> Scene {
        let mut s = self
            .map_geometry(|p| [p[0], -p[1]], |v| [v[0], -v[1]])
            .expect("reflection keeps histories valid");
        s.lane_graph = s.lane_graph.map_segments(|seg| LaneSegment {
            rule_flags: seg.rule_flags.mirrored(),
            ..seg.clone()
        });
        s
    }

    pub(crate) fn map_geometry(
        &self,
        point: impl Fn(Vec2) -> Vec2,
        vector: impl Fn(Vec2) -> Vec2,
    ) -> Result<Scene, SceneError> {
        let agents = self
            .agents
            .iter()
            .map(|a| {
                let moved: Vec<Vec2> = a.positions.iter().map(|p| point(*p)).collect();
                a.reencode(&moved, &a.validity)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let lane_graph = self.lane_graph.map_segments(|s| LaneSegment {
            delta: vector(s.delta),
            center: point(s.center),
            rule_flags: s.rule_flags,
        });
        let futures = self.futures.as_ref().map(|fs| {
            fs.iter()
                .map(|f| Future {
                    positions: f.positions.iter().map(|p| point(*p)).collect(),
                    validity: f.validity.clone(),
                })
                .collect()
        });
        Ok(Scene {
            agents,
            lane_graph,
            futures,
            ..self.clone()
        })
    }

    pub(crate) fn with_agents(&self, agents: Vec<AgentHistory>) -> Scene {
        Scene { agents, ..self.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_velocity_history() {
        let h = preprocess_history(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], &[true; 3]).unwrap();
        assert_eq!(h.displacements(), &[[0.0, 0.0], [1.0, 0.0], [1.0, 0.0]]);
        assert_eq!(h.validity(), &[true, true, true]);
        assert_eq!(h.last_velocity(), [1.0, 0.0]);
    }

    #[test]
    fn missing_step_zeroes_both_adjacent_rows() {
        let h = preprocess_history(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], &[true, false, true]).unwrap();
        assert_eq!(h.displacements(), &[[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]]);
        assert_eq!(h.validity(), &[true, false, true]);
        // Velocity falls back to the last two observed positions.
        assert_eq!(h.last_velocity(), [1.0, 0.0]);
    }

    #[test]
    fn single_point_history() {
        let h = preprocess_history(&[[4.0, 2.0]], &[true]).unwrap();
        assert_eq!(h.displacements(), &[[0.0, 0.0]]);
        assert_eq!(h.validity(), &[true]);
        assert_eq!(h.last_velocity(), [0.0, 0.0]);
    }

    #[test]
    fn empty_history_rejected() {
        assert_eq!(preprocess_history(&[], &[]), Err(SceneError::EmptyHistory));
        assert_eq!(
            preprocess_history(&[[0.0, 0.0]], &[false]),
            Err(SceneError::NoValidStep)
        );
    }

    #[test]
    fn extrapolates_missing_last_step() {
        let h = preprocess_history(&[[0.0, 0.0], [1.0, 0.0], [9.0, 9.0]], &[true, true, false]).unwrap();
        assert_eq!(h.current_position(), [2.0, 0.0]);
    }

    proptest! {
        #[test]
        fn displacements_reconstruct_span(
            pts in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..30),
            first_valid in 0usize..5,
        ) {
            let positions: Vec<Vec2> = pts.iter().map(|(x, y)| [*x, *y]).collect();
            let n = positions.len();
            let first = first_valid.min(n - 1);
            let validity: Vec<bool> = (0..n).map(|t| t >= first).collect();
            let h = preprocess_history(&positions, &validity).unwrap();
            prop_assert_eq!(h.displacements()[0], [0.0, 0.0]);
            let sum = h.displacements().iter().fold([0.0, 0.0], |a, d| [a[0] + d[0], a[1] + d[1]]);
            let span = [positions[n - 1][0] - positions[first][0], positions[n - 1][1] - positions[first][1]];
            prop_assert!((sum[0] - span[0]).abs() < 1e-9 && (sum[1] - span[1]).abs() < 1e-9);
            for (d, v) in h.displacements().iter().zip(h.validity()) {
                if !v { prop_assert_eq!(*d, [0.0, 0.0]); }
            }
            if n >= 2 {
                prop_assert_eq!(h.last_velocity(), h.displacements()[n - 1]);
            }
        }
    }
}
