//! The progressive map-agent interaction network.
//!
//! Pipeline per scene (all agents at once, focal frame):
//!
//! 1. agent encoder (LSTM) → `a` `[N, d_a]`
//! 2. map encoder (node MLPs, agent pooling, lane convolutions) → `m` `[M, d_m]`
//! 3. `M2A_e`: map → agent graph convolution
//! 4. `A2A`: agent → agent graph convolution within a radius
//! 5. `M2A_s`: map → agent graph convolution
//! 6. mode differentiation: `b_k = a + MLP_k(a)`, stacked k-major `[K·N, d_a]`
//! 7. `M2A_m`: map → branch graph convolution, parameters shared across modes
//! 8. per-mode decoders emit cumulative displacements from `p(T)`; a shared
//!    score head on `[b_k, a]` gives logits normalised across modes.
//!
//! Map neighbours of an agent lie in the closed ball around
//! `p(T) + v · lookahead` with radius `|v · lookahead| + delta`.
//!
//! Trajectory rows are k-major: row `k·N + i` holds mode `k` of agent `i` as
//! `[x1, y1, x2, y2, …]`.

mod encoders;
mod graph_conv;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Init, Mlp, ParamError, ParamStore, Tape, Tensor, Var};
use crate::scene::{AgentHistory, LaneGraph, LaneSegment, Scene, Vec2};

pub use encoders::{AgentEncoder, LaneRelations, MapEncoder, LANE_CONV_LAYERS};
pub use graph_conv::{ConvOutput, Edges, GraphConv};

/// Geometric inputs (positions, offsets, lane vectors) are multiplied by
/// this before entering a layer, keeping typical magnitudes near one.
pub const GEOMETRY_SCALE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("scene {scene} has {got} history steps, the model expects {expected}")]
    HistoryLength { scene: String, got: usize, expected: usize },
    #[error("unknown topology flag {0:?} (expected m2a_e, a2a, m2a_s, m2a_m, full or one-stage)")]
    Topology(String),
}

pub type Result<T> = std::result::Result<T, NetError>;

/// Which interaction stages are present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Topology {
    pub m2a_e: bool,
    pub a2a: bool,
    pub m2a_s: bool,
    pub m2a_m: bool,
}

impl Topology {
    pub const FULL: Topology = Topology {
        m2a_e: true,
        a2a: true,
        m2a_s: true,
        m2a_m: true,
    };

    /// A single map interaction before the social stage.
    pub const ONE_STAGE: Topology = Topology {
        m2a_e: true,
        a2a: true,
        m2a_s: false,
        m2a_m: false,
    };

    /// The six rows of the component ablation: one-stage, then the full
    /// model without each stage in turn, then the full model.
    pub fn ablation_rows() -> [(&'static str, Topology); 6] {
        let full = Topology::FULL;
        [
            ("one-stage", Topology::ONE_STAGE),
            ("w/o M2A_m", Topology { m2a_m: false, ..full }),
            ("w/o M2A_s", Topology { m2a_s: false, ..full }),
            ("w/o A2A", Topology { a2a: false, ..full }),
            ("w/o M2A_e", Topology { m2a_e: false, ..full }),
            ("full", full),
        ]
    }
}

impl fmt::Display for Topology {
    /// Comma list of enabled stages, e.g. `m2a_e,a2a`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.m2a_e, "m2a_e"),
            (self.a2a, "a2a"),
            (self.m2a_s, "m2a_s"),
            (self.m2a_m, "m2a_m"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for Topology {
    type Err = NetError;

    /// Accepts `full`, `one-stage`, or a comma list of stage names; an empty
    /// string disables every stage.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => return Ok(Topology::FULL),
            "one-stage" => return Ok(Topology::ONE_STAGE),
            _ => {}
        }
        let mut t = Topology {
            m2a_e: false,
            a2a: false,
            m2a_s: false,
            m2a_m: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "m2a_e" => t.m2a_e = true,
                "a2a" => t.a2a = true,
                "m2a_s" => t.m2a_s = true,
                "m2a_m" => t.m2a_m = true,
                _ => return Err(NetError::Topology(part.to_string())),
            }
        }
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Agent feature width.
    pub d_a: usize,
    /// Map node feature width.
    pub d_m: usize,
    /// Number of modes.
    pub k: usize,
    pub history_steps: usize,
    pub future_steps: usize,
    /// Slack added to the map-neighbour radius, meters.
    pub delta: f64,
    /// Steps of constant-velocity lookahead for the map-neighbour ball.
    pub lookahead_steps: usize,
    /// Agent-agent interaction radius, meters.
    pub a2a_radius: f64,
    /// Radius for pooling agents onto lane segments, meters.
    pub pool_radius: f64,
    /// Hidden width of every two-layer MLP.
    pub mlp_hidden: usize,
    pub topology: Topology,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_a: 128,
            d_m: 128,
            k: 6,
            history_steps: 20,
            future_steps: 30,
            delta: 10.0,
            lookahead_steps: 25,
            a2a_radius: 100.0,
            pool_radius: 10.0,
            mlp_hidden: 128,
            topology: Topology::FULL,
        }
    }
}

impl ModelConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN as well
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(NetError::Config(m.to_string()));
        if self.k < 1 {
            return err("k must be at least 1");
        }
        if self.d_a == 0 || self.d_m == 0 || self.mlp_hidden == 0 {
            return err("feature widths must be positive");
        }
        if self.history_steps < 1 || self.future_steps < 1 {
            return err("history_steps and future_steps must be positive");
        }
        if !(self.delta > 0.0) {
            return err("delta must be positive");
        }
        if !(self.a2a_radius > 0.0) {
            return err("a2a_radius must be positive");
        }
        if !(self.pool_radius > 0.0) {
            return err("pool_radius must be positive");
        }
        Ok(())
    }
}

/// K trajectories (`F` positions each) with scores summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub trajectories: Vec<Vec<Vec2>>,
    pub scores: Vec<f64>,
}

impl Prediction {
    pub fn k(&self) -> usize {
        self.scores.len()
    }

    pub fn endpoint(&self, k: usize) -> Vec2 {
        *self.trajectories[k].last().expect("non-empty trajectory")
    }

    /// Applies a point map to every trajectory point.
    pub fn map_points(&self, f: impl Fn(Vec2) -> Vec2) -> Prediction {
        Prediction {
            trajectories: self
                .trajectories
                .iter()
                .map(|tr| tr.iter().map(|p| f(*p)).collect())
                .collect(),
            scores: self.scores.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "M2A_e")]
    M2aE,
    #[serde(rename = "M2A_s")]
    M2aS,
    #[serde(rename = "M2A_m")]
    M2aM,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::M2aE => "M2A_e",
            Stage::M2aS => "M2A_s",
            Stage::M2aM => "M2A_m",
        }
    }
}

/// Attention of one agent (and mode, for `M2A_m`) on one lane segment,
/// averaged over channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub stage: Stage,
    pub agent: usize,
    pub mode: Option<usize>,
    pub node: usize,
    pub weight: f64,
}

/// Tape handles of one forward pass.
pub struct ForwardVars {
    /// `[K·N, 2F]`, k-major.
    pub trajectories: Var,
    /// `[N, K]`, rows sum to one.
    pub scores: Var,
    pub n_agents: usize,
    pub attention: Vec<AttentionRecord>,
}

/// Predictions for every agent of a scene, in agent order.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePrediction {
    pub agents: Vec<Prediction>,
    pub attention: Vec<AttentionRecord>,
}

/// Lane segments in the closed ball around the agent's constant-velocity
/// lookahead point.
pub fn select_map_neighbors(agent: &AgentHistory, graph: &LaneGraph, config: &ModelConfig) -> Vec<usize> {
    let p = agent.current_position();
    let v = agent.last_velocity();
    let steps = config.lookahead_steps as f64;
    let d = [v[0] * steps, v[1] * steps];
    let c = [p[0] + d[0], p[1] + d[1]];
    let r = d[0].hypot(d[1]) + config.delta;
    graph
        .segments()
        .iter()
        .enumerate()
        .filter(|(_, s)| (s.center[0] - c[0]).hypot(s.center[1] - c[1]) <= r)
        .map(|(j, _)| j)
        .collect()
}

/// Map-agent edges of every agent, offsets `center − p(T)`.
pub fn map_agent_edges(scene: &Scene, config: &ModelConfig) -> Edges {
    let mut edges = Edges::default();
    let segs = scene.lane_graph().segments();
    for (i, a) in scene.agents().iter().enumerate() {
        let p = a.current_position();
        for j in select_map_neighbors(a, scene.lane_graph(), config) {
            let c = segs[j].center;
            edges.push(i, j, [c[0] - p[0], c[1] - p[1]]);
        }
    }
    edges
}

/// Agent-agent edges within `radius` (self excluded), offsets `p_j − p_i`.
pub fn agent_agent_edges(positions: &[Vec2], radius: f64) -> Edges {
    let mut edges = Edges::default();
    for (i, p) in positions.iter().enumerate() {
        for (j, q) in positions.iter().enumerate() {
            let off = [q[0] - p[0], q[1] - p[1]];
            if i != j && off[0].hypot(off[1]) <= radius {
                edges.push(i, j, off);
            }
        }
    }
    edges
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    agent_encoder: AgentEncoder,
    map_encoder: MapEncoder,
    m2a_e: Option<GraphConv>,
    a2a: Option<GraphConv>,
    m2a_s: Option<GraphConv>,
    modes: Vec<Mlp>,
    m2a_m: Option<GraphConv>,
    decoders: Vec<Mlp>,
    score: Mlp,
    /// `[2F, 2F]` upper-triangular-per-coordinate matrix turning per-step
    /// displacements into cumulative offsets.
    cumsum: Tensor,
}

impl Model {
    /// Registers every parameter under `store`. Only enabled stages get
    /// parameters.
    pub fn new(config: ModelConfig, store: &mut ParamStore, init: &mut Init) -> Result<Self> {
        config.validate()?;
        let (da, dm, h, f) = (config.d_a, config.d_m, config.mlp_hidden, config.future_steps);
        let topo = config.topology;
        let gc = |store: &mut ParamStore, init: &mut Init, on: bool, name: &str| -> Result<Option<GraphConv>> {
            Ok(if on {
                Some(GraphConv::new(store, name, da, dm, h, init)?)
            } else {
                None
            })
        };
        let agent_encoder = AgentEncoder::new(store, "agent_encoder", config.history_steps, da, init)?;
        let map_encoder = MapEncoder::new(store, "map_encoder", dm, da, h, config.pool_radius, init)?;
        let m2a_e = gc(store, init, topo.m2a_e, "m2a_e")?;
        let a2a = if topo.a2a {
            Some(GraphConv::new(store, "a2a", da, da, h, init)?)
        } else {
            None
        };
        let m2a_s = gc(store, init, topo.m2a_s, "m2a_s")?;
        let modes = (0..config.k)
            .map(|k| Mlp::new(store, &format!("modes/{k}"), (da, h, da), true, init))
            .collect::<std::result::Result<_, _>>()?;
        let m2a_m = gc(store, init, topo.m2a_m, "m2a_m")?;
        let decoders = (0..config.k)
            .map(|k| Mlp::new(store, &format!("decoder/{k}"), (da, h, 2 * f), true, init))
            .collect::<std::result::Result<_, _>>()?;
        // No output bias: it would cancel in the softmax across modes.
        let score = Mlp::new(store, "score", (2 * da, h, 1), false, init)?;
        let mut cumsum = vec![0.0; 4 * f * f];
        for s in 0..f {
            for t in s..f {
                for c in 0..2 {
                    cumsum[(2 * s + c) * 2 * f + 2 * t + c] = 1.0;
                }
            }
        }
        Ok(Self {
            config,
            agent_encoder,
            map_encoder,
            m2a_e,
            a2a,
            m2a_s,
            modes,
            m2a_m,
            decoders,
            score,
            cumsum: Tensor::matrix(2 * f, 2 * f, cumsum),
        })
    }

    /// A freshly initialised model from a seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::new(config, &mut store, &mut Init::FanIn(&mut rng))?;
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check(&self, scene: &Scene) -> Result<()> {
        if scene.history_len() != self.config.history_steps {
            return Err(NetError::HistoryLength {
                scene: scene.id().to_string(),
                got: scene.history_len(),
                expected: self.config.history_steps,
            });
        }
        Ok(())
    }

    /// `[N, d_a]` history features.
    pub fn encode_agents(&self, t: &mut Tape, p: &ParamStore, histories: &[&AgentHistory]) -> Result<Var> {
        Ok(self.agent_encoder.forward(t, p, histories)?)
    }

    /// `[M, d_m]` lane-segment features of one scene's map, or `None` for
    /// an empty map.
    pub fn encode_map(
        &self,
        t: &mut Tape,
        p: &ParamStore,
        graph: &LaneGraph,
        agents: Var,
        agent_positions: &[Vec2],
    ) -> Result<Option<Var>> {
        if graph.is_empty() {
            return Ok(None);
        }
        let rel = LaneRelations::new(graph);
        let pool = self.map_encoder.pool_edges(graph, agent_positions);
        Ok(Some(self.map_encoder.forward(
            t,
            p,
            graph.segments(),
            &rel,
            agents,
            &pool,
        )?))
    }

    /// `[K·N, d_a]` branch features `a + MLP_k(a)`, k-major.
    pub fn differentiate_modes(&self, t: &mut Tape, p: &ParamStore, feat: Var) -> Result<Var> {
        let mut parts = Vec::with_capacity(self.config.k);
        for mlp in &self.modes {
            let d = mlp.forward(t, p, feat)?;
            parts.push(t.add(feat, d)?);
        }
        Ok(t.concat_rows(&parts)?)
    }

    /// Trajectories `[K·N, 2F]` and scores `[N, K]` from branch features
    /// `[K·N, d_a]`, agent features `[N, d_a]` and current positions.
    pub fn decode_and_score(
        &self,
        t: &mut Tape,
        p: &ParamStore,
        branches: Var,
        agents: Var,
        positions: &[Vec2],
    ) -> Result<(Var, Var)> {
        let (k, n, f) = (self.config.k, positions.len(), self.config.future_steps);
        let cumsum = t.constant(self.cumsum.clone());
        let origin = t.constant(Tensor::matrix(
            n,
            2 * f,
            positions
                .iter()
                .flat_map(|q| (0..f).flat_map(|_| [q[0], q[1]]))
                .collect(),
        ));
        let mut trajs = Vec::with_capacity(k);
        for (m, dec) in self.decoders.iter().enumerate() {
            let b = t.slice_rows(branches, m * n, n)?;
            let steps = dec.forward(t, p, b)?;
            let offsets = t.matmul(steps, cumsum)?;
            trajs.push(t.add(offsets, origin)?);
        }
        let trajectories = t.concat_rows(&trajs)?;
        let tiled = t.concat_rows(&vec![agents; k])?;
        let joint = t.concat_cols(&[branches, tiled])?;
        let logits = self.score.forward(t, p, joint)?;
        let logits = t.reshape(logits, &[k, n])?;
        let logits = t.transpose(logits)?;
        let scores = t.row_softmax(logits)?;
        Ok((trajectories, scores))
    }

    fn record(t: &Tape, att: Option<Var>, edges: &Edges, stage: Stage, n: usize, out: &mut Vec<AttentionRecord>) {
        let Some(att) = att else { return };
        let w = t.value(att);
        for e in 0..edges.len() {
            let row = w.row(e);
            let c = edges.center[e];
            out.push(AttentionRecord {
                stage,
                agent: c % n,
                mode: (stage == Stage::M2aM).then_some(c / n),
                node: edges.neighbor[e],
                weight: row.iter().sum::<f64>() / row.len() as f64,
            });
        }
    }

    /// The full pipeline on a tape for one scene in its focal frame.
    /// Attention records are collected when `record_attention` is set.
    pub fn forward_tape(
        &self,
        t: &mut Tape,
        p: &ParamStore,
        scene: &Scene,
        record_attention: bool,
    ) -> Result<ForwardVars> {
        let batch = SceneBatch::new(self, &[scene])?;
        self.forward_batch(t, p, &batch, record_attention)
    }

    /// The full pipeline for a stack of scenes. Output rows follow the
    /// batch's agent order; attention records use batch-wide agent and node
    /// indices.
    pub fn forward_batch(
        &self,
        t: &mut Tape,
        p: &ParamStore,
        batch: &SceneBatch,
        record_attention: bool,
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        let n = batch.n_agents();
        let mut attention = Vec::new();

        let a0 = self.encode_agents(t, p, &batch.histories)?;
        let map = if batch.segments.is_empty() {
            t.constant(Tensor::zeros(&[1, cfg.d_m]))
        } else {
            self.map_encoder
                .forward(t, p, &batch.segments, &batch.relations, a0, &batch.pool_edges)?
        };
        let map_edges = &batch.map_edges;

        let mut a = a0;
        if let Some(gc) = &self.m2a_e {
            let out = gc.forward(t, p, a, map, map_edges)?;
            if record_attention {
                Self::record(t, out.attention, map_edges, Stage::M2aE, n, &mut attention);
            }
            a = out.features;
        }
        if let Some(gc) = &self.a2a {
            a = gc.forward(t, p, a, a, &batch.a2a_edges)?.features;
        }
        if let Some(gc) = &self.m2a_s {
            let out = gc.forward(t, p, a, map, map_edges)?;
            if record_attention {
                Self::record(t, out.attention, map_edges, Stage::M2aS, n, &mut attention);
            }
            a = out.features;
        }
        let mut branches = self.differentiate_modes(t, p, a)?;
        if let Some(gc) = &self.m2a_m {
            let edges = map_edges.tiled(cfg.k, n);
            let out = gc.forward(t, p, branches, map, &edges)?;
            if record_attention {
                Self::record(t, out.attention, &edges, Stage::M2aM, n, &mut attention);
            }
            branches = out.features;
        }
        let (trajectories, scores) = self.decode_and_score(t, p, branches, a, &batch.positions)?;
        Ok(ForwardVars {
            trajectories,
            scores,
            n_agents: n,
            attention,
        })
    }

    /// Value-level predictions for several scenes, one list per scene.
    pub fn predict_batch(&self, p: &ParamStore, scenes: &[&Scene]) -> Result<Vec<Vec<Prediction>>> {
        let batch = SceneBatch::new(self, scenes)?;
        let mut t = Tape::new();
        let vars = self.forward_batch(&mut t, p, &batch, false)?;
        let all = predictions_from(&t, &vars, self.config.k);
        Ok((0..scenes.len()).map(|s| all[batch.agent_range(s)].to_vec()).collect())
    }

    /// Value-level predictions for every agent, in the scene's frame.
    pub fn forward(&self, p: &ParamStore, scene: &Scene, record_attention: bool) -> Result<ScenePrediction> {
        let mut t = Tape::new();
        let vars = self.forward_tape(&mut t, p, scene, record_attention)?;
        Ok(ScenePrediction {
            agents: predictions_from(&t, &vars, self.config.k),
            attention: vars.attention,
        })
    }
}

/// Scenes stacked for one forward pass. Agents and lane segments are
/// concatenated in scene order; every edge list is built per scene, so
/// scenes never exchange information.
#[derive(Clone, Debug)]
pub struct SceneBatch<'a> {
    agent_offsets: Vec<usize>,
    histories: Vec<&'a AgentHistory>,
    positions: Vec<Vec2>,
    segments: Vec<LaneSegment>,
    relations: LaneRelations,
    pool_edges: Edges,
    map_edges: Edges,
    a2a_edges: Edges,
}

impl<'a> SceneBatch<'a> {
    pub fn new(model: &Model, scenes: &[&'a Scene]) -> Result<Self> {
        let cfg = &model.config;
        let mut b = SceneBatch {
            agent_offsets: vec![0],
            histories: Vec::new(),
            positions: Vec::new(),
            segments: Vec::new(),
            relations: LaneRelations::stacked(&scenes.iter().map(|s| s.lane_graph()).collect::<Vec<_>>()),
            pool_edges: Edges::default(),
            map_edges: Edges::default(),
            a2a_edges: Edges::default(),
        };
        for scene in scenes {
            model.check(scene)?;
            let (na, nm) = (b.histories.len(), b.segments.len());
            let positions: Vec<Vec2> = scene.agents().iter().map(AgentHistory::current_position).collect();
            let graph = scene.lane_graph();
            b.pool_edges
                .extend_shifted(&model.map_encoder.pool_edges(graph, &positions), nm, na);
            b.map_edges.extend_shifted(&map_agent_edges(scene, cfg), na, nm);
            b.a2a_edges
                .extend_shifted(&agent_agent_edges(&positions, cfg.a2a_radius), na, na);
            b.histories.extend(scene.agents());
            b.positions.extend(positions);
            b.segments.extend_from_slice(graph.segments());
            b.agent_offsets.push(b.histories.len());
        }
        Ok(b)
    }

    pub fn n_scenes(&self) -> usize {
        self.agent_offsets.len() - 1
    }

    pub fn n_agents(&self) -> usize {
        self.histories.len()
    }

    /// Batch rows belonging to scene `s`.
    pub fn agent_range(&self, s: usize) -> std::ops::Range<usize> {
        self.agent_offsets[s]..self.agent_offsets[s + 1]
    }
}

/// Reads per-agent predictions off the tape.
pub fn predictions_from(t: &Tape, vars: &ForwardVars, k: usize) -> Vec<Prediction> {
    let traj = t.value(vars.trajectories);
    let scores = t.value(vars.scores);
    let n = vars.n_agents;
    (0..n)
        .map(|i| Prediction {
            trajectories: (0..k)
                .map(|m| traj.row(m * n + i).chunks(2).map(|c| [c[0], c[1]]).collect())
                .collect(),
            scores: scores.row(i).to_vec(),
        })
        .collect()
}

#[cfg(test)]
mod tests;
