//! Agent history encoder and lane-graph encoder.

use std::sync::Arc;

use crate::autodiff::{Init, Linear, LstmCell, Mlp, ParamError, ParamId, ParamStore, Result, Tape, Tensor, Var};
use crate::scene::{AgentHistory, LaneGraph, LaneSegment, RuleFlags, Vec2, DILATIONS};

use super::graph_conv::{Edges, GraphConv};
use super::GEOMETRY_SCALE;

/// LSTM over `[dx, dy, valid]` per step; the hidden states of all steps are
/// concatenated and mapped to the feature width by one affine layer.
#[derive(Clone, Debug)]
pub struct AgentEncoder {
    lstm: LstmCell,
    combine: Linear,
    steps: usize,
}

impl AgentEncoder {
    pub fn new(
        store: &mut ParamStore,
        path: &str,
        steps: usize,
        d_a: usize,
        init: &mut Init,
    ) -> std::result::Result<Self, ParamError> {
        Ok(Self {
            lstm: LstmCell::new(store, &format!("{path}/lstm"), 3, d_a, init)?,
            combine: Linear::new(store, &format!("{path}/combine"), steps * d_a, d_a, true, init)?,
            steps,
        })
    }

    /// `[N, d_a]` features, one row per history, each computed independently.
    pub fn forward(&self, t: &mut Tape, p: &ParamStore, histories: &[&AgentHistory]) -> Result<Var> {
        let n = histories.len();
        let mut state = self.lstm.zero_state(t, n);
        let mut hidden = Vec::with_capacity(self.steps);
        for step in 0..self.steps {
            let mut x = Vec::with_capacity(3 * n);
            for h in histories {
                let d = h.displacements()[step];
                x.extend([d[0], d[1], if h.validity()[step] { 1.0 } else { 0.0 }]);
            }
            let x = t.constant(Tensor::matrix(n, 3, x));
            state = self.lstm.step(t, p, x, state)?;
            hidden.push(state.h);
        }
        let all = t.concat_cols(&hidden)?;
        self.combine.forward(t, p, all)
    }
}

/// `(dst, src)` index lists of one relation.
type Relation = (Arc<[usize]>, Arc<[usize]>);

/// Aggregation relations of one lane convolution: predecessors and
/// successors at every dilation.
#[derive(Clone, Debug)]
pub struct LaneRelations {
    rel: Vec<Relation>,
}

impl LaneRelations {
    pub const COUNT: usize = 2 * DILATIONS.len();

    pub fn new(graph: &LaneGraph) -> Self {
        Self::stacked(&[graph])
    }

    /// Relations of several graphs whose nodes are stacked in order.
    pub fn stacked(graphs: &[&LaneGraph]) -> Self {
        let mut rel = Vec::with_capacity(Self::COUNT);
        for level in 0..DILATIONS.len() {
            for pred in [true, false] {
                let (mut dst, mut src) = (Vec::new(), Vec::new());
                let mut offset = 0;
                for graph in graphs {
                    let adj = if pred {
                        graph.predecessors(level)
                    } else {
                        graph.successors(level)
                    };
                    for (u, list) in adj.iter().enumerate() {
                        for v in list {
                            dst.push(offset + u);
                            src.push(offset + *v);
                        }
                    }
                    offset += graph.len();
                }
                rel.push((dst.into(), src.into()));
            }
        }
        Self { rel }
    }
}

#[derive(Clone, Debug)]
struct LaneConvLayer {
    own: Linear,
    rel: Vec<ParamId>,
}

impl LaneConvLayer {
    fn new(store: &mut ParamStore, path: &str, d: usize, init: &mut Init) -> std::result::Result<Self, ParamError> {
        let own = Linear::new(store, &format!("{path}/self"), d, d, true, init)?;
        let rel = (0..LaneRelations::COUNT)
            .map(|r| store.register(format!("{path}/rel{r}"), init.tensor(&[d, d], d)))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { own, rel })
    }

    /// `x + silu(x W_self + b + Σ_r A_r x W_r)`.
    fn forward(&self, t: &mut Tape, p: &ParamStore, x: Var, relations: &LaneRelations) -> Result<Var> {
        let n = t.value(x).rows();
        let mut acc = self.own.forward(t, p, x)?;
        for (w, (dst, src)) in self.rel.iter().zip(&relations.rel) {
            if dst.is_empty() {
                continue;
            }
            let w = t.param(p, *w);
            let z = t.matmul(x, w)?;
            let msg = t.gather_rows(z, src.clone())?;
            let agg = t.scatter_add_rows(msg, dst.clone(), n)?;
            acc = t.add(acc, agg)?;
        }
        let act = t.silu(acc)?;
        t.add(x, act)
    }
}

/// Node inputs from geometry and rule flags, agent pooling, then lane
/// convolutions.
#[derive(Clone, Debug)]
pub struct MapEncoder {
    center: Mlp,
    delta: Mlp,
    flags: Mlp,
    pool: GraphConv,
    layers: Vec<LaneConvLayer>,
    pub pool_radius: f64,
}

pub const LANE_CONV_LAYERS: usize = 3;

impl MapEncoder {
    pub fn new(
        store: &mut ParamStore,
        path: &str,
        d_m: usize,
        d_a: usize,
        hidden: usize,
        pool_radius: f64,
        init: &mut Init,
    ) -> std::result::Result<Self, ParamError> {
        Ok(Self {
            center: Mlp::new(store, &format!("{path}/center"), (2, hidden, d_m), true, init)?,
            delta: Mlp::new(store, &format!("{path}/delta"), (2, hidden, d_m), true, init)?,
            flags: Mlp::new(
                store,
                &format!("{path}/flags"),
                (RuleFlags::WIDTH, hidden, d_m),
                true,
                init,
            )?,
            pool: GraphConv::new(store, &format!("{path}/pool"), d_m, d_a, hidden, init)?,
            layers: (0..LANE_CONV_LAYERS)
                .map(|l| LaneConvLayer::new(store, &format!("{path}/lane_conv{l}"), d_m, init))
                .collect::<std::result::Result<_, _>>()?,
            pool_radius,
        })
    }

    /// Agents within `pool_radius` of each lane-segment center.
    pub fn pool_edges(&self, graph: &LaneGraph, agent_positions: &[Vec2]) -> Edges {
        let mut edges = Edges::default();
        for (i, seg) in graph.segments().iter().enumerate() {
            for (j, p) in agent_positions.iter().enumerate() {
                let off = [p[0] - seg.center[0], p[1] - seg.center[1]];
                if off[0].hypot(off[1]) <= self.pool_radius {
                    edges.push(i, j, off);
                }
            }
        }
        edges
    }

    /// `[M, d_m]` node features for nonempty `segs`; `agents` are `[N, d_a]`
    /// agent features pooled along `pool` (see [`MapEncoder::pool_edges`]).
    pub fn forward(
        &self,
        t: &mut Tape,
        p: &ParamStore,
        segs: &[LaneSegment],
        relations: &LaneRelations,
        agents: Var,
        pool: &Edges,
    ) -> Result<Var> {
        let m = segs.len();
        let s = GEOMETRY_SCALE;
        let centers = Tensor::matrix(
            m,
            2,
            segs.iter().flat_map(|g| [g.center[0] * s, g.center[1] * s]).collect(),
        );
        let deltas = Tensor::matrix(
            m,
            2,
            segs.iter().flat_map(|g| [g.delta[0] * s, g.delta[1] * s]).collect(),
        );
        let flags = Tensor::matrix(
            m,
            RuleFlags::WIDTH,
            segs.iter().flat_map(|g| g.rule_flags.features()).collect(),
        );
        let (centers, deltas, flags) = (t.constant(centers), t.constant(deltas), t.constant(flags));
        let a = self.center.forward(t, p, centers)?;
        let b = self.delta.forward(t, p, deltas)?;
        let c = self.flags.forward(t, p, flags)?;
        let x = t.add(a, b)?;
        let x = t.add(x, c)?;
        let mut x = self.pool.forward(t, p, x, agents, pool)?.features;
        for layer in &self.layers {
            x = layer.forward(t, p, x, relations)?;
        }
        Ok(x)
    }
}
