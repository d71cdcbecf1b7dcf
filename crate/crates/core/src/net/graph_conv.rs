//! Attention-weighted graph convolution between a set of centers and a set
//! of neighbours:
//!
//! ```text
//! g_ij = φ2([a_i W1, m_j, φ1(Δd_ij)])
//! a_i' = a_i W2 + Σ_j softmax_j(φ3(g_ij)) ⊙ g_ij W3
//! ```
//!
//! The softmax runs over the neighbour set of each center, independently per
//! channel. A center without neighbours gets exactly `a_i W2`.

use std::sync::Arc;

use crate::autodiff::{Init, Linear, Mlp, ParamError, ParamStore, Result, Tape, Tensor, Var};
use crate::scene::Vec2;

use super::GEOMETRY_SCALE;

/// Directed edges `neighbor -> center` with the geometric offset of each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Edges {
    pub center: Vec<usize>,
    pub neighbor: Vec<usize>,
    /// Offset of the neighbour relative to the center, meters.
    pub offset: Vec<Vec2>,
}

impl Edges {
    pub fn len(&self) -> usize {
        self.center.len()
    }

    pub fn is_empty(&self) -> bool {
        self.center.is_empty()
    }

    pub fn push(&mut self, center: usize, neighbor: usize, offset: Vec2) {
        self.center.push(center);
        self.neighbor.push(neighbor);
        self.offset.push(offset);
    }

    /// Appends `other` with its center and neighbour indices shifted.
    pub fn extend_shifted(&mut self, other: &Edges, center_shift: usize, neighbor_shift: usize) {
        self.center.extend(other.center.iter().map(|c| c + center_shift));
        self.neighbor.extend(other.neighbor.iter().map(|j| j + neighbor_shift));
        self.offset.extend_from_slice(&other.offset);
    }

    /// The same edges repeated for `copies` stacked blocks of centers, e.g.
    /// one block per mode: copy `k` uses centers `k * n_center + i`.
    pub fn tiled(&self, copies: usize, n_center: usize) -> Edges {
        let mut out = Edges::default();
        for k in 0..copies {
            for e in 0..self.len() {
                out.push(k * n_center + self.center[e], self.neighbor[e], self.offset[e]);
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct GraphConv {
    w1: Linear,
    w2: Linear,
    w3: Linear,
    phi1: Mlp,
    phi2: Mlp,
    phi3: Mlp,
    pub d_center: usize,
    pub d_neighbor: usize,
}

/// Output features plus, when there were edges, the per-edge attention
/// weights (`[E, d_center]`).
pub struct ConvOutput {
    pub features: Var,
    pub attention: Option<Var>,
}

impl GraphConv {
    pub fn new(
        store: &mut ParamStore,
        path: &str,
        d_center: usize,
        d_neighbor: usize,
        hidden: usize,
        init: &mut Init,
    ) -> std::result::Result<Self, ParamError> {
        Ok(Self {
            w1: Linear::new(store, &format!("{path}/w1"), d_center, d_center, false, init)?,
            w2: Linear::new(store, &format!("{path}/w2"), d_center, d_center, false, init)?,
            w3: Linear::new(store, &format!("{path}/w3"), hidden, d_center, false, init)?,
            phi1: Mlp::new(store, &format!("{path}/phi1"), (2, hidden, hidden), true, init)?,
            phi2: Mlp::new(
                store,
                &format!("{path}/phi2"),
                (d_center + d_neighbor + hidden, hidden, hidden),
                true,
                init,
            )?,
            // A bias on the last layer would cancel in the softmax.
            phi3: Mlp::new(store, &format!("{path}/phi3"), (hidden, hidden, d_center), false, init)?,
            d_center,
            d_neighbor,
        })
    }

    /// `centers` is `[n_center, d_center]`, `neighbors` `[n_neighbor, d_neighbor]`.
    pub fn forward(
        &self,
        t: &mut Tape,
        p: &ParamStore,
        centers: Var,
        neighbors: Var,
        edges: &Edges,
    ) -> Result<ConvOutput> {
        let n_center = t.value(centers).rows();
        let own = self.w2.forward(t, p, centers)?;
        if edges.is_empty() {
            return Ok(ConvOutput {
                features: own,
                attention: None,
            });
        }
        let center_idx: Arc<[usize]> = edges.center.clone().into();
        let query = self.w1.forward(t, p, centers)?;
        let query = t.gather_rows(query, center_idx.clone())?;
        let keys = t.gather_rows(neighbors, edges.neighbor.clone().into())?;
        let offsets: Vec<f64> = edges
            .offset
            .iter()
            .flat_map(|o| [o[0] * GEOMETRY_SCALE, o[1] * GEOMETRY_SCALE])
            .collect();
        let offsets = t.constant(Tensor::matrix(edges.len(), 2, offsets));
        let geo = self.phi1.forward(t, p, offsets)?;
        let joint = t.concat_cols(&[query, keys, geo])?;
        let g = self.phi2.forward(t, p, joint)?;
        let logits = self.phi3.forward(t, p, g)?;
        let att = t.segment_softmax(logits, center_idx.clone(), n_center)?;
        let values = self.w3.forward(t, p, g)?;
        let msg = t.mul(att, values)?;
        let agg = t.scatter_add_rows(msg, center_idx, n_center)?;
        Ok(ConvOutput {
            features: t.add(own, agg)?,
            attention: Some(att),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv(seed: u64) -> (GraphConv, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gc = GraphConv::new(&mut store, "gc", 4, 3, 8, &mut Init::FanIn(&mut rng)).unwrap();
        (gc, store)
    }

    fn run(gc: &GraphConv, p: &ParamStore, a: &Tensor, m: &Tensor, edges: &Edges) -> Tensor {
        let mut t = Tape::new();
        let (a, m) = (t.constant(a.clone()), t.constant(m.clone()));
        let out = gc.forward(&mut t, p, a, m, edges).unwrap();
        t.value(out.features).clone()
    }

    fn own_term(p: &ParamStore, a: &Tensor) -> Tensor {
        let w2 = p.by_path("gc/w2/weight").unwrap();
        let mut t = Tape::new();
        let (a, w) = (t.constant(a.clone()), t.constant(w2.clone()));
        let y = t.matmul(a, w).unwrap();
        t.value(y).clone()
    }

    fn feats() -> (Tensor, Tensor) {
        let a = Tensor::matrix(2, 4, vec![0.1, -0.2, 0.3, 0.5, 1.0, 0.0, -1.0, 0.25]);
        let m = Tensor::matrix(3, 3, vec![0.5, 0.1, -0.3, -0.2, 0.4, 0.9, 0.0, 0.0, 1.0]);
        (a, m)
    }

    #[test]
    fn empty_neighbourhood_is_self_term() {
        let (gc, p) = conv(1);
        let (a, m) = feats();
        assert_eq!(run(&gc, &p, &a, &m, &Edges::default()), own_term(&p, &a));
        // Center 1 has an edge, center 0 does not: row 0 is still exact.
        let mut e = Edges::default();
        e.push(1, 2, [3.0, -1.0]);
        let out = run(&gc, &p, &a, &m, &e);
        assert_eq!(out.row(0), own_term(&p, &a).row(0));
        assert_ne!(out.row(1), own_term(&p, &a).row(1));
    }

    #[test]
    fn duplicated_neighbours_change_nothing() {
        let (gc, p) = conv(2);
        let (a, m) = feats();
        let close = |x: &Tensor, y: &Tensor| x.data().iter().zip(y.data()).all(|(u, v)| (u - v).abs() < 1e-12);
        // One neighbour listed twice: both copies get weight 1/2.
        let mut single = Edges::default();
        single.push(0, 1, [2.0, 1.0]);
        let mut doubled = single.clone();
        doubled.push(0, 1, [2.0, 1.0]);
        assert!(close(&run(&gc, &p, &a, &m, &single), &run(&gc, &p, &a, &m, &doubled)));
        // Every member of a larger set listed twice.
        let mut set = Edges::default();
        set.push(0, 1, [2.0, 1.0]);
        set.push(0, 2, [-4.0, 0.5]);
        let mut both = set.clone();
        both.push(0, 2, [-4.0, 0.5]);
        both.push(0, 1, [2.0, 1.0]);
        assert!(close(&run(&gc, &p, &a, &m, &set), &run(&gc, &p, &a, &m, &both)));
    }

    #[test]
    fn single_neighbour_gets_full_weight() {
        let (gc, p) = conv(3);
        let (a, m) = feats();
        let mut e = Edges::default();
        e.push(0, 2, [1.0, 1.0]);
        let mut t = Tape::new();
        let (av, mv) = (t.constant(a.clone()), t.constant(m.clone()));
        let out = gc.forward(&mut t, &p, av, mv, &e).unwrap();
        let att = t.value(out.attention.unwrap());
        assert!(att.data().iter().all(|w| (*w - 1.0).abs() < 1e-15));
    }
}
