//! Directed lane-segment graph with dilated predecessor/successor relations.

use super::{SceneError, Vec2};

/// Dilation levels of the lane convolution.
pub const DILATIONS: [usize; 3] = [1, 2, 4];

/// Traffic-rule bits attached to a lane segment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct RuleFlags(u8);

impl RuleFlags {
    pub const WIDTH: usize = 4;
    pub const LEFT_TURN: RuleFlags = RuleFlags(1);
    pub const RIGHT_TURN: RuleFlags = RuleFlags(2);
    pub const STRAIGHT: RuleFlags = RuleFlags(4);
    pub const IN_INTERSECTION: RuleFlags = RuleFlags(8);

    pub const fn empty() -> Self {
        RuleFlags(0)
    }

    pub const fn union(self, other: RuleFlags) -> Self {
        RuleFlags(self.0 | other.0)
    }

    pub fn contains(self, other: RuleFlags) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn bits(self) -> [u8; Self::WIDTH] {
        std::array::from_fn(|i| (self.0 >> i) & 1)
    }

    pub fn from_bits(bits: &[u8]) -> Result<Self, SceneError> {
        if bits.len() != Self::WIDTH || bits.iter().any(|b| *b > 1) {
            return Err(SceneError::RuleFlags(bits.to_vec()));
        }
        Ok(RuleFlags(bits.iter().enumerate().fold(0, |acc, (i, b)| acc | (b << i))))
    }

    /// The flags of the mirror-image lane: left and right turns swap.
    pub fn mirrored(self) -> Self {
        let (l, r) = (Self::LEFT_TURN.0, Self::RIGHT_TURN.0);
        let keep = self.0 & !(l | r);
        let left = if self.0 & r != 0 { l } else { 0 };
        let right = if self.0 & l != 0 { r } else { 0 };
        RuleFlags(keep | left | right)
    }

    pub fn features(self) -> [f64; Self::WIDTH] {
        self.bits().map(f64::from)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LaneSegment {
    /// End point minus start point.
    pub delta: Vec2,
    pub center: Vec2,
    pub rule_flags: RuleFlags,
}

impl LaneSegment {
    pub fn from_endpoints(start: Vec2, end: Vec2, rule_flags: RuleFlags) -> Self {
        Self {
            delta: [end[0] - start[0], end[1] - start[1]],
            center: [(start[0] + end[0]) * 0.5, (start[1] + end[1]) * 0.5],
            rule_flags,
        }
    }

    pub fn start(&self) -> Vec2 {
        [
            self.center[0] - 0.5 * self.delta[0],
            self.center[1] - 0.5 * self.delta[1],
        ]
    }

    pub fn end(&self) -> Vec2 {
        [
            self.center[0] + 0.5 * self.delta[0],
            self.center[1] + 0.5 * self.delta[1],
        ]
    }
}

/// Sorted, deduplicated neighbour lists, one per node.
pub type Adjacency = Vec<Vec<usize>>;

#[derive(Clone, Debug, PartialEq)]
pub struct LaneGraph {
    segments: Vec<LaneSegment>,
    /// `suc[d][u]`: nodes reachable from `u` in exactly `DILATIONS[d]` steps.
    suc: [Adjacency; 3],
    /// `pre[d][v]`: nodes from which `v` is reached in `DILATIONS[d]` steps.
    pre: [Adjacency; 3],
}

fn compose(a: &Adjacency, b: &Adjacency) -> Adjacency {
    a.iter()
        .map(|next| {
            let mut out: Vec<usize> = next.iter().flat_map(|v| b[*v].iter().copied()).collect();
            out.sort_unstable();
            out.dedup();
            out
        })
        .collect()
}

fn transpose(a: &Adjacency) -> Adjacency {
    let mut out = vec![Vec::new(); a.len()];
    for (u, next) in a.iter().enumerate() {
        for v in next {
            out[*v].push(u);
        }
    }
    out
}

/// Builds the graph from directed successor pairs `(from, to)`.
pub fn build_lane_graph(
    segments: Vec<LaneSegment>,
    successor_pairs: &[(usize, usize)],
) -> Result<LaneGraph, SceneError> {
    let n = segments.len();
    for s in &segments {
        if !(s.delta.iter().chain(&s.center).all(|v| v.is_finite())) {
            return Err(SceneError::NonFinite("lane segment"));
        }
    }
    let mut suc1 = vec![Vec::new(); n];
    for &(from, to) in successor_pairs {
        if from >= n || to >= n {
            return Err(SceneError::LaneIndex { from, to, n });
        }
        if from == to {
            return Err(SceneError::SelfLoop(from));
        }
        suc1[from].push(to);
    }
    for next in &mut suc1 {
        next.sort_unstable();
        next.dedup();
    }
    let suc2 = compose(&suc1, &suc1);
    let suc4 = compose(&suc2, &suc2);
    let pre = [transpose(&suc1), transpose(&suc2), transpose(&suc4)];
    Ok(LaneGraph {
        segments,
        suc: [suc1, suc2, suc4],
        pre,
    })
}

impl LaneGraph {
    pub fn segments(&self) -> &[LaneSegment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Successors at dilation level index `level` (0, 1, 2 for 1, 2, 4 steps).
    pub fn successors(&self, level: usize) -> &Adjacency {
        &self.suc[level]
    }

    pub fn predecessors(&self, level: usize) -> &Adjacency {
        &self.pre[level]
    }

    /// Dilation-1 successor pairs, the graph's defining data.
    pub fn successor_pairs(&self) -> Vec<(usize, usize)> {
        self.suc[0]
            .iter()
            .enumerate()
            .flat_map(|(u, next)| next.iter().map(move |v| (u, *v)))
            .collect()
    }

    pub(crate) fn map_segments(&self, f: impl Fn(&LaneSegment) -> LaneSegment) -> LaneGraph {
        LaneGraph {
            segments: self.segments.iter().map(f).collect(),
            suc: self.suc.clone(),
            pre: self.pre.clone(),
        }
    }

    /// Removes the directed edge `from -> to` at one dilation level and the
    /// matching predecessor entry, leaving the other levels untouched.
    #[cfg(test)]
    pub(crate) fn without_edge(&self, level: usize, from: usize, to: usize) -> LaneGraph {
        let mut g = self.clone();
        g.suc[level][from].retain(|v| *v != to);
        g.pre[level][to].retain(|u| *u != from);
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn segs(n: usize) -> Vec<LaneSegment> {
        (0..n)
            .map(|i| {
                LaneSegment::from_endpoints([i as f64 * 2.0, 0.0], [i as f64 * 2.0 + 2.0, 0.0], RuleFlags::empty())
            })
            .collect()
    }

    #[test]
    fn chain_dilation_four() {
        let g = build_lane_graph(segs(5), &[(0, 1), (1, 2), (2, 3), (3, 4)]).unwrap();
        assert_eq!(g.successors(2)[0], vec![4]);
        assert_eq!(g.predecessors(2)[4], vec![0]);
        assert_eq!(g.successors(1)[1], vec![3]);
    }

    #[test]
    fn empty_successors() {
        let g = build_lane_graph(segs(4), &[]).unwrap();
        for level in 0..3 {
            assert!(g.successors(level).iter().all(Vec::is_empty));
            assert!(g.predecessors(level).iter().all(Vec::is_empty));
        }
    }

    #[test]
    fn branch_dilation_two_is_union() {
        let g = build_lane_graph(segs(6), &[(0, 1), (0, 2), (1, 3), (2, 4), (2, 5)]).unwrap();
        assert_eq!(g.successors(1)[0], vec![3, 4, 5]);
    }

    #[test]
    fn rejects_bad_indices_and_self_loops() {
        assert!(matches!(
            build_lane_graph(segs(2), &[(0, 2)]),
            Err(SceneError::LaneIndex { .. })
        ));
        assert!(matches!(
            build_lane_graph(segs(2), &[(1, 1)]),
            Err(SceneError::SelfLoop(1))
        ));
    }

    #[test]
    fn rule_flag_bits_round_trip() {
        let f = RuleFlags::LEFT_TURN.union(RuleFlags::IN_INTERSECTION);
        assert_eq!(f.bits(), [1, 0, 0, 1]);
        assert_eq!(RuleFlags::from_bits(&f.bits()).unwrap(), f);
        assert!(RuleFlags::from_bits(&[1, 0, 0]).is_err());
    }

    /// Exactly-`d`-step reachability by walking every path.
    fn brute_reach(n: usize, pairs: &[(usize, usize)], d: usize) -> Vec<Vec<usize>> {
        (0..n)
            .map(|start| {
                let mut frontier = vec![start];
                for _ in 0..d {
                    let mut next = Vec::new();
                    for u in &frontier {
                        for (a, b) in pairs {
                            if a == u {
                                next.push(*b);
                            }
                        }
                    }
                    frontier = next;
                }
                frontier.sort_unstable();
                frontier.dedup();
                frontier
            })
            .collect()
    }

    proptest! {
        #[test]
        fn dilations_match_brute_force(
            n in 1usize..50,
            raw in proptest::collection::vec((0usize..50, 0usize..50), 0..120),
        ) {
            let pairs: Vec<(usize, usize)> = raw
                .into_iter()
                .map(|(a, b)| (a % n, b % n))
                .filter(|(a, b)| a != b)
                .collect();
            let g = build_lane_graph(segs(n), &pairs).unwrap();
            for (level, d) in DILATIONS.iter().enumerate() {
                let want = brute_reach(n, &pairs, *d);
                prop_assert_eq!(g.successors(level), &want);
                for (u, next) in want.iter().enumerate() {
                    for v in next {
                        prop_assert!(g.predecessors(level)[*v].contains(&u));
                    }
                }
            }
        }
    }
}
