//! Deterministic synthetic driving scenarios.
//!
//! Each scenario is laid out in a local frame from analytic pieces (straight
//! lines and circular arcs), agents follow those pieces with
//! piecewise-constant longitudinal acceleration, and the finished scene is
//! moved into the world by a random rigid transform. Positions are sampled
//! every [`DT`] seconds; lanes are cut into segments of about
//! [`SEGMENT_LENGTH`] meters.

mod dataset;
mod path;

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{build_lane_graph, preprocess_history, Future, LaneSegment, RigidTransform, RuleFlags, Scene, Vec2};
pub use dataset::{
    generate_dataset, manifest_path, read_manifest, regenerate, DatasetEntry, DatasetManifest, DatasetSpec, GenError,
    Split,
};
use path::{Motion, Path, Piece};

/// Sampling interval, seconds.
pub const DT: f64 = 0.1;
/// Target lane-segment length, meters.
pub const SEGMENT_LENGTH: f64 = 2.0;
/// Upper bound on any agent's speed, m/s.
pub const MAX_SPEED: f64 = 20.0;
/// Upper bound on any agent's noise-free acceleration magnitude, m/s².
pub const MAX_ACCEL: f64 = 3.0;
/// Cap on `v² · curvature`; keeps total acceleration under [`MAX_ACCEL`]
/// together with the longitudinal terms used below (≤ 0.8 m/s² on curves).
const LATERAL_ACCEL: f64 = 2.4;
/// Radius of the connector arc in crossing scenes, meters.
const CONNECTOR_RADIUS: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Straight,
    LeftTurn,
    RightTurn,
    LaneChangeBlocked,
    YieldCrossing,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 5] = [
        ScenarioKind::Straight,
        ScenarioKind::LeftTurn,
        ScenarioKind::RightTurn,
        ScenarioKind::LaneChangeBlocked,
        ScenarioKind::YieldCrossing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Straight => "straight",
            ScenarioKind::LeftTurn => "left_turn",
            ScenarioKind::RightTurn => "right_turn",
            ScenarioKind::LaneChangeBlocked => "lane_change_blocked",
            ScenarioKind::YieldCrossing => "yield_crossing",
        }
    }

    /// Agents the kind needs besides background traffic.
    pub fn min_agents(self) -> usize {
        match self {
            ScenarioKind::LaneChangeBlocked | ScenarioKind::YieldCrossing => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = SpecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| SpecError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("unknown scenario kind {0:?}")]
    UnknownKind(String),
    #[error("history_steps must be at least 2, got {0}")]
    HistorySteps(usize),
    #[error("future_steps must be at least 1, got {0}")]
    FutureSteps(usize),
    #[error("{kind} needs at least {min} agents, got {got}")]
    Agents { kind: ScenarioKind, min: usize, got: usize },
    #[error("noise_sigma must be finite and non-negative, got {0}")]
    Noise(f64),
    #[error("lane_spacing must be positive, got {0}")]
    LaneSpacing(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub n_agents: usize,
    pub history_steps: usize,
    pub future_steps: usize,
    /// Distance between parallel lanes, meters.
    pub lane_spacing: f64,
    /// Standard deviation of the position noise added to histories, meters.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    /// 2 s of history and 3 s of future at 10 Hz, four agents.
    pub fn new(kind: ScenarioKind, seed: u64) -> Self {
        Self {
            kind,
            n_agents: 4,
            history_steps: 20,
            future_steps: 30,
            lane_spacing: 3.5,
            noise_sigma: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.history_steps < 2 {
            return Err(SpecError::HistorySteps(self.history_steps));
        }
        if self.future_steps < 1 {
            return Err(SpecError::FutureSteps(self.future_steps));
        }
        if self.n_agents < self.kind.min_agents() {
            return Err(SpecError::Agents {
                kind: self.kind,
                min: self.kind.min_agents(),
                got: self.n_agents,
            });
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(SpecError::Noise(self.noise_sigma));
        }
        if !(self.lane_spacing.is_finite() && self.lane_spacing > 0.0) {
            return Err(SpecError::LaneSpacing(self.lane_spacing));
        }
        Ok(())
    }
}

/// Lane pieces, their connections, and the routes traffic may follow.
struct Layout {
    pieces: Vec<(Piece, RuleFlags)>,
    links: Vec<(usize, usize)>,
    routes: Vec<Vec<usize>>,
}

impl Layout {
    fn route_path(&self, route: &[usize]) -> Path {
        Path::new(route.iter().map(|i| self.pieces[*i].0).collect())
    }

    /// Cuts every piece into near-[`SEGMENT_LENGTH`] chords.
    fn segments(&self) -> (Vec<LaneSegment>, Vec<(usize, usize)>) {
        let mut segments = Vec::new();
        let mut pairs = Vec::new();
        let mut ends = Vec::with_capacity(self.pieces.len());
        for (piece, flags) in &self.pieces {
            let n = ((piece.length / SEGMENT_LENGTH).round() as usize).max(1);
            let first = segments.len();
            for j in 0..n {
                let a = piece.point(piece.length * j as f64 / n as f64);
                let b = piece.point(piece.length * (j + 1) as f64 / n as f64);
                if j > 0 {
                    pairs.push((segments.len() - 1, segments.len()));
                }
                segments.push(LaneSegment::from_endpoints(a, b, *flags));
            }
            ends.push((first, segments.len() - 1));
        }
        for (a, b) in &self.links {
            pairs.push((ends[*a].1, ends[*b].0));
        }
        (segments, pairs)
    }
}

/// One simulated agent: a path, a motion profile, and where on the path it
/// is at the last history step.
struct Actor {
    path: Path,
    motion: Motion,
    s_now: f64,
}

impl Actor {
    fn positions(&self, steps: usize, t_now: f64) -> Vec<Vec2> {
        let base = self.s_now - self.motion.state(t_now).0;
        (0..steps)
            .map(|i| self.path.point(base + self.motion.state(i as f64 * DT).0))
            .collect()
    }

    fn now(&self) -> Vec2 {
        self.path.point(self.s_now)
    }
}

/// Distance covered during history and during the future under `motion`.
fn travel(motion: &Motion, t_now: f64, t_end: f64) -> (f64, f64) {
    let hist = motion.state(t_now).0;
    (hist, motion.state(t_end).0 - hist)
}

fn speed_cap(path: &Path) -> f64 {
    let k = path.max_curvature();
    if k > 0.0 {
        (LATERAL_ACCEL / k).sqrt()
    } else {
        f64::INFINITY
    }
}

struct Timing {
    t_now: f64,
    t_end: f64,
}

fn straight(spec: &ScenarioSpec, tm: &Timing, rng: &mut ChaCha8Rng) -> (Layout, Actor, Vec<Actor>) {
    let motion = Motion::constant(rng.random_range(5.0..15.0), rng.random_range(-0.8..0.8), MAX_SPEED);
    let (hist, fut) = travel(&motion, tm.t_now, tm.t_end);
    let (back, front) = (hist + 10.0, fut + 10.0);
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let lane0 = Piece::line([-back, 0.0], 0.0, back + front);
    let lane1 = Piece::line([-back, side * spec.lane_spacing], 0.0, back + front);
    let layout = Layout {
        pieces: vec![(lane0, RuleFlags::empty()), (lane1, RuleFlags::empty())],
        links: vec![],
        routes: vec![vec![0], vec![1]],
    };
    let focal = Actor {
        path: layout.route_path(&[0]),
        motion,
        s_now: back,
    };
    (layout, focal, vec![])
}

fn turn(left: bool, tm: &Timing, rng: &mut ChaCha8Rng) -> (Layout, Actor, Vec<Actor>) {
    let radius = rng.random_range(12.0..20.0);
    let cap = (LATERAL_ACCEL * radius).sqrt();
    let motion = Motion::constant(rng.random_range(0.7 * cap..cap), rng.random_range(-0.5..0.0), MAX_SPEED);
    let (hist, fut) = travel(&motion, tm.t_now, tm.t_end);
    let arc_len = radius * FRAC_PI_2;
    // Distance from the focal agent to the intersection entry; negative when
    // the turn has already begun.
    let entry = rng.random_range(-0.3 * arc_len..0.8 * fut.max(1.0));
    let other = rng.random_range(12.0..20.0);
    let (r_left, r_right) = if left { (radius, other) } else { (other, radius) };

    let approach_len = entry.max(0.0) + hist + 10.0;
    let exit_len = fut + 10.0;
    let approach = Piece::line([-approach_len, 0.0], 0.0, approach_len);
    let left_arc = approach.then(1.0 / r_left, r_left * FRAC_PI_2);
    let right_arc = approach.then(-1.0 / r_right, r_right * FRAC_PI_2);
    let through = approach.then(0.0, r_left.max(r_right));
    let int = RuleFlags::IN_INTERSECTION;
    let layout = Layout {
        pieces: vec![
            (approach, RuleFlags::empty()),
            (left_arc, RuleFlags::LEFT_TURN.union(int)),
            (left_arc.then(0.0, exit_len), RuleFlags::empty()),
            (through, RuleFlags::STRAIGHT.union(int)),
            (through.then(0.0, exit_len), RuleFlags::empty()),
            (right_arc, RuleFlags::RIGHT_TURN.union(int)),
            (right_arc.then(0.0, exit_len), RuleFlags::empty()),
        ],
        links: vec![(0, 1), (1, 2), (0, 3), (3, 4), (0, 5), (5, 6)],
        routes: vec![vec![0, 1, 2], vec![0, 3, 4], vec![0, 5, 6]],
    };
    let route = if left { &layout.routes[0] } else { &layout.routes[2] };
    let focal = Actor {
        path: layout.route_path(route),
        motion,
        s_now: approach_len - entry,
    };
    (layout, focal, vec![])
}

fn lane_change_blocked(spec: &ScenarioSpec, tm: &Timing, rng: &mut ChaCha8Rng) -> (Layout, Actor, Vec<Actor>) {
    let v0: f64 = rng.random_range(4.0..9.0);
    let motion = Motion::constant(v0, rng.random_range(-0.5..0.0), MAX_SPEED);
    let (hist, fut) = travel(&motion, tm.t_now, tm.t_end);
    let r_min = (v0 * v0 / LATERAL_ACCEL).max(30.0);
    let radius = rng.random_range(r_min..r_min + 20.0);
    let w = spec.lane_spacing;
    // Two opposite arcs turning by `theta` shift the path sideways by `w`.
    let theta = (1.0 - w / (2.0 * radius)).acos();
    let started = rng.random_range(0.0..6.0);
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let (back, front) = (hist + 10.0, fut + 15.0);

    let lane0 = Piece::line([-back, 0.0], 0.0, back + front);
    let lane1 = Piece::line([-back, side * w], 0.0, back + front);
    let keep = Piece::line([-back, 0.0], 0.0, back - started);
    let out = keep.then(side / radius, radius * theta);
    let back_in = out.then(-side / radius, radius * theta);
    let settle = back_in.then(0.0, front + 10.0);
    let focal = Actor {
        path: Path::new(vec![keep, out, back_in, settle]),
        motion,
        s_now: back,
    };
    let gap = rng.random_range(5.0..9.0);
    let obstacle = Actor {
        path: Path::new(vec![Piece::line([focal.now()[0] + gap, 0.0], 0.0, 1.0)]),
        motion: Motion::constant(0.0, 0.0, MAX_SPEED),
        s_now: 0.0,
    };
    let layout = Layout {
        pieces: vec![(lane0, RuleFlags::empty()), (lane1, RuleFlags::empty())],
        links: vec![],
        routes: vec![vec![0], vec![1]],
    };
    (layout, focal, vec![obstacle])
}

fn yield_crossing(tm: &Timing, rng: &mut ChaCha8Rng) -> (Layout, Actor, Vec<Actor>) {
    let v0 = rng.random_range(6.0..11.0);
    let brake_at = (tm.t_now + rng.random_range(-1.0..0.5)).max(0.0);
    let decel = rng.random_range(1.5..2.5);
    let motion = Motion {
        v0,
        phases: if brake_at > 0.0 {
            vec![(0.0, 0.0), (brake_at, -decel)]
        } else {
            vec![(0.0, -decel)]
        },
        v_max: MAX_SPEED,
    };
    let (hist, _) = travel(&motion, tm.t_now, tm.t_end);
    let to_stop = motion.state(tm.t_now + 3600.0).0 - hist;
    let stop_line = to_stop + rng.random_range(2.0..5.0);
    let cross_x = stop_line + CONNECTOR_RADIUS;
    let reach = 40.0;
    let back = hist + 10.0;

    let approach = Piece::line([-back, 0.0], 0.0, back + stop_line);
    let through = approach.then(0.0, 2.0 * CONNECTOR_RADIUS);
    let connector = approach.then(-1.0 / CONNECTOR_RADIUS, CONNECTOR_RADIUS * FRAC_PI_2);
    let cross_in = Piece::line([cross_x, reach], -FRAC_PI_2, reach + CONNECTOR_RADIUS);
    let int = RuleFlags::IN_INTERSECTION;
    let layout = Layout {
        pieces: vec![
            (approach, RuleFlags::empty()),
            (through, RuleFlags::STRAIGHT.union(int)),
            (through.then(0.0, 30.0), RuleFlags::empty()),
            (connector, RuleFlags::RIGHT_TURN.union(int)),
            (cross_in, RuleFlags::empty()),
            (cross_in.then(0.0, 30.0), RuleFlags::empty()),
        ],
        links: vec![(0, 1), (1, 2), (0, 3), (3, 5), (4, 5)],
        routes: vec![vec![0, 1, 2], vec![0, 3, 5], vec![4, 5]],
    };
    let focal = Actor {
        path: layout.route_path(&[0, 1, 2]),
        motion,
        s_now: back,
    };
    let v_cross = rng.random_range(5.0..10.0);
    let arrival = rng.random_range(0.3..2.0);
    let crossing = Actor {
        path: layout.route_path(&[4, 5]),
        motion: Motion::constant(v_cross, 0.0, MAX_SPEED),
        s_now: reach - v_cross * arrival,
    };
    (layout, focal, vec![crossing])
}

/// Background traffic on a random route, kept a few meters from the other
/// agents at the last history step where possible.
fn background(layout: &Layout, placed: &[Actor], rng: &mut ChaCha8Rng) -> Actor {
    let mut candidate = None;
    for _ in 0..8 {
        let route = &layout.routes[rng.random_range(0..layout.routes.len())];
        let path = layout.route_path(route);
        let cap = speed_cap(&path).min(12.0);
        let v0 = rng.random_range(0.5 * cap.min(4.0)..cap);
        let accel = if path.max_curvature() > 0.0 {
            rng.random_range(-0.5..0.0)
        } else {
            rng.random_range(-0.8..0.8)
        };
        let len = path.length();
        let s_now = rng.random_range(0.1 * len..0.9 * len);
        let actor = Actor {
            path,
            motion: Motion::constant(v0, accel, MAX_SPEED),
            s_now,
        };
        let p = actor.now();
        let clear = placed.iter().all(|a| {
            let q = a.now();
            (p[0] - q[0]).hypot(p[1] - q[1]) >= 6.0
        });
        candidate = Some(actor);
        if clear {
            break;
        }
    }
    candidate.expect("at least one attempt")
}

/// Generates one scene in world coordinates. Identical specs give identical
/// scenes.
pub fn generate_scene(spec: &ScenarioSpec) -> Result<Scene, SpecError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (t, f) = (spec.history_steps, spec.future_steps);
    let tm = Timing {
        t_now: (t - 1) as f64 * DT,
        t_end: (t + f - 1) as f64 * DT,
    };
    let (layout, focal, special) = match spec.kind {
        ScenarioKind::Straight => straight(spec, &tm, &mut rng),
        ScenarioKind::LeftTurn => turn(true, &tm, &mut rng),
        ScenarioKind::RightTurn => turn(false, &tm, &mut rng),
        ScenarioKind::LaneChangeBlocked => lane_change_blocked(spec, &tm, &mut rng),
        ScenarioKind::YieldCrossing => yield_crossing(&tm, &mut rng),
    };
    let mut actors = vec![focal];
    actors.extend(special);
    while actors.len() < spec.n_agents {
        let a = background(&layout, &actors, &mut rng);
        actors.push(a);
    }

    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("validated sigma"));
    let mut histories = Vec::with_capacity(actors.len());
    let mut futures = Vec::with_capacity(actors.len());
    for (i, actor) in actors.iter().enumerate() {
        let track = actor.positions(t + f, tm.t_now);
        let mut hist: Vec<Vec2> = track[..t].to_vec();
        if let Some(n) = &noise {
            for p in &mut hist {
                p[0] += n.sample(&mut rng);
                p[1] += n.sample(&mut rng);
            }
        }
        let mut validity = vec![true; t];
        // Background traffic sometimes enters the sensor range late.
        if i > 0 && rng.random_bool(0.25) {
            let hidden = rng.random_range(1..=(t / 2).max(1));
            validity[..hidden].iter_mut().for_each(|v| *v = false);
        }
        histories.push(preprocess_history(&hist, &validity).expect("generated histories are valid"));
        futures.push(Future::fully_observed(track[t..].to_vec()));
    }

    let mut order: Vec<usize> = (0..actors.len()).collect();
    order.shuffle(&mut rng);
    let focal_index = order.iter().position(|i| *i == 0).expect("focal present");
    let histories = order.iter().map(|i| histories[*i].clone()).collect();
    let futures = order.iter().map(|i| futures[*i].clone()).collect();

    let (segments, pairs) = layout.segments();
    let graph = build_lane_graph(segments, &pairs).expect("generated lane graphs are valid");
    let local = Scene::new(
        format!("{}-{}", spec.kind, spec.seed),
        histories,
        graph,
        focal_index,
        Some(futures),
        f,
    )
    .expect("generated scenes are consistent")
    .with_label(spec.kind.name());
    let world = RigidTransform::new(
        rng.random_range(-PI..PI),
        [rng.random_range(-200.0..200.0), rng.random_range(-200.0..200.0)],
    );
    Ok(local.transformed(&world))
}
