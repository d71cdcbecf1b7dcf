//! Analytic constant-curvature paths and longitudinal motion profiles.

use crate::scene::Vec2;

/// A constant-curvature piece: a straight line when `curvature == 0`,
/// otherwise a circular arc (positive curvature turns left).
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Piece {
    pub start: Vec2,
    /// Heading at `start`, radians.
    pub heading: f64,
    pub curvature: f64,
    pub length: f64,
}

impl Piece {
    pub fn line(start: Vec2, heading: f64, length: f64) -> Self {
        Self {
            start,
            heading,
            curvature: 0.0,
            length,
        }
    }

    pub fn arc(start: Vec2, heading: f64, curvature: f64, length: f64) -> Self {
        Self {
            start,
            heading,
            curvature,
            length,
        }
    }

    /// Position at arc length `s` (not clamped to the piece).
    pub fn point(&self, s: f64) -> Vec2 {
        let h = self.heading;
        if self.curvature == 0.0 {
            return [self.start[0] + s * h.cos(), self.start[1] + s * h.sin()];
        }
        let k = self.curvature;
        let h1 = h + k * s;
        [
            self.start[0] + (h1.sin() - h.sin()) / k,
            self.start[1] - (h1.cos() - h.cos()) / k,
        ]
    }

    pub fn heading_at(&self, s: f64) -> f64 {
        self.heading + self.curvature * s
    }

    pub fn end(&self) -> Vec2 {
        self.point(self.length)
    }

    pub fn end_heading(&self) -> f64 {
        self.heading_at(self.length)
    }

    /// The piece that continues this one with the given curvature and length.
    pub fn then(&self, curvature: f64, length: f64) -> Piece {
        Piece::arc(self.end(), self.end_heading(), curvature, length)
    }
}

/// A chain of pieces traversed by arc length; extended linearly before its
/// start and after its end.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Path {
    pieces: Vec<Piece>,
}

impl Path {
    pub fn new(pieces: Vec<Piece>) -> Self {
        assert!(!pieces.is_empty(), "a path needs at least one piece");
        Self { pieces }
    }

    pub fn length(&self) -> f64 {
        self.pieces.iter().map(|p| p.length).sum()
    }

    pub fn max_curvature(&self) -> f64 {
        self.pieces.iter().map(|p| p.curvature.abs()).fold(0.0, f64::max)
    }

    pub fn point(&self, s: f64) -> Vec2 {
        if s < 0.0 {
            let first = &self.pieces[0];
            return Piece::line(first.start, first.heading, 0.0).point(s);
        }
        let mut rest = s;
        for p in &self.pieces {
            if rest <= p.length {
                return p.point(rest);
            }
            rest -= p.length;
        }
        let last = self.pieces.last().expect("non-empty");
        Piece::line(last.end(), last.end_heading(), 0.0).point(rest)
    }
}

/// Longitudinal motion with piecewise-constant acceleration, speed clamped
/// to `[0, v_max]`. Time is measured from the first history step, seconds.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Motion {
    pub v0: f64,
    /// `(start time, acceleration)`, sorted by start time; the first phase
    /// starts at 0.
    pub phases: Vec<(f64, f64)>,
    pub v_max: f64,
}

fn advance(v: f64, a: f64, dt: f64, v_max: f64) -> (f64, f64) {
    if a < 0.0 {
        let t_stop = v / -a;
        if dt >= t_stop {
            return (v * v / (-2.0 * a), 0.0);
        }
    } else if a > 0.0 {
        let t_cap = (v_max - v) / a;
        if dt >= t_cap {
            let ds = v * t_cap + 0.5 * a * t_cap * t_cap + v_max * (dt - t_cap);
            return (ds, v_max);
        }
    }
    (v * dt + 0.5 * a * dt * dt, v + a * dt)
}

impl Motion {
    pub fn constant(v: f64, a: f64, v_max: f64) -> Self {
        Self {
            v0: v,
            phases: vec![(0.0, a)],
            v_max,
        }
    }

    /// `(distance travelled since time 0, speed)` at time `t`.
    pub fn state(&self, t: f64) -> (f64, f64) {
        let (mut s, mut v) = (0.0, self.v0);
        for (i, (start, a)) in self.phases.iter().enumerate() {
            if t <= *start {
                break;
            }
            let end = self.phases.get(i + 1).map_or(t, |(next, _)| next.min(t));
            let (ds, v1) = advance(v, *a, end - start, self.v_max);
            s += ds;
            v = v1;
        }
        (s, v)
    }
}
