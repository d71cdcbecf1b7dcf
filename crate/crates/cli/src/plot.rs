//! Static SVG rendering of one scene: lanes, histories, ground truth,
//! predicted modes and attention weights as dots on lane segments.

use std::fmt::Write;

use mapfuse_core::net::{AttentionRecord, Prediction, Stage};
use mapfuse_core::scene::{Scene, Vec2};

const SIZE: f64 = 800.0;
const MARGIN: f64 = 30.0;
/// Radius of the dot for the largest attention weight of a stage, pixels.
const MAX_DOT: f64 = 12.0;

const STAGE_COLORS: [(Stage, &str); 3] = [
    (Stage::M2aE, "#1f77b4"),
    (Stage::M2aS, "#2ca02c"),
    (Stage::M2aM, "#d62728"),
];

struct View {
    min: Vec2,
    scale: f64,
}

impl View {
    fn fit(points: impl Iterator<Item = Vec2>) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in points {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        if !lo[0].is_finite() {
            return Self {
                min: [0.0; 2],
                scale: 1.0,
            };
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1.0);
        Self {
            min: lo,
            scale: (SIZE - 2.0 * MARGIN) / span,
        }
    }

    /// Screen coordinates with y pointing up.
    fn px(&self, p: Vec2) -> (f64, f64) {
        (
            MARGIN + (p[0] - self.min[0]) * self.scale,
            SIZE - MARGIN - (p[1] - self.min[1]) * self.scale,
        )
    }

    fn polyline(&self, svg: &mut String, pts: &[Vec2], style: &str) {
        if pts.len() < 2 {
            return;
        }
        let coords: Vec<String> = pts
            .iter()
            .map(|p| {
                let (x, y) = self.px(*p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" {style}/>"#, coords.join(" "));
    }
}

/// Mean weight per lane segment of the focal agent's records of `stage`
/// (averaged over modes for the per-mode stage).
pub fn node_weights(records: &[AttentionRecord], focal: usize, stage: Stage, n_nodes: usize) -> Vec<f64> {
    let mut sum = vec![0.0; n_nodes];
    let mut modes = std::collections::BTreeSet::new();
    for r in records
        .iter()
        .filter(|r| r.agent == focal && r.stage == stage && r.node < n_nodes)
    {
        sum[r.node] += r.weight;
        modes.insert(r.mode);
    }
    let n = modes.len().max(1) as f64;
    sum.iter().map(|w| w / n).collect()
}

/// Renders `scene` with `prediction` for its focal agent and the focal
/// agent's attention records. All inputs share one frame.
pub fn render_svg(scene: &Scene, prediction: &Prediction, attention: &[AttentionRecord]) -> String {
    let segments = scene.lane_graph().segments();
    let ends = |c: Vec2, d: Vec2| {
        [
            [c[0] - 0.5 * d[0], c[1] - 0.5 * d[1]],
            [c[0] + 0.5 * d[0], c[1] + 0.5 * d[1]],
        ]
    };
    let focal = scene.focal_index();

    let mut all: Vec<Vec2> = segments.iter().flat_map(|s| ends(s.center, s.delta)).collect();
    for a in scene.agents() {
        all.extend(
            a.positions()
                .iter()
                .zip(a.validity())
                .filter(|(_, v)| **v)
                .map(|(p, _)| *p),
        );
    }
    if let Some(f) = scene.futures() {
        all.extend(f[focal].positions.iter().copied());
    }
    all.extend(prediction.trajectories.iter().flatten().copied());
    let view = View::fit(all.into_iter());

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(svg, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = writeln!(svg, r#"<g id="lanes">"#);
    for s in segments {
        view.polyline(
            &mut svg,
            &ends(s.center, s.delta),
            r##"stroke="#bbbbbb" stroke-width="1.5""##,
        );
    }
    let _ = writeln!(svg, "</g>");

    let _ = writeln!(svg, r#"<g id="attention">"#);
    for (stage, color) in STAGE_COLORS {
        let w = node_weights(attention, focal, stage, segments.len());
        let max = w.iter().cloned().fold(0.0, f64::max);
        if max <= 0.0 {
            continue;
        }
        for (s, w) in segments.iter().zip(&w).filter(|(_, w)| **w > 0.0) {
            let (x, y) = view.px(s.center);
            let r = MAX_DOT * w / max;
            let _ = writeln!(
                svg,
                r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r:.2}" fill="{color}" fill-opacity="0.35"><title>{} {w:.4}</title></circle>"#,
                stage.name()
            );
        }
    }
    let _ = writeln!(svg, "</g>");

    let _ = writeln!(svg, r#"<g id="histories">"#);
    for (i, a) in scene.agents().iter().enumerate() {
        let pts: Vec<Vec2> = a
            .positions()
            .iter()
            .zip(a.validity())
            .filter(|(_, v)| **v)
            .map(|(p, _)| *p)
            .collect();
        let style = if i == focal {
            r##"stroke="#000000" stroke-width="3""##
        } else {
            r##"stroke="#7f7f7f" stroke-width="2""##
        };
        view.polyline(&mut svg, &pts, style);
    }
    let _ = writeln!(svg, "</g>");

    if let Some(f) = scene.futures() {
        let fut = &f[focal];
        let pts: Vec<Vec2> = fut
            .positions
            .iter()
            .zip(&fut.validity)
            .filter(|(_, v)| **v)
            .map(|(p, _)| *p)
            .collect();
        let _ = writeln!(svg, r#"<g id="ground-truth">"#);
        view.polyline(
            &mut svg,
            &pts,
            r##"stroke="#000000" stroke-width="2" stroke-dasharray="6 4""##,
        );
        let _ = writeln!(svg, "</g>");
    }

    let _ = writeln!(svg, r#"<g id="predictions">"#);
    let last = scene.focal().current_position();
    for (traj, score) in prediction.trajectories.iter().zip(&prediction.scores) {
        let mut pts = vec![last];
        pts.extend(traj.iter().copied());
        let opacity = 0.25 + 0.75 * score.clamp(0.0, 1.0);
        view.polyline(
            &mut svg,
            &pts,
            &format!(r##"stroke="#ff7f0e" stroke-width="2" stroke-opacity="{opacity:.3}""##),
        );
        if let Some(end) = traj.last() {
            let (x, y) = view.px(*end);
            let _ = writeln!(
                svg,
                r##"<text x="{:.2}" y="{:.2}" font-size="11" fill="#ff7f0e">{score:.2}</text>"##,
                x + 4.0,
                y - 4.0
            );
        }
    }
    let _ = writeln!(svg, "</g>");

    let _ = writeln!(svg, r#"<g id="legend" font-size="12" font-family="sans-serif">"#);
    for (i, (stage, color)) in STAGE_COLORS.iter().enumerate() {
        let y = 20.0 + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<circle cx="16" cy="{y}" r="5" fill="{color}" fill-opacity="0.5"/>"#
        );
        let _ = writeln!(svg, r#"<text x="26" y="{}">{}</text>"#, y + 4.0, stage.name());
    }
    let _ = writeln!(svg, "</g>");
    svg.push_str("</svg>\n");
    svg
}
