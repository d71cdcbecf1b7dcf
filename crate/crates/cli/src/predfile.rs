//! Prediction files: a header line, then one JSON object per scene.
//!
//! ```text
//! {"format":"mapfuse-pred-v1","k":6,"future_steps":30}
//! {"scene":"straight-0","modes":[{"score":0.4,"trajectory":[[x,y],...]},...]}
//! ```
//!
//! Positions are in the scene's own frame, in meters.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use mapfuse_core::net::Prediction;
use serde::{Deserialize, Serialize};

pub const PRED_FORMAT: &str = "mapfuse-pred-v1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    k: usize,
    future_steps: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Mode {
    score: f64,
    trajectory: Vec<[f64; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Line {
    scene: String,
    modes: Vec<Mode>,
}

/// Writes `(scene id, prediction)` pairs; every prediction must have the
/// same number of modes and steps.
pub fn write_predictions(path: &Path, rows: &[(String, Prediction)]) -> Result<()> {
    let (k, f) = rows
        .first()
        .map_or((0, 0), |(_, p)| (p.k(), p.trajectories.first().map_or(0, Vec::len)));
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    let header = Header {
        format: PRED_FORMAT.into(),
        k,
        future_steps: f,
    };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for (scene, p) in rows {
        ensure!(p.k() == k, "scene {scene}: {} modes, expected {k}", p.k());
        let modes = p
            .trajectories
            .iter()
            .zip(&p.scores)
            .map(|(t, s)| {
                ensure!(t.len() == f, "scene {scene}: {} steps, expected {f}", t.len());
                Ok(Mode {
                    score: *s,
                    trajectory: t.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let line = Line {
            scene: scene.clone(),
            modes,
        };
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<(String, Prediction)>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut lines = BufReader::new(file).lines();
    let Some(first) = lines.next() else {
        bail!("{}: empty prediction file", path.display());
    };
    let header: Header =
        serde_json::from_str(&first?).with_context(|| format!("{}: bad header line", path.display()))?;
    ensure!(
        header.format == PRED_FORMAT,
        "{}: format {:?}, expected {PRED_FORMAT:?}",
        path.display(),
        header.format
    );
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 2))?;
        ensure!(
            l.modes.len() == header.k && l.modes.iter().all(|m| m.trajectory.len() == header.future_steps),
            "{}:{}: expected {} modes of {} steps",
            path.display(),
            i + 2,
            header.k,
            header.future_steps
        );
        let (scores, trajectories) = l.modes.into_iter().map(|m| (m.score, m.trajectory)).unzip();
        rows.push((l.scene, Prediction { trajectories, scores }));
    }
    Ok(rows)
}
