//! Line-oriented scene files (`mapfuse-scene-v1`).
//!
//! Each line is one JSON object:
//!
//! ```text
//! {"version":"mapfuse-scene-v1","id":"s0","kind":"straight","horizon":30,
//!  "agents":[{"positions":[[x,y],...],"validity":[1,...]}],
//!  "lanes":[{"start":[x,y],"end":[x,y],"flags":[l,r,s,i]}],
//!  "lane_successors":[[i,j],...],"focal":0,
//!  "future":[{"positions":[[x,y],...],"validity":[1,...]}]}
//! ```
//!
//! Units are meters. `future` is omitted for inference-only scenes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{build_lane_graph, preprocess_history, Future, LaneSegment, RuleFlags, Scene, SceneError, Vec2};

pub const SCENE_VERSION: &str = "mapfuse-scene-v1";

#[derive(Debug, Error)]
pub enum SceneIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}:{line}: unsupported version {found:?}, expected {SCENE_VERSION:?}")]
    Version { path: PathBuf, line: usize, found: String },
    #[error("{path}:{line}: {source}")]
    Invalid {
        path: PathBuf,
        line: usize,
        #[source]
        source: SceneError,
    },
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrackRecord {
    pub positions: Vec<Vec2>,
    pub validity: Vec<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LaneRecord {
    pub start: Vec2,
    pub end: Vec2,
    pub flags: Vec<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SceneRecord {
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    pub horizon: usize,
    pub agents: Vec<TrackRecord>,
    pub lanes: Vec<LaneRecord>,
    pub lane_successors: Vec<[usize; 2]>,
    pub focal: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub future: Option<Vec<TrackRecord>>,
}

fn flags(v: &[u8]) -> Vec<bool> {
    v.iter().map(|b| *b != 0).collect()
}

fn bits(v: &[bool]) -> Vec<u8> {
    v.iter().map(|b| u8::from(*b)).collect()
}

impl SceneRecord {
    pub fn from_scene(scene: &Scene) -> Self {
        SceneRecord {
            version: SCENE_VERSION.to_string(),
            id: Some(scene.id().to_string()),
            kind: scene.label().map(str::to_string),
            horizon: scene.horizon(),
            agents: scene
                .agents()
                .iter()
                .map(|a| TrackRecord {
                    positions: a.positions().to_vec(),
                    validity: bits(a.validity()),
                })
                .collect(),
            lanes: scene
                .lane_graph()
                .segments()
                .iter()
                .map(|s| LaneRecord {
                    start: s.start(),
                    end: s.end(),
                    flags: s.rule_flags.bits().to_vec(),
                })
                .collect(),
            lane_successors: scene
                .lane_graph()
                .successor_pairs()
                .into_iter()
                .map(|(a, b)| [a, b])
                .collect(),
            focal: scene.focal_index(),
            future: scene.futures().map(|fs| {
                fs.iter()
                    .map(|f| TrackRecord {
                        positions: f.positions.clone(),
                        validity: bits(&f.validity),
                    })
                    .collect()
            }),
        }
    }

    /// Builds a scene; `fallback_id` names it when the record carries no id.
    pub fn into_scene(self, fallback_id: &str) -> Result<Scene, SceneError> {
        let agents = self
            .agents
            .iter()
            .map(|a| preprocess_history(&a.positions, &flags(&a.validity)))
            .collect::<Result<Vec<_>, _>>()?;
        let segments = self
            .lanes
            .iter()
            .map(|l| {
                Ok(LaneSegment::from_endpoints(
                    l.start,
                    l.end,
                    RuleFlags::from_bits(&l.flags)?,
                ))
            })
            .collect::<Result<Vec<_>, SceneError>>()?;
        let pairs: Vec<(usize, usize)> = self.lane_successors.iter().map(|p| (p[0], p[1])).collect();
        let graph = build_lane_graph(segments, &pairs)?;
        let futures = self.future.map(|fs| {
            fs.into_iter()
                .map(|f| Future {
                    validity: flags(&f.validity),
                    positions: f.positions,
                })
                .collect()
        });
        let id = self.id.unwrap_or_else(|| fallback_id.to_string());
        let scene = Scene::new(id, agents, graph, self.focal, futures, self.horizon)?;
        Ok(match self.kind {
            Some(k) => scene.with_label(k),
            None => scene,
        })
    }
}

/// Serialises one scene as a single line (no trailing newline).
pub fn scene_to_line(scene: &Scene) -> String {
    serde_json::to_string(&SceneRecord::from_scene(scene)).expect("scene records serialise")
}

pub fn write_scenes(path: &Path, scenes: &[Scene]) -> Result<(), SceneIoError> {
    let io_err = |source| SceneIoError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for s in scenes {
        writeln!(w, "{}", scene_to_line(s)).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Parses one line; `line` is 1-based and only used in errors.
pub fn parse_scene_line(path: &Path, line: usize, text: &str) -> Result<Scene, SceneIoError> {
    let record: SceneRecord = serde_json::from_str(text).map_err(|e| SceneIoError::Parse {
        path: path.to_path_buf(),
        line,
        msg: e.to_string(),
    })?;
    if record.version != SCENE_VERSION {
        return Err(SceneIoError::Version {
            path: path.to_path_buf(),
            line,
            found: record.version,
        });
    }
    record
        .into_scene(&format!("{}", line - 1))
        .map_err(|source| SceneIoError::Invalid {
            path: path.to_path_buf(),
            line,
            source,
        })
}

/// Reads every scene of a file in world coordinates. Blank lines are skipped.
pub fn read_scenes(path: &Path) -> Result<Vec<Scene>, SceneIoError> {
    let io_err = |source| SceneIoError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_scene_line(path, i + 1, &line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Scene {
        let a = preprocess_history(&[[0.0, 0.0], [1.0, 0.5], [2.0, 1.0]], &[true, true, true]).unwrap();
        let b = preprocess_history(&[[5.0, 0.0], [5.0, 0.0], [6.0, 0.0]], &[false, true, true]).unwrap();
        let segs = vec![
            LaneSegment::from_endpoints([0.0, 0.0], [2.0, 0.0], RuleFlags::STRAIGHT),
            LaneSegment::from_endpoints(
                [2.0, 0.0],
                [4.0, 0.0],
                RuleFlags::LEFT_TURN.union(RuleFlags::IN_INTERSECTION),
            ),
        ];
        let g = build_lane_graph(segs, &[(0, 1)]).unwrap();
        let futures = vec![
            Future::fully_observed(vec![[3.0, 1.5], [4.0, 2.0]]),
            Future {
                positions: vec![[7.0, 0.0], [0.0, 0.0]],
                validity: vec![true, false],
            },
        ];
        Scene::new("abc", vec![a, b], g, 0, Some(futures), 2)
            .unwrap()
            .with_label("straight")
    }

    #[test]
    fn line_round_trip() {
        let s = sample();
        let line = scene_to_line(&s);
        assert!(line.contains(SCENE_VERSION));
        let back = parse_scene_line(Path::new("mem"), 1, &line).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scenes.jsonl");
        write_scenes(&p, &[sample(), sample()]).unwrap();
        assert_eq!(read_scenes(&p).unwrap().len(), 2);

        let bad = scene_to_line(&sample()).replace(SCENE_VERSION, "mapfuse-scene-v0");
        let err = parse_scene_line(&p, 3, &bad).unwrap_err();
        assert!(matches!(err, SceneIoError::Version { line: 3, .. }));
        assert!(matches!(
            parse_scene_line(&p, 1, "{not json"),
            Err(SceneIoError::Parse { .. })
        ));
        let missing = read_scenes(&dir.path().join("nope.jsonl")).unwrap_err();
        assert!(missing.to_string().contains("nope.jsonl"));
    }
}
