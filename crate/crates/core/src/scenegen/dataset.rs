//! Scene corpora with a manifest that is enough to regenerate them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{generate_scene, ScenarioKind, ScenarioSpec, SpecError};
use crate::scene::io::{write_scenes, SceneIoError};

pub const MANIFEST_VERSION: &str = "mapfuse-dataset-v1";

/// Training scenes use even seeds, validation scenes odd ones, so the two
/// splits never share a scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn parity(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
        }
    }
}

/// `count` scenes of one kind; every field but the seed of the scenario spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub kind: ScenarioKind,
    pub count: usize,
    pub n_agents: usize,
    pub history_steps: usize,
    pub future_steps: usize,
    pub lane_spacing: f64,
    pub noise_sigma: f64,
}

impl DatasetEntry {
    /// Defaults of [`ScenarioSpec::new`].
    pub fn new(kind: ScenarioKind, count: usize) -> Self {
        let d = ScenarioSpec::new(kind, 0);
        Self {
            kind,
            count,
            n_agents: d.n_agents,
            history_steps: d.history_steps,
            future_steps: d.future_steps,
            lane_spacing: d.lane_spacing,
            noise_sigma: d.noise_sigma,
        }
    }

    pub fn spec(&self, seed: u64) -> ScenarioSpec {
        ScenarioSpec {
            kind: self.kind,
            n_agents: self.n_agents,
            history_steps: self.history_steps,
            future_steps: self.future_steps,
            lane_spacing: self.lane_spacing,
            noise_sigma: self.noise_sigma,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub entries: Vec<DatasetEntry>,
    pub base_seed: u64,
    pub split: Split,
}

impl DatasetSpec {
    /// Scenario specs in file order: entries in order, seeds counting up.
    pub fn scenario_specs(&self) -> Vec<ScenarioSpec> {
        let mut out = Vec::new();
        let mut j = 0u64;
        for e in &self.entries {
            for _ in 0..e.count {
                let seed = self
                    .base_seed
                    .wrapping_add(j)
                    .wrapping_mul(2)
                    .wrapping_add(self.split.parity());
                out.push(e.spec(seed));
                j += 1;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub scene_file: String,
    pub spec: DatasetSpec,
    pub seeds: Vec<u64>,
    pub kind_counts: BTreeMap<String, usize>,
}

#[derive(Debug, Error)]
pub enum GenError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Scenes(#[from] SceneIoError),
    #[error("{path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
}

/// `scenes.jsonl` → `scenes.jsonl.manifest.json`.
pub fn manifest_path(scene_file: &Path) -> PathBuf {
    let mut name = scene_file.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    scene_file.with_file_name(name)
}

/// Generates every scene of `spec`, writes them to `path` in seed order and
/// the manifest next to them.
pub fn generate_dataset(spec: &DatasetSpec, path: &Path) -> Result<DatasetManifest, GenError> {
    let specs = spec.scenario_specs();
    for s in &specs {
        s.validate()?;
    }
    let scenes = specs.par_iter().map(generate_scene).collect::<Result<Vec<_>, _>>()?;
    write_scenes(path, &scenes)?;

    let mut kind_counts = BTreeMap::new();
    for s in &specs {
        *kind_counts.entry(s.kind.name().to_string()).or_insert(0) += 1;
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION.to_string(),
        scene_file: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        spec: spec.clone(),
        seeds: specs.iter().map(|s| s.seed).collect(),
        kind_counts,
    };
    let mpath = manifest_path(path);
    let text = serde_json::to_string_pretty(&manifest).expect("manifests serialise");
    std::fs::write(&mpath, text + "\n").map_err(|e| GenError::Manifest {
        path: mpath,
        msg: e.to_string(),
    })?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest, GenError> {
    let err = |msg: String| GenError::Manifest {
        path: path.to_path_buf(),
        msg,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    if m.version != MANIFEST_VERSION {
        return Err(err(format!(
            "unsupported version {:?}, expected {MANIFEST_VERSION:?}",
            m.version
        )));
    }
    Ok(m)
}

/// Rebuilds the scene file described by a manifest.
pub fn regenerate(manifest: &DatasetManifest, path: &Path) -> Result<DatasetManifest, GenError> {
    generate_dataset(&manifest.spec, path)
}
