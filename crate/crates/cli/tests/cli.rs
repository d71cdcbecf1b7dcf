use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mapfuse_cli::{read_predictions, RunManifest};
use tempfile::TempDir;

const CONFIG: &str = r#"{
  "model": {"d_a": 8, "d_m": 8, "mlp_hidden": 8, "k": 6, "history_steps": 6, "future_steps": 5},
  "train": {"batch_size": 8, "schedule": [
    {"stage": "warmup", "epochs": 1, "lr": 0.001},
    {"stage": "allocation", "epochs": 1, "lr": 0.001}
  ]}
}"#;

fn mapfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mapfuse"))
        .args(args)
        .env("MAPFUSE_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = mapfuse(args);
    assert!(
        out.status.success(),
        "mapfuse {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A 50-scene corpus, a config file and one trained checkpoint.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(f.path("config.json"), CONFIG).unwrap();
        ok(&[
            "gen",
            "--out",
            s(&f.path("scenes.jsonl")),
            "--count",
            "10",
            "--history-steps",
            "6",
            "--future-steps",
            "5",
            "--seed",
            "3",
        ]);
        f.train("model.ckpt", "0");
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, name: &str, seed: &str) {
        ok(&[
            "train",
            "--scenes",
            s(&self.path("scenes.jsonl")),
            "--config",
            s(&self.path("config.json")),
            "--out",
            s(&self.path(name)),
            "--seed",
            seed,
        ]);
    }
}

#[test]
fn gen_train_eval_round_trip() {
    let f = Fixture::new();
    let scenes = std::fs::read_to_string(f.path("scenes.jsonl")).unwrap();
    assert_eq!(scenes.lines().count(), 50);
    assert!(f.path("scenes.jsonl.manifest.json").exists());
    assert!(f.path("scenes.jsonl.run.json").exists());
    assert!(f.path("model.ckpt").exists());
    let log = std::fs::read_to_string(f.path("model.ckpt.log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("epoch,stage,mean_loss,lr"));

    let table = f.path("metrics.csv");
    ok(&[
        "eval",
        "--scenes",
        s(&f.path("scenes.jsonl")),
        "--checkpoints",
        s(&f.path("model.ckpt")),
        "--baseline",
        "--out",
        s(&table),
    ]);
    let text = std::fs::read_to_string(&table).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("name,minADE,minFDE,brier_minFDE,MR,hit_1"));
    assert!(lines[1].starts_with("model,"));
    assert!(lines[2].starts_with("constant-velocity,"));

    let m = RunManifest::read(&f.path("metrics.csv.run.json")).unwrap();
    assert_eq!(m.command, "eval");
    assert_eq!(m.config_hash.len(), 64);
    let t = RunManifest::read(&f.path("model.ckpt.run.json")).unwrap();
    assert_eq!(t.seed, Some(0));
    assert!(t.args.iter().any(|a| a == "--config"));
}

#[test]
fn predict_emits_k_modes_with_normalized_scores() {
    let f = Fixture::new();
    let out = f.path("preds.jsonl");
    ok(&[
        "predict",
        "--scenes",
        s(&f.path("scenes.jsonl")),
        "--checkpoint",
        s(&f.path("model.ckpt")),
        "--out",
        s(&out),
    ]);
    assert!(std::fs::read_to_string(&out)
        .unwrap()
        .starts_with(r#"{"format":"mapfuse-pred-v1""#));
    let preds = read_predictions(&out).unwrap();
    assert_eq!(preds.len(), 50);
    for (_, p) in &preds {
        assert_eq!(p.trajectories.len(), 6);
        assert!(p.trajectories.iter().all(|t| t.len() == 5));
        assert!((p.scores.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn commands_are_reproducible() {
    let f = Fixture::new();
    f.train("again.ckpt", "0");
    assert_eq!(
        std::fs::read(f.path("model.ckpt")).unwrap(),
        std::fs::read(f.path("again.ckpt")).unwrap()
    );
    ok(&[
        "gen",
        "--out",
        s(&f.path("scenes2.jsonl")),
        "--count",
        "10",
        "--history-steps",
        "6",
        "--future-steps",
        "5",
        "--seed",
        "3",
    ]);
    assert_eq!(
        std::fs::read(f.path("scenes.jsonl")).unwrap(),
        std::fs::read(f.path("scenes2.jsonl")).unwrap()
    );
    for name in ["a.csv", "b.csv"] {
        ok(&[
            "eval",
            "--scenes",
            s(&f.path("scenes.jsonl")),
            "--checkpoint",
            s(&f.path("model.ckpt")),
            "--out",
            s(&f.path(name)),
        ]);
    }
    assert_eq!(
        std::fs::read(f.path("a.csv")).unwrap(),
        std::fs::read(f.path("b.csv")).unwrap()
    );
    let a = RunManifest::read(&f.path("a.csv.run.json")).unwrap();
    let b = RunManifest::read(&f.path("b.csv.run.json")).unwrap();
    assert_eq!(a.config_hash, b.config_hash);
}

#[test]
fn attention_export_covers_every_stage() {
    let f = Fixture::new();
    let out = f.path("attn");
    ok(&[
        "export-attention",
        "--scenes",
        s(&f.path("scenes.jsonl")),
        "--checkpoint",
        s(&f.path("model.ckpt")),
        "--scene-index",
        "2",
        "--out",
        s(&out),
    ]);
    let csv = std::fs::read_to_string(out.join("attention.csv")).unwrap();
    let mut sets = std::collections::BTreeSet::new();
    for line in csv.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        sets.insert((cells[0].to_string(), cells[1].to_string()));
    }
    let expected: std::collections::BTreeSet<(String, String)> =
        [("M2A_e", "NA".to_string()), ("M2A_s", "NA".to_string())]
            .into_iter()
            .map(|(a, b)| (a.to_string(), b))
            .chain((0..6).map(|k| ("M2A_m".to_string(), k.to_string())))
            .collect();
    assert_eq!(sets, expected);
    let svg = std::fs::read_to_string(out.join("attention.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert!(svg.contains("<circle") && svg.contains("<polyline"));
    assert!(out.join("run.json").exists());
}

#[test]
fn ensemble_of_checkpoints_is_evaluable() {
    let f = Fixture::new();
    f.train("second.ckpt", "1");
    let ckpts = format!("{},{}", s(&f.path("model.ckpt")), s(&f.path("second.ckpt")));
    let preds = f.path("ens.jsonl");
    ok(&[
        "ensemble",
        "--scenes",
        s(&f.path("scenes.jsonl")),
        "--checkpoints",
        &ckpts,
        "--k-out",
        "6",
        "--out",
        s(&preds),
    ]);
    let rows = read_predictions(&preds).unwrap();
    assert_eq!(rows.len(), 50);
    assert!(rows
        .iter()
        .all(|(_, p)| p.k() == 6 && (p.scores.iter().sum::<f64>() - 1.0).abs() < 1e-6));
    ok(&[
        "eval",
        "--scenes",
        s(&f.path("scenes.jsonl")),
        "--predictions",
        s(&preds),
        "--out",
        s(&f.path("ens.csv")),
    ]);
    let text = std::fs::read_to_string(f.path("ens.csv")).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("ens,"));
}

#[test]
fn ablation_writes_one_row_per_topology() {
    let f = Fixture::new();
    let out = f.path("ablation.csv");
    ok(&[
        "ablate",
        "--scenes",
        s(&f.path("scenes.jsonl")),
        "--eval-scenes",
        s(&f.path("scenes.jsonl")),
        "--config",
        s(&f.path("config.json")),
        "--stage-schedule",
        "warmup:1@1e-3",
        "--row",
        "one-stage",
        "--row",
        "full",
        "--out",
        s(&out),
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    let names: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["one-stage", "full"]);
}

#[test]
fn resumed_training_continues_the_schedule() {
    let f = Fixture::new();
    let first = f.path("model.ckpt");
    let resumed = f.path("resumed.ckpt");
    ok(&[
        "train",
        "--scenes",
        s(&f.path("scenes.jsonl")),
        "--checkpoint",
        s(&first),
        "--out",
        s(&resumed),
    ]);
    // The schedule was already finished, so resuming changes nothing.
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&resumed).unwrap());
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let f = Fixture::new();
    let missing = mapfuse(&[
        "eval",
        "--scenes",
        "/nonexistent/scenes.jsonl",
        "--baseline",
        "--out",
        s(&f.path("x.csv")),
    ]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error:"));

    std::fs::write(f.path("broken.jsonl"), "{not json\n").unwrap();
    let broken = mapfuse(&[
        "predict",
        "--scenes",
        s(&f.path("broken.jsonl")),
        "--checkpoint",
        s(&f.path("model.ckpt")),
        "--out",
        s(&f.path("p.jsonl")),
    ]);
    assert!(!broken.status.success());
    assert!(String::from_utf8_lossy(&broken.stderr).contains("broken.jsonl"));

    std::fs::write(f.path("fake.ckpt"), "hello").unwrap();
    let ckpt = mapfuse(&[
        "predict",
        "--scenes",
        s(&f.path("scenes.jsonl")),
        "--checkpoint",
        s(&f.path("fake.ckpt")),
        "--out",
        s(&f.path("p.jsonl")),
    ]);
    assert!(!ckpt.status.success());

    let topo = mapfuse(&[
        "train",
        "--scenes",
        s(&f.path("scenes.jsonl")),
        "--out",
        s(&f.path("t.ckpt")),
        "--topology",
        "m2a_x",
    ]);
    assert!(!topo.status.success());
    assert!(String::from_utf8_lossy(&topo.stderr).contains("m2a_x"));
}

#[test]
fn horizon_mismatch_is_reported() {
    let f = Fixture::new();
    ok(&[
        "gen",
        "--out",
        s(&f.path("long.jsonl")),
        "--count",
        "1",
        "--history-steps",
        "9",
        "--future-steps",
        "5",
    ]);
    let out = mapfuse(&[
        "predict",
        "--scenes",
        s(&f.path("long.jsonl")),
        "--checkpoint",
        s(&f.path("model.ckpt")),
        "--out",
        s(&f.path("p.jsonl")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("history steps"));
}
