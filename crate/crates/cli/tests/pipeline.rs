//! End-to-end checks of the `nowcast` binary: the full synth -> split ->
//! train -> predict -> evaluate -> plot loop on a miniature scene, plus
//! exit-code and patchify behavior.

use std::path::Path;
use std::process::{Command, Output};

fn nowcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nowcast"))
        .args(args)
        .output()
        .expect("spawning nowcast")
}

fn run_ok(args: &[&str]) -> Output {
    let out = nowcast(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const TINY_CONFIG: &str = r#"
[scene]
seed = 3
n_cells = 4
frame_count = 72
rows = 16
cols = 16
cadence = 15

[split]
block_size = 12
seed = 1

[model]
kind = "unet"
spatial = 16
base_width = 0.03125
seed = 0

[train]
batch_size = 2
max_steps = 3
eval_interval = 2
patience = 10
seed = 0
"#;

#[test]
fn full_pipeline_produces_scores_and_figures() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.toml");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let cfg = cfg.to_str().unwrap();
    let p = |name: &str| root.join(name).to_str().unwrap().to_string();

    run_ok(&["synth", "--config", cfg, "--out", &p("data")]);
    assert!(root.join("data/provenance.json").exists());
    assert!(root.join("data/manifest.json").exists());

    run_ok(&[
        "split",
        "--data",
        &p("data"),
        "--k",
        "12",
        "--seed",
        "1",
        "--out",
        &p("plan.json"),
    ]);
    assert!(root.join("plan.json").exists());

    run_ok(&[
        "train",
        "--config",
        cfg,
        "--data",
        &p("data"),
        "--plan",
        &p("plan.json"),
        "--out",
        &p("run"),
    ]);
    assert!(root.join("run/checkpoint/weights.bin").exists());
    assert!(root.join("run/checkpoint/meta.json").exists());
    assert!(root.join("run/curve.csv").exists());
    assert!(root.join("run/report.json").exists());
    assert!(root.join("run/provenance.json").exists());

    run_ok(&[
        "predict",
        "--ckpt",
        &p("run/checkpoint"),
        "--data",
        &p("data"),
        "--plan",
        &p("plan.json"),
        "--split",
        "test",
        "--out",
        &p("preds"),
    ]);
    assert!(root.join("preds/pred/data.raw").exists());
    assert!(root.join("preds/truth/data.raw").exists());

    run_ok(&[
        "evaluate",
        "--pred",
        &p("preds/pred"),
        "--truth",
        &p("preds/truth"),
        "--out",
        &p("scores.csv"),
    ]);
    let csv = std::fs::read_to_string(root.join("scores.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    // header plus one row per lead time
    assert_eq!(rows.len(), 7, "unexpected csv contents:\n{csv}");
    assert!(rows[0].starts_with("lead_time_min,mae,f1_0.1,f1_1.0"));
    assert!(rows[1].starts_with("15,"));
    assert!(rows[6].starts_with("90,"));

    run_ok(&[
        "plot",
        "--scores",
        &p("scores.csv"),
        "--curve",
        &p("run/curve.csv"),
        "--out",
        &p("figs"),
    ]);
    assert!(root.join("figs/scores_mae.png").exists());
    assert!(root.join("figs/scores_f1.png").exists());
    assert!(root.join("figs/curve.png").exists());
}

#[test]
fn patchify_covers_the_map_in_both_modes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.toml");
    std::fs::write(
        &cfg,
        "[scene]\nseed = 5\nn_cells = 3\nframe_count = 12\nrows = 40\ncols = 40\n",
    )
    .unwrap();
    let p = |name: &str| root.join(name).to_str().unwrap().to_string();
    run_ok(&[
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        &p("data"),
    ]);

    run_ok(&[
        "patchify",
        "--data",
        &p("data"),
        "--isize",
        "32",
        "--tsize",
        "16",
        "--mode",
        "patch",
        "--out",
        &p("patches"),
    ]);
    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("patches/index.json")).unwrap())
            .unwrap();
    let entries = index["entries"].as_array().unwrap();
    // each frame's target rectangles must tile the 40x40 map exactly
    let per_frame = entries
        .iter()
        .filter(|e| e["timestamp"].as_i64() == Some(0))
        .collect::<Vec<_>>();
    let area: u64 = per_frame
        .iter()
        .map(|e| {
            let r = e["target_rect"].as_array().unwrap();
            r[2].as_u64().unwrap() * r[3].as_u64().unwrap()
        })
        .sum();
    assert_eq!(area, 40 * 40);
    for e in entries {
        assert_eq!(e["rows"].as_u64(), Some(32));
        assert_eq!(e["cols"].as_u64(), Some(32));
    }

    run_ok(&[
        "patchify",
        "--data",
        &p("data"),
        "--isize",
        "32",
        "--tsize",
        "16",
        "--mode",
        "resize",
        "--out",
        &p("resized"),
    ]);
    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("resized/index.json")).unwrap())
            .unwrap();
    let entries = index["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 12);
    for e in entries {
        assert_eq!(e["rows"].as_u64(), Some(16));
        assert_eq!(e["cols"].as_u64(), Some(16));
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = nowcast(&["synth", "--bogus-flag", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_dataset_fails_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = nowcast(&[
        "split",
        "--data",
        missing.to_str().unwrap(),
        "--out",
        dir.path().join("plan.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.trim().lines().count(), 1, "stderr: {stderr}");
    assert!(stderr.starts_with("nowcast:"));
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.toml");
    std::fs::write(
        &cfg,
        "[scene]\nseed = 9\nn_cells = 3\nframe_count = 12\nrows = 16\ncols = 16\n",
    )
    .unwrap();
    let p = |name: &str| root.join(name).to_str().unwrap().to_string();
    run_ok(&["synth", "--config", cfg.to_str().unwrap(), "--out", &p("a")]);
    run_ok(&["synth", "--config", cfg.to_str().unwrap(), "--out", &p("b")]);
    assert_dirs_equal(&root.join("a"), &root.join("b"));
}

fn assert_dirs_equal(a: &Path, b: &Path) {
    let mut names: Vec<_> = walk(a, a);
    names.sort();
    let mut other: Vec<_> = walk(b, b);
    other.sort();
    assert_eq!(names, other);
    for rel in names {
        let x = std::fs::read(a.join(&rel)).unwrap();
        let y = std::fs::read(b.join(&rel)).unwrap();
        assert_eq!(x, y, "file {rel} differs");
    }
}

fn walk(root: &Path, dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        let path = entry.path();
        if path.is_dir() {
            out.extend(walk(root, &path));
        } else {
            out.push(path.strip_prefix(root).unwrap().to_string_lossy().into_owned());
        }
    }
    out
}
