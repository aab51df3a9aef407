// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ovseg_core::io::{read_label_png, write_label_png};
use ovseg_core::metrics::LabelMap;

fn ovseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ovseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn kernel_dumps_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("k.csv");
    let res = ovseg(&[
        "kernel",
        "--h",
        "5",
        "--w",
        "7",
        "--sigma",
        "3",
        "--out",
        p(&out),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let text = fs::read_to_string(&out).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.len() == 7));
    assert_eq!(rows[2][3], 0.0);
    let corner = 1.0 - (-(4.0 + 9.0) / 18.0f64).exp();
    assert!((rows[0][0] - corner).abs() < 1e-15);

    let bad = ovseg(&[
        "kernel",
        "--h",
        "5",
        "--w",
        "7",
        "--sigma",
        "0",
        "--out",
        p(&out),
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn gen_writes_images_and_label_maps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"scene": {"image_count": 2, "canvas": 56}}"#);
    let out = dir.path().join("scenes");
    let res = ovseg(&["gen", "--config", p(&cfg), "--out", p(&out)]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    for i in 0..2 {
        let labels = read_label_png(&out.join(format!("labels/{i:04}.png"))).unwrap();
        assert_eq!(labels.dim(), (56, 56));
        labels.validate(12).unwrap();
        let img = out.join(format!("images/{i:04}.png"));
        assert!(img.exists());
    }
    assert!(out.join("association.json").exists());
}

#[test]
fn run_is_byte_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"scene": {"image_count": 4}, "seed_note": null}"#,
    );
    // unknown keys are a configuration error
    let res = ovseg(&[
        "run",
        "--config",
        p(&cfg),
        "--out",
        p(&dir.path().join("x")),
    ]);
    assert_eq!(res.status.code(), Some(2));

    let cfg = write_config(dir.path(), r#"{"scene": {"image_count": 4}}"#);
    let mut reports = Vec::new();
    for (n, workers) in ["1", "4", "1"].iter().enumerate() {
        let out = dir.path().join(format!("run{n}"));
        let res = ovseg(&[
            "run",
            "--config",
            p(&cfg),
            "--out",
            p(&out),
            "--workers",
            workers,
        ]);
        assert!(
            res.status.success(),
            "{}",
            String::from_utf8_lossy(&res.stderr)
        );
        assert!(out.join("audit.jsonl").exists());
        assert!(out.join("pred/0003.png").exists());
        reports.push(fs::read(out.join("report.json")).unwrap());
    }
    assert!(reports.windows(2).all(|w| w[0] == w[1]));
    let parsed: serde_json::Value = serde_json::from_slice(&reports[0]).unwrap();
    for field in ["per_class", "miou", "msg_iou", "ignored_pixels"] {
        assert!(parsed.get(field).is_some(), "missing {field}");
    }
    let first = &parsed["per_class"][0];
    for field in ["id", "name", "iou", "sg_iou", "present"] {
        assert!(first.get(field).is_some(), "missing per_class.{field}");
    }
}

#[test]
fn lossless_run_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{
            "scene": {"image_count": 3},
            "proposals": {"mask_flip_rate": 0.0, "embed_noise": 0.0},
            "sim": {"enabled": false, "gamma": 0.0},
            "ensemble": {"lambda": 0.0}
        }"#,
    );
    let out = dir.path().join("out");
    let res = ovseg(&["run", "--config", p(&cfg), "--out", p(&out)]);
    assert!(res.status.success());
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["miou"].as_f64(), Some(1.0));
}

#[test]
fn empty_config_file_runs_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let res = ovseg(&[
        "run",
        "--config",
        p(&cfg),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
}

#[test]
fn invalid_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for text in [
        r#"{"cs": {"alpha": 2.0}}"#,
        "{not json",
        r#"{"encoder": {"num_heads": 5}}"#,
    ] {
        let cfg = write_config(dir.path(), text);
        let res = ovseg(&[
            "run",
            "--config",
            p(&cfg),
            "--out",
            p(&dir.path().join("o")),
        ]);
        assert_eq!(res.status.code(), Some(2), "{text}");
        assert!(!res.stderr.is_empty());
    }
    let res = ovseg(&[
        "run",
        "--config",
        p(&dir.path().join("missing.json")),
        "--out",
        "o",
    ]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn eval_over_generated_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"scene": {"image_count": 3}}"#);
    let scenes = dir.path().join("scenes");
    assert!(ovseg(&["gen", "--config", p(&cfg), "--out", p(&scenes)])
        .status
        .success());
    let labels = scenes.join("labels");
    let assoc = scenes.join("association.json");
    let report = dir.path().join("report.json");
    let res = ovseg(&[
        "eval",
        "--pred",
        p(&labels),
        "--gt",
        p(&labels),
        "--assoc",
        p(&assoc),
        "--classes",
        "12",
        "--out",
        p(&report),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let parsed: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(parsed["miou"].as_f64(), Some(1.0));
    assert_eq!(parsed["msg_iou"].as_f64(), Some(1.0));

    // predictions that label every armchair pixel as chair
    let pred_dir = dir.path().join("pred");
    fs::create_dir_all(&pred_dir).unwrap();
    for entry in fs::read_dir(&labels).unwrap() {
        let path = entry.unwrap().path();
        let mut map = read_label_png(&path).unwrap();
        map.labels
            .mapv_inplace(|l| if l == 2 || l == 3 { 1 } else { l });
        write_label_png(
            &pred_dir.join(path.file_name().unwrap()),
            &LabelMap::new(map.labels),
        )
        .unwrap();
    }
    let res = ovseg(&[
        "eval",
        "--pred",
        p(&pred_dir),
        "--gt",
        p(&labels),
        "--assoc",
        p(&assoc),
        "--classes",
        "12",
        "--out",
        p(&report),
    ]);
    assert!(res.status.success());
    let parsed: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    let (miou, msg) = (
        parsed["miou"].as_f64().unwrap(),
        parsed["msg_iou"].as_f64().unwrap(),
    );
    assert!(msg >= miou);

    let bad_assoc = dir.path().join("bad.json");
    fs::write(&bad_assoc, r#"{"3": [3]}"#).unwrap();
    let res = ovseg(&[
        "eval",
        "--pred",
        p(&labels),
        "--gt",
        p(&labels),
        "--assoc",
        p(&bad_assoc),
        "--classes",
        "12",
        "--out",
        p(&report),
    ]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn eval_shape_mismatch_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    write_label_png(
        &pred.join("a.png"),
        &LabelMap::new(ndarray::Array2::zeros((4, 4))),
    )
    .unwrap();
    write_label_png(
        &gt.join("a.png"),
        &LabelMap::new(ndarray::Array2::zeros((4, 5))),
    )
    .unwrap();
    let res = ovseg(&[
        "eval",
        "--pred",
        p(&pred),
        "--gt",
        p(&gt),
        "--classes",
        "2",
        "--out",
        p(&dir.path().join("r.json")),
    ]);
    assert_eq!(res.status.code(), Some(3));
}
