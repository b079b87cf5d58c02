mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use obbkit::cli::maps::write_predictions;
use obbkit::cli::run;
use obbkit::losses::{LevelPredictions, Prediction};
use obbkit::targets::FeatureGridSpec;
use tempfile::tempdir;

use common::fixture;

fn obbkit(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("obbkit").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn eval5() -> (String, String) {
    let dir = fixture("eval5");
    (dir.join("gt").display().to_string(), dir.join("dets").display().to_string())
}

#[test]
fn iou_of_identical_quads_is_one() {
    let (code, out, _) = obbkit(&["iou", "--quad-a", "0,1,1,0,2,1,1,2", "--quad-b", "0 1 1 0 2 1 1 2"]);
    assert_eq!(code, 0);
    assert_eq!(out, "iou 1\n");
}

#[test]
fn iou_raster_check_reports_delta() {
    let (code, out, _) = obbkit(&[
        "iou",
        "--quad-a",
        "0,0,1,0,1,1,0,1",
        "--quad-b",
        "0.5,0,1.5,0,1.5,1,0.5,1",
        "--raster-check",
        "--grid",
        "300",
    ]);
    assert_eq!(code, 0);
    let delta: f64 = out.lines().last().unwrap().strip_prefix("delta ").unwrap().parse().unwrap();
    assert!(out.starts_with("iou 0.333333"));
    assert!(delta < 0.01);
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(obbkit(&["iou", "--quad-a", "0,0,1", "--quad-b", "0,0,1,0,1,1,0,1"]).0, 1);
    assert_eq!(obbkit(&["frobnicate"]).0, 1);
    assert_eq!(obbkit(&[]).0, 1);
    let (gt, dets) = eval5();
    assert_eq!(obbkit(&["eval", "--gt", &gt, "--dets", &dets, "--mode", "coco"]).0, 1);
    assert_eq!(obbkit(&["eval", "--gt", &gt, "--dets", &dets, "--set", "gamma=1"]).0, 1);
    assert_eq!(obbkit(&["eval", "--gt", &gt, "--dets", &dets, "--set", "alpha"]).0, 1);
    assert_eq!(obbkit(&["eval", "--gt", &gt, "--dets", &dets, "--threads", "0"]).0, 1);
}

#[test]
fn help_and_version_exit_0() {
    let (code, out, _) = obbkit(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("fit-demo"));
    assert_eq!(obbkit(&["--version"]).0, 0);
}

#[test]
fn data_errors_exit_2() {
    let dir = tempdir().unwrap();
    let (_, dets) = eval5();
    let missing = dir.path().join("nope");
    let (code, _, err) = obbkit(&["eval", "--gt", path(&missing), "--dets", &dets]);
    assert_eq!(code, 2, "{err}");

    let gt = dir.path().join("gt");
    fs::create_dir(&gt).unwrap();
    fs::write(gt.join("img1.txt"), "0 0 10 0 10 10 0 plane 0\n").unwrap();
    let (code, _, err) = obbkit(&["eval", "--gt", path(&gt), "--dets", &dets]);
    assert_eq!(code, 2);
    assert!(err.contains("img1.txt:1"), "{err}");

    fs::write(gt.join("img1.txt"), "0 0 10 0 10 10 0 10 zeppelin 0\n").unwrap();
    assert_eq!(obbkit(&["eval", "--gt", path(&gt), "--dets", &dets]).0, 2);
    assert_eq!(
        obbkit(&["eval", "--gt", path(&gt), "--dets", &dets, "--unknown-category", "skip"]).0,
        0
    );

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "alpha = lots\n").unwrap();
    let (gt5, _) = eval5();
    assert_eq!(obbkit(&["eval", "--gt", &gt5, "--dets", &dets, "--config", path(&cfg)]).0, 2);
}

#[test]
fn eval_table_and_json() {
    let (gt, dets) = eval5();
    let (code, out, _) = obbkit(&["eval", "--gt", &gt, "--dets", &dets]);
    assert_eq!(code, 0);
    assert!(out.contains("plane") && out.contains("0.848485"), "{out}");
    assert!(out.contains("ship") && out.contains("0.272727"), "{out}");
    assert!(out.contains("mAP") && out.contains("0.560606"), "{out}");

    let dir = tempdir().unwrap();
    let report = dir.path().join("report.json");
    let (code, table, _) = obbkit(&["eval", "--gt", &gt, "--dets", &dets, "--mode", "all", "--json", path(&report)]);
    assert_eq!(code, 0);
    assert!(table.contains("0.541667"));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!((v["map"].as_f64().unwrap() - 13.0 / 24.0).abs() < 1e-12);
    assert!((v["per_class"]["plane"].as_f64().unwrap() - 5.0 / 6.0).abs() < 1e-12);
    assert_eq!(v["per_class"]["ship"].as_f64().unwrap(), 0.25);
    assert_eq!(v["iou_threshold"].as_f64().unwrap(), 0.5);
    assert_eq!(v["mode"], "allpoint");
}

fn json_map(args: &[&str]) -> f64 {
    let (gt, dets) = eval5();
    let mut all = vec!["eval", "--gt", &gt, "--dets", &dets, "--json", "-"];
    all.extend_from_slice(args);
    let (code, out, err) = obbkit(&all);
    assert_eq!(code, 0, "{err}");
    serde_json::from_str::<serde_json::Value>(&out).unwrap()["map"].as_f64().unwrap()
}

#[test]
fn flags_override_config_file_overrides_defaults() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# sweep settings\nmode = allpoint\n").unwrap();
    let cfg = path(&cfg);
    let eleven = 37.0 / 66.0;
    let all = 13.0 / 24.0;
    assert!((json_map(&[]) - eleven).abs() < 1e-12);
    assert!((json_map(&["--config", cfg]) - all).abs() < 1e-12);
    assert!((json_map(&["--config", cfg, "--mode", "07"]) - eleven).abs() < 1e-12);
    assert!((json_map(&["--config", cfg, "--set", "mode=11point"]) - eleven).abs() < 1e-12);
    // At 0.3 the ship detection with IoU 0.4 becomes a true positive.
    assert!(json_map(&["--iou", "0.3"]) > eleven);
}

#[test]
fn encode_decode_roundtrip_files() {
    let dir = tempdir().unwrap();
    let quads = dir.path().join("quads.txt");
    fs::write(&quads, "0 3 3 0 4 1 1 4 plane 0\n0 0 4 0 4 2 0 2\n").unwrap();
    let (code, encoded, _) = obbkit(&["encode", path(&quads)]);
    assert_eq!(code, 0);
    assert!(encoded.starts_with("0 0 4 4 1 1\n0 0 4 2 0 2\n"), "{encoded}");
    assert!(encoded.contains("# roundtrip 2 boxes, min iou 1"));

    let boxes = dir.path().join("boxes.txt");
    fs::write(&boxes, &encoded).unwrap();
    let (code, decoded, _) = obbkit(&["decode", path(&boxes)]);
    assert_eq!(code, 0);
    assert_eq!(decoded, "0 3 3 0 4 1 1 4\n0 0 4 0 4 2 0 2\n");

    fs::write(&boxes, "0 0 4 4 5 1\n").unwrap();
    assert_eq!(obbkit(&["decode", path(&boxes)]).0, 2);
}

#[test]
fn nms_writes_suppressed_files() {
    let dir = tempdir().unwrap();
    let (_, dets) = eval5();
    let out = dir.path().join("kept");
    let (code, msg, _) = obbkit(&["nms", "--dets", &dets, "--iou", "0.5", "--out", path(&out)]);
    assert_eq!(code, 0);
    assert_eq!(msg, "kept 4 of 5 detections at iou 0.5\n");
    let plane = fs::read_to_string(out.join("Task1_plane.txt")).unwrap();
    assert_eq!(plane.lines().count(), 2);
    assert!(plane.starts_with("img1 0.9 "));
}

fn write_preds(file: &Path, spec: FeatureGridSpec, classes: usize, score: f64) {
    let preds = (0..spec.len())
        .map(|_| Prediction {
            class_scores: vec![score; classes],
            centerness: 0.5,
            ltrb: [5.0, 6.0, 7.0, 4.0],
            wh: [2.0, 3.0],
        })
        .collect();
    let mut text = String::new();
    write_predictions(&mut text, &[LevelPredictions { spec, preds }]);
    fs::write(file, text).unwrap();
}

#[test]
fn assign_then_loss_with_grad_check() {
    let dir = tempdir().unwrap();
    let gt = dir.path().join("gt");
    fs::create_dir(&gt).unwrap();
    fs::write(gt.join("a.txt"), "4 4 28 4 28 20 4 20 plane 0\n").unwrap();
    let targets = dir.path().join("targets.txt");
    let (code, msg, err) = obbkit(&[
        "assign",
        "--gt",
        path(&gt),
        "--image-size",
        "32x32",
        "--strides",
        "8",
        "--levels",
        "",
        "--out",
        path(&targets),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(msg.contains("1 images"));
    let text = fs::read_to_string(&targets).unwrap();
    assert!(text.starts_with("image a\nlevel 0 4 4 8\npos "), "{text}");
    assert!(text.contains("# a: 1 objects, positives per level [2], 0 objects without positives"));

    let spec = FeatureGridSpec::new(4, 4, 8, 0).unwrap();
    let preds = dir.path().join("preds.txt");
    write_preds(&preds, spec, 15, 0.3);
    let (code, out, err) = obbkit(&[
        "loss",
        "--targets",
        path(&targets),
        "--preds",
        path(&preds),
        "--grad-check",
        "--grad-samples",
        "500",
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("n_pos 2"), "{out}");
    let rel: f64 = out
        .split_whitespace()
        .skip_while(|t| *t != "max_rel_error")
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!(rel < 1e-4, "{out}");

    write_preds(&preds, spec, 15, 1.0);
    let (code, _, err) = obbkit(&["loss", "--targets", path(&targets), "--preds", path(&preds)]);
    assert_eq!(code, 3, "{err}");

    write_preds(&preds, FeatureGridSpec::new(2, 2, 8, 0).unwrap(), 15, 0.3);
    assert_eq!(obbkit(&["loss", "--targets", path(&targets), "--preds", path(&preds)]).0, 2);
}

#[test]
fn assign_output_is_stable() {
    let (gt, _) = eval5();
    let (code, a, _) = obbkit(&["assign", "--gt", &gt, "--threads", "1"]);
    assert_eq!(code, 0);
    let (_, b, _) = obbkit(&["assign", "--gt", &gt, "--threads", "3"]);
    assert_eq!(a, b);
}

#[test]
fn fit_demo_on_annotations() {
    let (gt, _) = eval5();
    let (code, out, err) = obbkit(&["fit-demo", "--gt", &gt, "--image-size", "96x64", "--steps", "30", "--trace-every", "10"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.starts_with("# fit-demo img1: 4 objects, image 96x64"), "{out}");
    assert_eq!(out.lines().filter(|l| l.starts_with("step ")).count(), 4);
    assert!(out.contains("object 3 ship locations"));
    assert!(obbkit(&["fit-demo", "--gt", &gt, "--image", "img9"]).0 == 2);
}

#[test]
fn fit_demo_is_seeded() {
    let a = obbkit(&["fit-demo", "--steps", "5", "--seed", "3"]).1;
    let b = obbkit(&["fit-demo", "--steps", "5", "--seed", "3"]).1;
    let c = obbkit(&["fit-demo", "--steps", "5", "--seed", "4"]).1;
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn thread_count_from_environment() {
    let exe = env!("CARGO_BIN_EXE_obbkit");
    let (gt, dets) = eval5();
    let status = |threads: &str| {
        Command::new(exe)
            .args(["eval", "--gt", &gt, "--dets", &dets])
            .env("OBBKIT_THREADS", threads)
            .output()
            .unwrap()
    };
    let ok = status("2");
    assert!(ok.status.success());
    let bad = status("many");
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("OBBKIT_THREADS"));
}
