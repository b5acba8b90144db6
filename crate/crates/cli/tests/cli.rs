use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use countpp::data::load_dataset;
use countpp::metrics::ImagePrediction;

fn countpp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_countpp")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

/// Small dataset and a one-epoch tiny model.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    let o = countpp(&["gen-data", "--out", s(&data), "--scenes", "4", "--videos", "1", "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = dir.join("run.json");
    fs::write(&cfg, r#"{"d_model": 8, "heads": 2, "enhancer_blocks": 1, "decoder_blocks": 1, "num_queries": 8, "epochs": 3, "batch_size": 4}"#)
        .unwrap();
    let ckpt = dir.join("m.ckpt");
    let o = countpp(&["train", "--config", s(&cfg), "--data", s(&data), "--epochs", "1", "--out", s(&ckpt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    (data, ckpt)
}

#[test]
fn gen_data_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = countpp(&["gen-data", "--out", s(out), "--scenes", "5", "--videos", "1", "--seed", "11"]);
        assert_eq!(o.status.code(), Some(0));
    }
    let (fa, fb) = (files(&a), files(&b));
    assert!(fa.len() > 5);
    assert_eq!(fa, fb);
    let c = dir.path().join("c");
    countpp(&["gen-data", "--out", s(&c), "--scenes", "5", "--seed", "12"]);
    assert_ne!(files(&c), fa.into_iter().filter(|(p, _)| !p.starts_with("videos")).collect::<Vec<_>>());
}

#[test]
fn exit_codes_separate_usage_and_runtime_errors() {
    assert_eq!(countpp(&["--help"]).status.code(), Some(0));
    assert_eq!(countpp(&["--version"]).status.code(), Some(0));
    assert_eq!(countpp(&[]).status.code(), Some(1));
    assert_eq!(countpp(&["count", "--bogus"]).status.code(), Some(1));
    assert_eq!(countpp(&["eval", "--data", "x", "--mode", "sideways", "--ckpt", "y"]).status.code(), Some(1));
    let o = countpp(&["count", "--ckpt", "/nonexistent.ckpt", "--image", "/nonexistent.png", "--text", "red circle"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let dir = tempfile::tempdir().unwrap();
    let o = countpp(&["train", "--data", s(dir.path()), "--sigma", "1.5", "--out", s(&dir.path().join("m.ckpt"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_count_and_video_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = fixture(dir.path());
    // --epochs 1 overrides the config's 3.
    let csv = fs::read_to_string(ckpt.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "{csv}");
    assert!(csv.starts_with("epoch,l_cls"));

    let image = data.join(&fs::read_dir(&data).unwrap().map(|e| e.unwrap().file_name()).find(|n| n.to_string_lossy().ends_with(".png")).unwrap());
    let o = countpp(&["count", "--ckpt", s(&ckpt), "--image", s(&image), "--text", "red circle", "--negative-text", "blue square"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let n = v["count"].as_u64().unwrap() as usize;
    assert_eq!(v["boxes"].as_array().unwrap().len(), n);
    assert!(v.get("trace").is_none());

    let out = dir.path().join("it.json");
    let o = countpp(&["count", "--ckpt", s(&ckpt), "--image", s(&image), "--text", "red circle", "--iterative", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert!(!v["trace"].as_array().unwrap().is_empty());

    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"positive": {"text": "red circle", "exemplars": []}, "negatives": []}"#).unwrap();
    let o = countpp(&["count", "--ckpt", s(&ckpt), "--image", s(&image), "--spec", s(&spec), "--adaptive"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let frames = data.join("videos").join("video_000");
    let o = countpp(&["video", "--ckpt", s(&ckpt), "--frames", s(&frames), "--text", "blob", "--n", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["unique_count"].is_u64());

    let o = countpp(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--eval-mode", "counting"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("MAE"));
}

#[test]
fn eval_of_perfect_predictions_reports_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    countpp(&["gen-data", "--out", s(&data), "--scenes", "6", "--seed", "5"]);
    let preds: Vec<ImagePrediction> = load_dataset(&data)
        .unwrap()
        .iter()
        .flat_map(|sc| {
            sc.classes().into_iter().map(|c| {
                let boxes = sc.boxes_of(&c);
                ImagePrediction { count: boxes.len(), scores: vec![0.9; boxes.len()], boxes }
            })
        })
        .collect();
    let pf = dir.path().join("preds.json");
    fs::write(&pf, serde_json::to_string(&preds).unwrap()).unwrap();
    let report = dir.path().join("report.json");
    let o = countpp(&["eval", "--data", s(&data), "--predictions", s(&pf), "--out", s(&report)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["mae"], 0.0);
    assert_eq!(v["rmse"], 0.0);
    assert_eq!(v["ap"], 1.0);
    assert_eq!(v["ap50"], 1.0);
}

#[test]
fn desk_preset_includes_dot_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("desk");
    let o = countpp(&["gen-data", "--out", s(&data), "--scenes", "5", "--preset", "desk", "--seed", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let scenes = load_dataset(&data).unwrap();
    assert_eq!(scenes.len(), 5);
    assert_eq!(scenes[4].classes(), vec![countpp::desk::DOT_CLASS.to_string()]);
}
