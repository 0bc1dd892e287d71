use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use refseg::data::generate_synthetic;

fn refseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refseg"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"{
  "version": 1,
  "manifest": "data/manifest.jsonl",
  "out_dir": "run",
  "train": {
    "epochs": 1,
    "batch_size": 4,
    "lr": 0.001,
    "model": {"d1": 16, "d2": 16},
    "policy": {"rank": 4}
  }
}"#;

#[test]
fn missing_manifest_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = refseg(&["train", "--manifest", "nope/manifest.jsonl"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("manifest not found"), "{}", stderr(&o));
}

#[test]
fn unknown_axis_lists_valid_ones() {
    let dir = tempfile::tempdir().unwrap();
    let o = refseg(&["ablate", "--axis", "width", "--manifest", "m.jsonl"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for axis in ["rank", "text_depth", "downsample", "dense"] {
        assert!(err.contains(axis), "{err}");
    }
}

#[test]
fn unknown_config_key_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"version": 1, "train": {"learnrate": 1}}"#).unwrap();
    let o = refseg(&["train", "--config", "c.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learnrate"), "{}", stderr(&o));
}

#[test]
fn synth_train_eval_infer() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = refseg(&["synth", "--out", "data", "--n", "20", "--seed", "3"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    fs::write(d.join("tiny.json"), TINY).unwrap();

    let o = refseg(&["train", "--config", "tiny.json"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("Pr@0.5") && out.contains("gIoU"), "{out}");
    assert!(d.join("run/final.safetensors").is_file());
    assert!(d.join("run/val_report.json").is_file());

    let o = refseg(
        &[
            "eval",
            "--checkpoint",
            "run/final.safetensors",
            "--manifest",
            "data/manifest.jsonl",
            "--split",
            "test",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("run/final.test.json")).unwrap()).unwrap();
    assert_eq!(report["per_image_iou"].as_array().unwrap().len(), 2);

    let infer = |out: &str| {
        refseg(
            &[
                "infer",
                "--checkpoint",
                "run/final.safetensors",
                "--image",
                "data/images/00000.png",
                "--expression",
                "the red circle",
                "--out",
                out,
                "--heatmap",
                "heat.png",
            ],
            d,
        )
    };
    let o = infer("a.png");
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(infer("b.png").status.success());
    assert_eq!(fs::read(d.join("a.png")).unwrap(), fs::read(d.join("b.png")).unwrap());
    let heat = image::open(d.join("heat.png")).unwrap();
    assert_eq!((heat.width(), heat.height()), (128, 128));

    let o = refseg(
        &[
            "infer",
            "--checkpoint",
            "run/final.safetensors",
            "--image",
            "data/images/00000.png",
            "--expression",
            "  ",
            "--out",
            "c.png",
        ],
        d,
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = refseg(&["eval", "--checkpoint", "missing.safetensors", "--manifest", "data/manifest.jsonl"], d);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn synth_matches_library_output() {
    let dir = tempfile::tempdir().unwrap();
    let o = refseg(&["synth", "--out", "cli", "--n", "12", "--canvas", "64", "--seed", "5"], dir.path());
    assert!(o.status.success());
    generate_synthetic(12, 64, 5, &dir.path().join("lib")).unwrap();
    assert_eq!(
        fs::read(dir.path().join("cli/manifest.jsonl")).unwrap(),
        fs::read(dir.path().join("lib/manifest.jsonl")).unwrap()
    );
}
