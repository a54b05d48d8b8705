use std::fs;
use std::path::Path;
use std::process::Command;

use wsi_triage::cli::{run_cli, EXIT_DATA, EXIT_OK, EXIT_USAGE};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wsi-triage"))
}

fn cli(args: &[&str]) -> i32 {
    let mut v = vec!["wsi-triage"];
    v.extend_from_slice(args);
    run_cli(v)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_workflow_is_reproducible_and_worker_independent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus");
    let split = corpus.join("split.txt");
    let (refm, labm) = (d.join("models/ref"), d.join("models/lab-a"));

    assert_eq!(
        cli(&["synth", "--out", p(&corpus), "--specimens", "24", "--labs", "ref,lab-a", "--max-slides", "1", "--height", "512", "--width", "768", "--seed", "7"]),
        EXIT_OK
    );
    assert!(corpus.join("rasters/ref-s0000-w0.ppm").exists());
    assert!(corpus.join("rasters/ref-s0000-w0.pgm").exists());
    assert_eq!(
        cli(&["split", "--manifest", p(&corpus.join("manifest.txt")), "--out", p(&split), "--seed", "1", "--dev-ratios", "0.6,0.4,0", "--calib-ratios", "0.4,0.2,0.4"]),
        EXIT_OK
    );
    assert_eq!(cli(&["train", "--manifest", p(&split), "--out", p(&refm), "--set", "classifier.epochs=150"]), EXIT_OK);
    assert_eq!(
        cli(&["calibrate", "--models", p(&refm), "--manifest", p(&split), "--lab", "lab-a", "--out", p(&labm), "--set", "classifier.finetune_epochs=40"]),
        EXIT_OK
    );
    for f in ["lab_stats.txt", "classifier.txt", "thresholds.txt", "calibration_report.txt"] {
        assert!(labm.join(f).exists(), "{f}");
    }
    let report = fs::read_to_string(labm.join("calibration_report.txt")).unwrap();
    assert!(report.contains("validation_accuracy"), "{report}");

    let mut outputs = Vec::new();
    for workers in ["1", "4", "8"] {
        let out = d.join(format!("run{workers}"));
        assert_eq!(
            cli(&["run", "--models", p(&labm), "--manifest", p(&split), "--lab", "lab-a", "--split", "test", "--out", p(&out), "--workers", workers, "--seed", "5"]),
            EXIT_OK
        );
        outputs.push((
            fs::read_to_string(out.join("results.csv")).unwrap(),
            fs::read_to_string(out.join("slides.csv")).unwrap(),
        ));
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));

    let run1 = d.join("run1");
    assert_eq!(cli(&["evaluate", "--run", p(&run1), "--manifest", p(&split)]), EXIT_OK);
    for f in ["report.txt", "levels.csv", "confusion.csv", "roc.csv"] {
        assert!(run1.join(f).exists(), "{f}");
    }
    assert_eq!(cli(&["profile", "--run", p(&run1)]), EXIT_OK);
    assert!(fs::read_to_string(run1.join("profile.txt")).unwrap().contains("median_total_ms"));

    // the run manifest alone is enough to redo the run
    let rm = fs::read_to_string(run1.join("run_manifest.txt")).unwrap();
    let cfg = d.join("replay.conf");
    fs::write(&cfg, rm.split("[config]\n").nth(1).unwrap()).unwrap();
    let replay = d.join("replay");
    assert_eq!(
        cli(&["run", "--models", p(&labm), "--manifest", p(&split), "--lab", "lab-a", "--split", "test", "--out", p(&replay), "--config", p(&cfg)]),
        EXIT_OK
    );
    assert_eq!(fs::read_to_string(replay.join("slides.csv")).unwrap(), outputs[0].1);
}

#[test]
fn empty_manifest_runs_to_empty_results() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus");
    assert_eq!(cli(&["synth", "--out", p(&corpus), "--specimens", "8", "--labs", "ref", "--max-slides", "1", "--height", "256", "--width", "384"]), EXIT_OK);
    let models = d.join("models");
    assert_eq!(
        cli(&["split", "--manifest", p(&corpus.join("manifest.txt")), "--out", p(&corpus.join("split.txt")), "--dev-ratios", "0.5,0.5,0"]),
        EXIT_OK
    );
    assert_eq!(cli(&["train", "--manifest", p(&corpus.join("split.txt")), "--out", p(&models), "--set", "classifier.epochs=5"]), EXIT_OK);
    let empty = d.join("empty.txt");
    fs::write(&empty, "wsi-triage-manifest v1\n").unwrap();
    let out = d.join("run");
    assert_eq!(cli(&["run", "--models", p(&models), "--manifest", p(&empty), "--out", p(&out)]), EXIT_OK);
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1);
}

#[test]
fn missing_input_exits_2_naming_the_path() {
    let out = bin()
        .args(["run", "--models", "/nonexistent/models", "--manifest", "/nonexistent/m.txt", "--out", "/tmp/never"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_DATA));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/nonexistent/"), "{err}");
}

#[test]
fn unknown_config_key_exits_1_naming_the_key() {
    let out = bin().args(["train", "--manifest", "m.txt", "--out", "o", "--set", "tiling.bogus=3"]).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tiling.bogus"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.conf");
    fs::write(&cfg, "roi.theta = 0.1\nmystery = 1\n").unwrap();
    let out = bin().args(["train", "--manifest", "m.txt", "--out", "o", "--config", p(&cfg)]).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mystery"));
}

#[test]
fn bad_usage_exits_1_and_help_documents_defaults() {
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(EXIT_USAGE));
    let help = bin().args(["synth", "--help"]).output().unwrap();
    assert_eq!(help.status.code(), Some(EXIT_OK));
    let text = String::from_utf8_lossy(&help.stdout);
    assert!(text.contains("[default: 1024]"), "{text}");
    let keys = bin().arg("keys").output().unwrap();
    assert!(String::from_utf8_lossy(&keys.stdout).contains("roi.theta"));
}
