use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aeen::data::{self, GroundTruth};
use aeen::maps::parse_pgm;
use aeen::optim::EpochMetrics;
use aeen::pipeline::{self, Checkpoint, TrainSettings};
use aeen::search::{self, TrialResult};
use serde_json::json;

fn aeen(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aeen")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = aeen(args, cwd);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_spec(dir: &Path, spec: serde_json::Value) -> PathBuf {
    let path = dir.join("spec.json");
    fs::write(&path, spec.to_string()).unwrap();
    path
}

/// Small dataset with validation classes, quick to train on.
fn tiny_dataset(dir: &Path) {
    write_spec(
        dir,
        json!({"num_classes": 6, "samples_per_class": 6, "channels": 3, "size": 4, "attr_dim": 3,
               "noise_sigma": 0.1, "seed": 4, "num_val": 1}),
    );
    ok(&["gen", "--spec", "spec.json", "--out", "ds"], dir);
}

fn read_metrics(path: &Path) -> Vec<EpochMetrics> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn gen_is_byte_identical_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    write_spec(
        dir.path(),
        json!({"num_classes": 5, "samples_per_class": 4, "channels": 4, "size": 5, "attr_dim": 3,
               "noise_sigma": 0.2, "seed": 1}),
    );
    ok(&["gen", "--spec", "spec.json", "--out", "a"], dir.path());
    ok(&["gen", "--spec", "spec.json", "--out", "b"], dir.path());
    for f in ["features.aefm", "attributes.csv", "split.json", "dataset.json", "ground_truth.json"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        assert_eq!(a, fs::read(dir.path().join("b").join(f)).unwrap(), "{f} differs");
    }
    data::load_split(dir.path().join("a/split.json")).unwrap();
    let ds = data::load_dataset(dir.path().join("a/dataset.json")).unwrap();
    assert_eq!(ds.len(), 20);
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(aeen(&["gen", "--spec", "missing.json", "--out", "x"], dir.path()).status.code(), Some(2));
    assert_eq!(aeen(&["bogus"], dir.path()).status.code(), Some(2));
    tiny_dataset(dir.path());
    let out = aeen(&["train", "--data", "ds", "--out", "r", "--lr-max", "0.5"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr_max"));
    ok(&["train", "--data", "ds", "--out", "r", "--lr-max", "0.5", "--epochs", "0", "--allow-out-of-range"], dir.path());
    assert_eq!(aeen(&["search", "--data", "ds", "--out", "s", "--plan", "1:1,2:1"], dir.path()).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    fs::write(dir.path().join("bad.json"), "{").unwrap();
    let out = aeen(&["eval", "--data", "ds", "--checkpoint", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn zero_epochs_writes_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    ok(&["train", "--data", "ds", "--out", "r", "--epochs", "0", "--seed", "17", "--hoa", "--gamma", "2"], dir.path());
    let ck: Checkpoint = serde_json::from_str(&fs::read_to_string(dir.path().join("r/checkpoint.json")).unwrap()).unwrap();
    let ds = data::load_dataset(dir.path().join("ds/dataset.json")).unwrap();
    let settings = TrainSettings { epochs: 0, seed: 17, use_hoa: true, gamma: 2.0, ..Default::default() };
    assert_eq!(ck.settings, settings);
    assert_eq!(ck.epochs_run, 0);
    assert_eq!(ck.params, pipeline::initial_params(&ds, &settings).unwrap());
    assert_eq!(fs::read_to_string(dir.path().join("r/metrics.jsonl")).unwrap(), "");
}

#[test]
fn training_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    for out in ["r1", "r2"] {
        ok(&["train", "--data", "ds", "--out", out, "--epochs", "3", "--batch", "4", "--seed", "9"], dir.path());
    }
    for f in ["metrics.jsonl", "checkpoint.json"] {
        assert_eq!(fs::read(dir.path().join("r1").join(f)).unwrap(), fs::read(dir.path().join("r2").join(f)).unwrap());
    }
}

#[test]
fn cycling_schedule_restarts_at_10_and_30() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    ok(
        &["train", "--data", "ds", "--out", "r", "--epochs", "31", "--batch", "7", "--lr-max", "0.004",
          "--lr-mode", "cycling", "--cycle-len", "10", "--cycle-mul", "2"],
        dir.path(),
    );
    let m = read_metrics(&dir.path().join("r/metrics.jsonl"));
    assert_eq!(m.len(), 31);
    for e in [0, 10, 30] {
        assert_eq!(m[e].lr, 0.004, "epoch {e}");
    }
    assert!(m[5].lr < 0.004 && m[20].lr < 0.004);
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    fs::write(
        dir.path().join("run.json"),
        json!({"data": "ds", "out": "from_config", "epochs": 2, "seed": 5, "lr_max": 0.002, "lr_mode": "constant"})
            .to_string(),
    )
    .unwrap();
    ok(&["train", "--config", "run.json", "--seed", "6"], dir.path());
    let ck: Checkpoint =
        serde_json::from_str(&fs::read_to_string(dir.path().join("from_config/checkpoint.json")).unwrap()).unwrap();
    assert_eq!((ck.settings.epochs, ck.settings.seed, ck.settings.lr_max), (2, 6, 0.002));
    assert!(read_metrics(&dir.path().join("from_config/metrics.jsonl")).iter().all(|m| m.lr == 0.002));
}

#[test]
fn gzsl_curve_is_monotone_and_rectification_helps() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    ok(&["train", "--data", "ds", "--out", "r", "--epochs", "2", "--batch", "4"], dir.path());
    for criterion in ["max-h", "equalize"] {
        ok(&["gzsl", "--data", "ds", "--checkpoint", "r/checkpoint.json", "--out", criterion, "--criterion", criterion], dir.path());
        let csv = fs::read_to_string(dir.path().join(criterion).join("curve.csv")).unwrap();
        let rows: Vec<Vec<f64>> =
            csv.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
        assert!(rows.len() >= 3);
        assert!(rows.windows(2).all(|w| w[0][0] < w[1][0] && w[1][1] <= w[0][1] && w[1][2] >= w[0][2]));
        let report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(criterion).join("gzsl.json")).unwrap()).unwrap();
        assert_eq!(report["selected_on"], "validation");
        if criterion == "max-h" {
            // selection happens on validation data, so compare on the test curve's own optimum
            let best_h = rows.iter().map(|r| r[3]).fold(0.0, f64::max);
            assert!(best_h >= report["test_uncalibrated"]["h"].as_f64().unwrap());
        }
    }
}

#[test]
fn default_search_logs_111_trials_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    write_spec(
        dir.path(),
        json!({"num_classes": 5, "samples_per_class": 3, "channels": 2, "size": 3, "attr_dim": 2,
               "noise_sigma": 0.1, "seed": 2, "num_val": 1, "num_unseen": 1}),
    );
    ok(&["gen", "--spec", "spec.json", "--out", "ds"], dir.path());
    ok(&["search", "--data", "ds", "--out", "s", "--jobs", "4", "--seed", "3"], dir.path());
    let audit = search::read_audit(fs::read(dir.path().join("s/audit.jsonl")).unwrap().as_slice()).unwrap();
    assert_eq!(audit.len(), 111);
    assert_eq!(audit.iter().map(|t| t.epochs).sum::<usize>(), 230);
    let best: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("s/best.json")).unwrap()).unwrap();
    assert_eq!(best["best_index"].as_u64().unwrap() as usize, search::winner_from_audit(&audit).unwrap().config_index);
}

#[test]
fn search_honors_the_plan_flag() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    ok(&["search", "--data", "ds", "--out", "s", "--plan", "4:1,2:2,1:3", "--batch", "8"], dir.path());
    let audit: Vec<TrialResult> =
        search::read_audit(fs::read(dir.path().join("s/audit.jsonl")).unwrap().as_slice()).unwrap();
    let shape: Vec<(usize, usize)> = audit.iter().map(|t| (t.stage, t.epochs)).collect();
    assert_eq!(shape, vec![(0, 1), (0, 1), (0, 1), (0, 1), (1, 2), (1, 2), (2, 3)]);
    ok(&["search", "--data", "ds", "--out", "s2", "--plan", "4:1,2:2,1:3", "--batch", "8", "--jobs", "3"], dir.path());
    assert_eq!(fs::read(dir.path().join("s/audit.jsonl")).unwrap(), fs::read(dir.path().join("s2/audit.jsonl")).unwrap());
}

#[test]
fn maps_are_named_by_sample_and_attribute() {
    let dir = tempfile::tempdir().unwrap();
    write_spec(
        dir.path(),
        json!({"num_classes": 3, "samples_per_class": 2, "channels": 80, "size": 4, "attr_dim": 80,
               "noise_sigma": 0.0, "seed": 8, "num_unseen": 1, "density": 1.0}),
    );
    ok(&["gen", "--spec", "spec.json", "--out", "ds"], dir.path());
    ok(
        &["maps", "--data", "ds", "--generating-weights", "ds/ground_truth.json", "--out", "m", "--sample", "3",
          "--attr", "74", "--avg"],
        dir.path(),
    );
    let truth: GroundTruth =
        serde_json::from_str(&fs::read_to_string(dir.path().join("ds/ground_truth.json")).unwrap()).unwrap();
    let map = parse_pgm(&fs::read(dir.path().join("m/3_74.pgm")).unwrap()).unwrap();
    // sample 3 belongs to class 1 (class-major layout, 2 per class)
    let [r, c] = truth.hot_spots[1][74];
    assert_eq!(map.argmax(), (r, c));
    assert!(dir.path().join("m/3_avg.pgm").is_file());

    ok(&["train", "--data", "ds", "--out", "r", "--epochs", "0"], dir.path());
    ok(
        &["maps", "--data", "ds", "--checkpoint", "r/checkpoint.json", "--out", "m2", "--sample", "0", "--attr", "2",
          "--branch", "top", "--upsample", "9"],
        dir.path(),
    );
    let up = parse_pgm(&fs::read(dir.path().join("m2/0_2.pgm")).unwrap()).unwrap();
    assert_eq!((up.width, up.height), (9, 9));
    let out = aeen(&["maps", "--data", "ds", "--checkpoint", "r/checkpoint.json", "--out", "m3", "--sample", "0", "--attr", "80"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}
