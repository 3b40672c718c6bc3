use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn crowd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crowd"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn run_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const TINY: &str = r#"{
  "network": {
    "backbone": [{"channels": 4, "pool": true}, {"channels": 8, "pool": false}],
    "sit_count": 2,
    "sit": {"groups": 4, "group_width": 4, "out_channels": 8},
    "head_width": 8
  },
  "train": {"batch": 2, "patch": 32, "iterations": 12, "checkpoint_every": 6}
}"#;

#[test]
fn mixer_test_prints_the_one_half_row() {
    let dir = tempfile::tempdir().unwrap();
    let o = crowd(dir.path(), &["mixer-test", "--G", "6", "--draws", "10000", "--out", "mt"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let row_line = text.lines().find(|l| l.starts_with("alpha = 0.5 row")).unwrap();
    let row: Vec<f64> = row_line.split(':').nth(1).unwrap().split_whitespace().map(|v| v.parse().unwrap()).collect();
    assert_eq!(row, vec![1.0 / 16.0, 1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0 / 2.0]);
    let sum_line = text.lines().find(|l| l.starts_with("max |row sum - 1|")).unwrap();
    let worst: f64 = sum_line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(worst <= 1e-12);
    let echo = run_json(&dir.path().join("mt/run.json"));
    assert_eq!(echo["command"], "mixer-test");
    assert_eq!(echo["config"]["groups"], 6);
    assert_eq!(echo["config"]["draws"], 10000);
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = crowd(dir.path(), &["train", "--config", "missing.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.json"));
    assert_eq!(crowd(dir.path(), &["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(crowd(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(crowd(dir.path(), &["mixer-test", "--G", "0"]).status.code(), Some(1));
    fs::write(dir.path().join("bad.json"), r#"{"train": {"learning_rate": 1}}"#).unwrap();
    assert_eq!(crowd(dir.path(), &["train", "--config", "bad.json"]).status.code(), Some(1));
    assert_eq!(crowd(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn gradcheck_battery_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = crowd(dir.path(), &["gradcheck", "--seed", "7", "--out", "gc"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("conv2d grouped dilated"));
    assert!(text.contains("toy network end-to-end"));
    assert!(!text.contains("FAIL"));
    assert_eq!(run_json(&dir.path().join("gc/run.json"))["config"]["seed"], 7);
}

#[test]
fn pipeline_from_synthesis_to_cross_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ok = |args: &[&str]| {
        let o = crowd(d, args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    ok(&["synth", "--count", "20", "--width", "64", "--height", "64", "--seed", "3", "--out", "a"]);
    ok(&["synth", "--count", "10", "--width", "64", "--height", "64", "--seed", "4", "--profile", "clustered", "--out", "b"]);
    assert!(d.join("a/manifest.json").exists());

    let gt = stdout(&ok(&["gt", "--manifest", "a/manifest.json", "--mode", "adaptive", "--beta", "0.3", "--k", "3", "--out", "gt"]));
    assert!(gt.starts_with("wrote 20 density maps"));
    let dmap = fs::read_dir(d.join("gt")).unwrap().map(|e| e.unwrap().path()).find(|p| p.extension().is_some_and(|e| e == "dmap")).unwrap();
    ok(&["export-pgm", "--in", dmap.to_str().unwrap(), "--out", "view/map.pgm"]);
    assert!(fs::read(d.join("view/map.pgm")).unwrap().starts_with(b"P5\n64 64\n255\n"));

    fs::write(d.join("tiny.json"), TINY).unwrap();
    ok(&["train", "--config", "tiny.json", "--manifest", "a/manifest.json", "--mixer", "fixed:1", "--out", "run"]);
    let echo = run_json(&d.join("run/run.json"));
    assert_eq!(echo["config"]["network"]["sit"]["mixer"], "fixed:1");
    assert_eq!(echo["config"]["train"]["iterations"], 12);
    let log = fs::read_to_string(d.join("run/log.csv")).unwrap();
    assert!(log.starts_with("iter,loss,val_mae,val_mse\n0,,"));
    assert!(d.join("run/checkpoint_000006.scsi").exists());

    // the echo alone reproduces the run
    ok(&["train", "--config", "run/run.json", "--out", "again"]);
    assert_eq!(fs::read(d.join("run/final.scsi")).unwrap(), fs::read(d.join("again/final.scsi")).unwrap());

    let eval = stdout(&ok(&["eval", "--checkpoint", "run/final.scsi", "--manifest", "a/manifest.json", "--out", "ev"]));
    assert!(eval.contains("MAE"));
    let report = fs::read_to_string(d.join("ev/report.csv")).unwrap();
    assert!(report.starts_with("image_id,true_count,pred_count\n"));
    let mae_line = report.lines().find(|l| l.starts_with("# MAE=")).unwrap().to_string();

    ok(&["sweep", "--checkpoint", "run/final.scsi", "--manifest", "a/manifest.json", "--ratios", "0.25,1.0,0.64", "--out", "sw"]);
    let sweep = fs::read_to_string(d.join("sw/sweep.csv")).unwrap();
    let rows: Vec<&str> = sweep.lines().collect();
    assert_eq!(rows[0], "area_ratio,mae,mse");
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("1,"));
    assert_eq!(rows[1].split(',').nth(1).unwrap(), mae_line.trim_start_matches("# MAE="));

    let before = fs::read(d.join("run/final.scsi")).unwrap();
    let cross = stdout(&ok(&["cross-eval", "--checkpoint", "run/final.scsi", "--manifest", "b/manifest.json", "--out", "ce"]));
    assert!(cross.starts_with("corpus b:"));
    assert_eq!(before, fs::read(d.join("run/final.scsi")).unwrap());
    assert!(run_json(&d.join("ce/run.json"))["config"]["network"].is_object());

    let o = crowd(d, &["sweep", "--checkpoint", "run/final.scsi", "--manifest", "a/manifest.json", "--ratios", "1.5"]);
    assert_eq!(o.status.code(), Some(1));
    let o = crowd(d, &["eval", "--config", "run/run.json"]);
    assert_eq!(o.status.code(), Some(1), "a train echo is not an eval config");
}

#[test]
fn diverging_training_exits_with_two_and_keeps_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(crowd(d, &["synth", "--count", "10", "--width", "64", "--height", "64", "--out", "a"]).status.code(), Some(0));
    fs::write(d.join("tiny.json"), TINY).unwrap();
    let o = crowd(d, &["train", "--config", "tiny.json", "--manifest", "a/manifest.json", "--lr", "1e30", "--out", "nan"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite loss"));
    assert!(d.join("nan/log.csv").exists());
    assert!(d.join("nan/run.json").exists());
}
