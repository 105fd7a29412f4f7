use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use clap::Parser;
use colam::cli::{self, Cli};
use colam::config::{ExperimentConfig, SweepGrid};
use colam::data::{MeanLayout, SyntheticSpec};
use colam::labels::SoftLabelTable;
use colam::training;
use colam::Error;
use tempfile::TempDir;

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::tri_blob(3);
    cfg.dataset = colam::config::DatasetSource::Synthetic(SyntheticSpec {
        classes: 3,
        train_per_class: 30,
        test_per_class: 10,
        dim: 4,
        means: MeanLayout::Explicit(vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 6.0]]),
        sigma: 1.0,
        label_noise: 0.1,
        seed: 3,
    });
    cfg.train.stages = 2;
    cfg.train.epochs_per_stage = 2;
    cfg.train.peers = 5;
    cfg.train.batch_size = 16;
    cfg.train.hidden = vec![8];
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn run(root: &Path, args: &[&str]) -> Result<String, Error> {
    let mut argv = vec!["colam", "--out", root.to_str().unwrap()];
    argv.extend_from_slice(args);
    let cli = Cli::try_parse_from(argv).expect("arguments parse");
    let mut out = Vec::new();
    cli::run(cli, &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}

fn value<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key}= in {stdout}"))
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn train_writes_run_directory() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config();
    let config = write_config(tmp.path(), &cfg);
    let stdout = run(tmp.path(), &["train", "--config", config.to_str().unwrap(), "--seed", "7"]).unwrap();

    assert!(stdout.trim_end().lines().last().unwrap().starts_with("top1="));
    let top1: f64 = value(&stdout, "top1").parse().unwrap();
    assert!((0.0..=1.0).contains(&top1));
    let dir = PathBuf::from(value(&stdout, "run_dir"));
    let names: Vec<String> = snapshot(&dir).into_iter().map(|f| f.0).collect();
    assert_eq!(
        names,
        [
            "config.json",
            "metrics.csv",
            "params_final.bin",
            "params_final.json",
            "softlabels_stage1.csv",
            "softlabels_stage2.csv"
        ]
    );

    // provenance chain: the config.json hash heads every CSV
    let stored = ExperimentConfig::from_file(&dir.join("config.json")).unwrap();
    assert_eq!(stored.train.seed, 7);
    let stamp = format!("# config_hash={}", stored.hash());
    for (name, bytes) in snapshot(&dir).iter().filter(|f| f.0.ends_with(".csv")) {
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert_eq!(text.lines().next(), Some(stamp.as_str()), "{name}");
    }
    let metrics = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().nth(1), Some(training::METRICS_HEADER));
    assert_eq!(metrics.lines().count(), 2 + 2 * 4);
    let table = SoftLabelTable::from_csv(&fs::read_to_string(dir.join("softlabels_stage2.csv")).unwrap()).unwrap();
    assert_eq!(table.stage(), 2);
    assert_eq!(table.classes(), 3);
}

#[test]
fn rerun_does_not_touch_existing_run() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), &small_config());
    let stdout = run(tmp.path(), &["train", "--config", config.to_str().unwrap()]).unwrap();
    let dir = PathBuf::from(value(&stdout, "run_dir"));
    let before = snapshot(&dir);
    assert!(run(tmp.path(), &["train", "--config", config.to_str().unwrap()]).is_err());
    assert_eq!(snapshot(&dir), before);
}

#[test]
fn smooth_with_zero_epsilon_matches_hard() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = small_config();
    cfg.train.baseline.epsilon = 0.0;
    let config = write_config(tmp.path(), &cfg);
    let c = config.to_str().unwrap();
    let smooth = run(tmp.path(), &["train", "--config", c, "--method", "smooth"]).unwrap();
    let hard = run(tmp.path(), &["train", "--config", c, "--method", "hard"]).unwrap();
    assert_eq!(value(&smooth, "top1"), value(&hard, "top1"));
    let read = |s: &str| fs::read(PathBuf::from(value(s, "run_dir")).join("metrics.csv")).unwrap();
    assert_eq!(read(&smooth), read(&hard));
}

#[test]
fn missing_or_invalid_config_fails_without_output() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nope.json");
    assert!(run(tmp.path(), &["train", "--config", missing.to_str().unwrap()]).is_err());
    assert!(!tmp.path().join("runs").exists());

    let mut cfg = small_config();
    cfg.train.stages = 0;
    cfg.train.temperature = -1.0;
    let config = write_config(tmp.path(), &cfg);
    match run(tmp.path(), &["train", "--config", config.to_str().unwrap()]) {
        Err(Error::Config(fields)) => {
            assert!(fields.iter().any(|f| f.contains("stages")), "{fields:?}");
            assert!(fields.iter().any(|f| f.contains("temperature")), "{fields:?}");
        }
        other => panic!("expected config error, got {other:?}"),
    }
    assert!(!tmp.path().join("runs").exists());
}

#[test]
fn binary_exit_status() {
    let tmp = TempDir::new().unwrap();
    let bin = env!("CARGO_BIN_EXE_colam");
    let status = Process::new(bin)
        .args(["train", "--config", "missing.json"])
        .env("COLAM_OUT", tmp.path())
        .output()
        .unwrap();
    assert!(!status.status.success());
    assert!(!String::from_utf8_lossy(&status.stderr).is_empty());
    assert!(!tmp.path().join("runs").exists());

    let config = write_config(tmp.path(), &small_config());
    let ok = Process::new(bin)
        .args(["train", "--method", "hard", "--config", config.to_str().unwrap()])
        .env("COLAM_OUT", tmp.path())
        .output()
        .unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let stdout = String::from_utf8(ok.stdout).unwrap();
    assert!(stdout.trim_end().lines().last().unwrap().starts_with("top1="));
    assert!(tmp.path().join("runs").read_dir().unwrap().count() == 1);
}

#[test]
fn sweep_grid_is_resumable() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = small_config();
    cfg.sweep = Some(SweepGrid {
        total_epochs: 4,
        intervals: vec![2],
        peers: vec![3, 5],
        temperatures: vec![1.0, 1.5],
        seeds: vec![1],
    });
    let config = write_config(tmp.path(), &cfg);
    let c = config.to_str().unwrap();
    let first = run(tmp.path(), &["sweep", "--config", c]).unwrap();
    let grid = PathBuf::from(value(&first, "grid"));
    let text = fs::read_to_string(&grid).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], format!("# config_hash={}", cfg.hash()));
    assert_eq!(lines[1], cli::SWEEP_HEADER);
    assert_eq!(lines.len(), 2 + 4);

    // interrupted run: last row lost, then resumed
    let truncated: String = lines[..lines.len() - 1].iter().map(|l| format!("{l}\n")).collect();
    fs::write(&grid, truncated).unwrap();
    let second = run(tmp.path(), &["sweep", "--config", c]).unwrap();
    assert!(second.contains("resuming: 3 cells already complete"));
    assert_eq!(fs::read_to_string(&grid).unwrap(), text);

    let third = run(tmp.path(), &["sweep", "--config", c]).unwrap();
    assert!(third.contains("resuming: 4 cells already complete"));
    assert_eq!(fs::read_to_string(&grid).unwrap(), text);

    // a cell equals a plain training run with the same settings
    let row: Vec<&str> = lines[2].split(',').collect();
    let mut plain = cfg.clone();
    plain.sweep = None;
    plain.train.epochs_per_stage = row[0].parse().unwrap();
    plain.train.stages = 4 / plain.train.epochs_per_stage;
    plain.train.peers = row[1].parse().unwrap();
    plain.train.temperature = row[2].parse().unwrap();
    plain.train.seed = row[3].parse().unwrap();
    let (ds, _) = plain.load_dataset().unwrap();
    let top1 = training::run_colam(&plain.train, &ds).unwrap().final_test_top1();
    assert_eq!(row[4], top1.to_string());
    assert_eq!(row[5], plain.train.hash());
}

#[test]
fn empty_sweep_grid_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = small_config();
    cfg.sweep = Some(SweepGrid {
        total_epochs: 4,
        intervals: vec![],
        peers: vec![3],
        temperatures: vec![1.0],
        seeds: vec![1],
    });
    let config = write_config(tmp.path(), &cfg);
    assert!(matches!(
        run(tmp.path(), &["sweep", "--config", config.to_str().unwrap()]),
        Err(Error::Config(_))
    ));
}

#[test]
fn expected_accuracy_per_stage() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config();
    let config = write_config(tmp.path(), &cfg);
    let stdout = run(tmp.path(), &["train", "--config", config.to_str().unwrap()]).unwrap();
    let dir = value(&stdout, "run_dir").to_string();

    let out = run(tmp.path(), &["expected-accuracy", "--run", &dir]).unwrap();
    let csv_path = PathBuf::from(value(&out, "expected"));
    let csv = fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[1], "stage,expected_top1");
    assert_eq!(lines.len(), 2 + 2);

    run(tmp.path(), &["expected-accuracy", "--run", &dir]).unwrap();
    assert_eq!(fs::read_to_string(&csv_path).unwrap(), csv);

    let table = SoftLabelTable::from_csv(&fs::read_to_string(Path::new(&dir).join("softlabels_stage1.csv")).unwrap())
        .unwrap();
    let (ds, _) = cfg.load_dataset().unwrap();
    let manual = training::expected_accuracy(&table, &cfg.train, &ds).unwrap();
    assert_eq!(lines[2], format!("1,{manual}"));

    fs::remove_file(Path::new(&dir).join("softlabels_stage2.csv")).unwrap();
    match run(tmp.path(), &["expected-accuracy", "--run", &dir]) {
        Err(Error::MissingCheckpoints(files)) => {
            assert_eq!(files, vec![Path::new(&dir).join("softlabels_stage2.csv")]);
        }
        other => panic!("expected missing checkpoints, got {other:?}"),
    }
}

#[test]
fn analyze_exports_are_stable() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), &small_config());
    let stdout = run(tmp.path(), &["train", "--config", config.to_str().unwrap()]).unwrap();
    let dir = value(&stdout, "run_dir").to_string();

    let out = run(tmp.path(), &["analyze", "--run", &dir, "--classes", "0,1,2"]).unwrap();
    let analysis = PathBuf::from(value(&out, "analysis"));
    let first = snapshot(&analysis);
    let names: Vec<&str> = first.iter().map(|f| f.0.as_str()).collect();
    assert_eq!(
        names,
        ["adc.csv", "adt.csv", "projection_test.csv", "projection_train.csv", "template_distances.csv"]
    );
    run(tmp.path(), &["analyze", "--run", &dir]).unwrap();
    assert_eq!(snapshot(&analysis), first);

    let text = fs::read_to_string(analysis.join("template_distances.csv")).unwrap();
    let rows: Vec<Vec<String>> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    assert!(!rows.is_empty());
    assert!(text.lines().next().unwrap().starts_with("# config_hash="));
}

#[test]
fn grad_check_verb() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), &small_config());
    let out = run(tmp.path(), &["grad-check", "--config", config.to_str().unwrap()]).unwrap();
    assert!(out.contains("passed=true"), "{out}");
}
