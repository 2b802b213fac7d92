//! End-to-end checks of the command-line binary: exit codes, file layout,
//! config-file precedence, and the pipeline wiring between subcommands.
//! Everything runs on deliberately tiny datasets so the whole file finishes
//! in seconds.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_saliencystrike"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary should launch")
}

fn assert_code(out: &Output, want: i32, context: &str) {
    let got = out.status.code().expect("no exit code");
    assert_eq!(
        got,
        want,
        "{context}: expected exit {want}, got {got}\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
}

/// Tiny two-class dataset shared by the pipeline tests.
fn gen_tiny_dataset(dir: &Path) {
    let out = run(&[
        "gen-data",
        "--out",
        dir.to_str().unwrap(),
        "--classes",
        "sphere,cube",
        "--per-class-train",
        "4",
        "--per-class-test",
        "2",
        "--points",
        "24",
        "--noise-sd",
        "0.01",
        "--seed",
        "3",
    ]);
    assert_code(&out, 0, "gen-data");
}

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let model = tmp.path().join("model");
    let atk = tmp.path().join("atk");
    let rep = tmp.path().join("rep");
    gen_tiny_dataset(&data);
    assert!(data.join("manifest.csv").is_file());
    assert!(data.join("train").is_dir() && data.join("test").is_dir());

    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
        "--widths",
        "8",
        "--epochs",
        "2",
        "--seed",
        "0",
    ]);
    assert_code(&out, 0, "train");
    let ckpt = model.join("model.ckpt");
    assert!(ckpt.is_file() && model.join("train_log.csv").is_file());

    let out = run(&[
        "attack",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        atk.to_str().unwrap(),
        "--limit",
        "2",
        "--iters",
        "4",
        "--m",
        "3",
        "--n",
        "2",
    ]);
    assert_code(&out, 0, "attack");
    assert!(atk.join("summary.json").is_file());
    assert!(atk.join("run_manifest.json").is_file());
    let results: Vec<_> = fs::read_dir(atk.join("results")).unwrap().collect();
    let advs: Vec<_> = fs::read_dir(atk.join("adv")).unwrap().collect();
    assert_eq!(results.len(), 2);
    assert_eq!(advs.len(), 2);

    let out = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        rep.to_str().unwrap(),
        "--table",
        "main",
        "--limit",
        "2",
        "--iters",
        "4",
        "--m",
        "3",
        "--n",
        "2",
    ]);
    assert_code(&out, 0, "eval");
    assert!(rep.join("report.csv").is_file());
    assert!(rep.join("report.json").is_file());
}

#[test]
fn gen_data_refuses_to_clobber_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("keep.txt"), "precious").unwrap();
    let dir = tmp.path().to_str().unwrap();
    let args = [
        "gen-data",
        "--out",
        dir,
        "--classes",
        "sphere",
        "--per-class-train",
        "1",
        "--per-class-test",
        "1",
        "--points",
        "8",
        "--seed",
        "1",
    ];
    let out = run(&args);
    assert_code(&out, 2, "gen-data into non-empty dir");
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("--force"),
        "refusal should point at --force"
    );
    // The directory's existing contents must be untouched.
    assert_eq!(fs::read_to_string(tmp.path().join("keep.txt")).unwrap(), "precious");

    let mut forced: Vec<&str> = args.to_vec();
    forced.push("--force");
    assert_code(&run(&forced), 0, "gen-data --force");
}

#[test]
fn missing_input_paths_exit_with_file_error() {
    let out = run(&[
        "train",
        "--data",
        "/nonexistent/dataset",
        "--out",
        "/tmp/never-created",
    ]);
    assert_code(&out, 3, "train on missing dataset");
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "bogus_key = 1\n").unwrap();
    let out = run(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("d").to_str().unwrap(),
    ]);
    assert_code(&out, 2, "unknown config key");
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_key"));
}

#[test]
fn global_flag_conflicts_with_saliency_size() {
    let out = run(&[
        "attack",
        "--checkpoint",
        "x",
        "--data",
        "y",
        "--out",
        "z",
        "--global",
        "--m",
        "4",
    ]);
    assert_code(&out, 2, "--global with --m");
}

#[test]
fn config_file_fills_gaps_but_cli_wins() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let model = tmp.path().join("model");
    gen_tiny_dataset(&data);
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
        "--widths",
        "8",
        "--epochs",
        "1",
    ]);
    assert_code(&out, 0, "train");

    let cfg = tmp.path().join("attack.cfg");
    fs::write(&cfg, "iters = 9\nlambda = 0.7\nm = 3\nn = 2\nlimit = 1\n").unwrap();
    let atk = tmp.path().join("atk");
    let out = run(&[
        "attack",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        model.join("model.ckpt").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        atk.to_str().unwrap(),
        "--iters",
        "2",
    ]);
    assert_code(&out, 0, "attack with config file");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(atk.join("run_manifest.json")).unwrap()).unwrap();
    let attack_cfg = &manifest["config"]["attack"];
    // CLI --iters overrides the file; file values fill everything it names.
    assert_eq!(attack_cfg["iterations"], 2);
    assert_eq!(attack_cfg["lambda"], 0.7);
    assert_eq!(attack_cfg["m"], 3);
    assert_eq!(manifest["config"]["limit"], 1);
}

#[test]
fn self_check_passes_and_emits_json() {
    let out = run(&["check", "--json"]);
    assert_code(&out, 0, "check --json");
    let v: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("check --json must print valid JSON");
    assert!(v["checks"].as_array().map(|a| !a.is_empty()).unwrap_or(false));
}

#[test]
fn negative_control_makes_the_check_fail() {
    let out = run(&["check", "--negative-control"]);
    assert_code(&out, 5, "check --negative-control");
    assert!(
        String::from_utf8_lossy(&out.stdout).contains("FAIL"),
        "sabotaged gradient must be reported as FAIL"
    );
}
