use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL_SPEC: &str = r#"{
  "strategies": [
    { "name": "greedy" },
    { "name": "scale", "sampler": { "strategy": "adaptive" }, "modulation": { "strategy": "adaptive_delta" } }
  ],
  "n_episodes": 4,
  "n_seeds": 2,
  "master_seed": 3
}"#;

fn scale(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scale"))
        .args(args)
        .current_dir(dir)
        .env_remove("SCALE_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("spec.json"), SMALL_SPEC).unwrap();
    dir
}

#[test]
fn run_writes_the_three_outputs() {
    let dir = setup();
    let o = scale(&["run", "spec.json", "--out", "out"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(dir.path().join("out/summary.csv")).unwrap();
    assert!(summary.starts_with("strategy,"));
    assert_eq!(summary.lines().count(), 3);
    assert_eq!(String::from_utf8_lossy(&o.stdout), summary);
    let raw = fs::read_to_string(dir.path().join("out/raw.jsonl")).unwrap();
    assert_eq!(raw.lines().count(), 2 * 2 * 4);
    for line in raw.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
    assert!(dir.path().join("out/timing.csv").exists());
}

#[test]
fn run_defaults_to_the_results_directory() {
    let dir = setup();
    assert_eq!(code(&scale(&["run", "spec.json"], dir.path())), 0);
    assert!(dir.path().join("results/summary.csv").exists());
}

#[test]
fn seed_precedence() {
    let dir = setup();
    let run = |extra: &[&str], env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_scale"));
        cmd.args(["run", "spec.json", "--out", "o"])
            .args(extra)
            .current_dir(dir.path());
        match env {
            Some(v) => cmd.env("SCALE_SEED", v),
            None => cmd.env_remove("SCALE_SEED"),
        };
        let o = cmd.output().unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(dir.path().join("o/raw.jsonl")).unwrap()
    };
    let spec_seed = run(&[], None);
    let env_seed = run(&[], Some("99"));
    let flag_seed = run(&["--seed", "99"], None);
    let flag_wins = run(&["--seed", "3"], Some("99"));
    assert_ne!(spec_seed, env_seed);
    assert_eq!(env_seed, flag_seed);
    assert_eq!(flag_wins, spec_seed);
}

#[test]
fn bad_seed_variable_is_a_config_error() {
    let dir = setup();
    let o = Command::new(env!("CARGO_BIN_EXE_scale"))
        .args(["run", "spec.json"])
        .current_dir(dir.path())
        .env("SCALE_SEED", "minus one")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("SCALE_SEED"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = setup();
    fs::write(dir.path().join("bad.json"), "{ \"strategies\": [], \"n_episodes\": 1 }").unwrap();
    fs::write(dir.path().join("broken.json"), "{ \"strategies\": [\n  oops").unwrap();
    fs::write(
        dir.path().join("unknown.json"),
        "{ \"strategies\": [{\"name\": \"g\"}], \"n_episodes\": 1, \"colour\": 1 }",
    )
    .unwrap();
    for spec in ["bad.json", "broken.json", "unknown.json"] {
        let o = scale(&["run", spec], dir.path());
        assert_eq!(code(&o), 2, "{spec}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = scale(&["run", "broken.json"], dir.path());
    assert!(String::from_utf8_lossy(&o.stderr).contains("broken.json:2:3"));
    assert_eq!(code(&scale(&["bench", "spec.json", "--n", "0"], dir.path())), 2);
    assert_eq!(code(&scale(&["frobnicate"], dir.path())), 2);
    assert_eq!(code(&scale(&["run"], dir.path())), 2);
}

#[test]
fn missing_files_are_runtime_errors() {
    let dir = setup();
    assert_eq!(code(&scale(&["run", "nope.json"], dir.path())), 1);
    assert_eq!(code(&scale(&["analyze", "nope.jsonl"], dir.path())), 1);
}

#[test]
fn analyze_reads_raw_output() {
    let dir = setup();
    assert_eq!(code(&scale(&["run", "spec.json", "--out", "out"], dir.path())), 0);
    let o = scale(&["analyze", "out/raw.jsonl", "--bins", "3"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.starts_with("pmax_lo,pmax_hi,episodes,successes,success_rate"));
    let episodes: usize = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(episodes, 16);
}

#[test]
fn bench_reports_every_n() {
    let dir = setup();
    let o = scale(
        &[
            "bench",
            "spec.json",
            "--n",
            "1,2,4",
            "--episodes",
            "2",
            "--warmup",
            "0",
            "--out",
            "lat.csv",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("lat.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("R^2") && err.contains("ratio"));
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = scale(&["selftest"], dir.path());
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 9);
}

#[test]
fn shipped_specs_parse() {
    let specs = Path::new(env!("CARGO_MANIFEST_DIR")).join("specs");
    for entry in fs::read_dir(specs).unwrap() {
        let path = entry.unwrap().path();
        scale_core::harness::ExperimentSpec::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}
