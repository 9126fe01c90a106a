use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use erlkit::cli::{load_config, RunArgs};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_erlkit"));
    c.env_remove("ERL_OUT_DIR");
    c
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn quick() -> Vec<&'static str> {
    vec![
        "--set",
        "es.pop_size=8",
        "--set",
        "es.fitness_episodes=1",
        "--set",
        "es.hidden=4",
        "--set",
        "obs_norm.vbn_steps=100",
        "--set",
        "env.max_episode_steps=20",
        "--set",
        "eval.episodes=2",
        "--set",
        "eval.interval=2",
    ]
}

fn lines(p: &Path) -> Vec<Value> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn shipped_configs_load() {
    let mut n = 0;
    for e in fs::read_dir(configs_dir()).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "toml") {
            let args = RunArgs {
                config: Some(p.clone()),
                ..Default::default()
            };
            let cfg = load_config(&args).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            erlkit::workflow::build(&cfg).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            n += 1;
        }
    }
    assert!(n >= 5);
}

#[test]
fn run_writes_header_records_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let status = bin()
        .args(["run", "--set", "budget.iterations=4", "--workers", "1", "--out"])
        .arg(&out)
        .args(quick())
        .status()
        .unwrap();
    assert!(status.success());
    let m = lines(&out.join("metrics.jsonl"));
    assert_eq!(m.len(), 1 + 4 + 2);
    assert_eq!(m[0]["type"], "header");
    assert_eq!(m[0]["workflow"], "es");
    assert!(m[0]["config"].get("exec.workers").is_none());
    assert!(m[1..].iter().all(|r| r.get("ms").is_none() && r["iteration"].as_u64().is_some()));
    let evals: Vec<&Value> = m.iter().filter(|r| r["type"] == "eval").collect();
    assert_eq!(evals.len(), 2);
    assert!(evals[0]["eval/episode_return_mean"].as_f64().is_some());
    assert_eq!(lines(&out.join("timing.jsonl")).len(), 6);
    assert!(out.join("checkpoint.bin").exists());
}

#[test]
fn out_dir_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let from_env = dir.path().join("env");
    let from_flag = dir.path().join("flag");
    let status = bin()
        .env("ERL_OUT_DIR", &from_env)
        .args(["run", "--set", "budget.iterations=1"])
        .args(quick())
        .status()
        .unwrap();
    assert!(status.success());
    assert!(from_env.join("metrics.jsonl").exists());
    let status = bin()
        .env("ERL_OUT_DIR", &from_env)
        .args(["run", "--set", "budget.iterations=1", "--out"])
        .arg(&from_flag)
        .args(quick())
        .status()
        .unwrap();
    assert!(status.success());
    assert!(from_flag.join("metrics.jsonl").exists());
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    for bad in ["no.such.key=1", "es.pop_size=many", "workflow=nope"] {
        let out = bin()
            .args(["run", "--set", bad, "--out"])
            .arg(dir.path())
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(1), "{bad}");
        assert!(!out.stderr.is_empty());
    }
    let missing = bin().args(["run", "/definitely/not/here.toml"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn damaged_checkpoint_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let run = |resume: bool| {
        let mut c = bin();
        c.args(["run", "--set", "budget.iterations=2", "--out"]).arg(dir.path()).args(quick());
        if resume {
            c.arg("--resume");
        }
        c.output().unwrap()
    };
    assert!(run(false).status.success());
    fs::write(dir.path().join("checkpoint.bin"), b"garbage").unwrap();
    assert_eq!(run(true).status.code(), Some(2));
}

#[test]
fn keys_lists_every_default() {
    let out = bin().arg("keys").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for k in ["workflow", "openes.lr", "cemrl.random_timesteps", "pbt.selection_ratio"] {
        assert!(text.contains(k), "{k}");
    }
}
