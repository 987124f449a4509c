use std::path::Path;
use std::process::{Command, Output};

fn formation(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_formation")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        "seed = 9\n[counts]\nbc_rollouts = 2\ndagger_iterations = 1\ndagger_rollouts = 2\neval_rollouts = 2\n[train]\nepochs = 2\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn print_config_round_trips_overrides() {
    let o = formation(&["print-config", "--seed", "31", "--epochs", "7"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let cfg = formation::config::ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.seed, 31);
    assert_eq!(cfg.train.epochs, 7);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&formation(&[])), 2);
    assert_eq!(code(&formation(&["bc", "--bogus"])), 2);
    assert_eq!(code(&formation(&["eval"])), 2);
    assert_eq!(code(&formation(&["bc", "--rollouts", "3"])), 2);
    assert_eq!(code(&formation(&["bc", "--threads", "0"])), 2);
    assert_eq!(code(&formation(&["print-config", "--config", "/nonexistent/x.toml"])), 2);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "sede = 3\n").unwrap();
    assert_eq!(code(&formation(&["print-config", "--config", bad.to_str().unwrap()])), 2);
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&formation(&["--help"])), 0);
    assert_eq!(code(&formation(&["--version"])), 0);
}

#[test]
fn bc_dagger_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();

    // DAgger before behaviour cloning is a usage error.
    assert_eq!(code(&formation(&["dagger", "--config", &cfg, "--out", out])), 2);

    let bc = formation(&["bc", "--config", &cfg, "--out", out, "--threads", "1"]);
    assert_eq!(code(&bc), 0, "{}", String::from_utf8_lossy(&bc.stderr));
    let dg = formation(&["dagger", "--config", &cfg, "--out", out]);
    assert_eq!(code(&dg), 0, "{}", String::from_utf8_lossy(&dg.stderr));

    let ev = formation(&["eval", "--config", &cfg, "--out", out, "expert", "policy_00", "policy_01"]);
    assert_eq!(code(&ev), 0, "{}", String::from_utf8_lossy(&ev.stderr));
    let table = String::from_utf8(ev.stdout).unwrap();
    assert!(table.contains("policy_01"));

    assert_eq!(code(&formation(&["eval", "--config", &cfg, "--out", out, "oracle"])), 2);
    assert_eq!(code(&formation(&["eval", "--config", &cfg, "--out", out, "policy_07"])), 2);

    // A corrupted checkpoint is a runtime failure.
    let ckpt = Path::new(out).join("checkpoints/policy_01.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes.truncate(n / 2);
    std::fs::write(&ckpt, bytes).unwrap();
    assert_eq!(code(&formation(&["eval", "--config", &cfg, "--out", out, "policy_01"])), 3);
}
