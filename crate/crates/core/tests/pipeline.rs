//! End-to-end runs of the pipeline commands at a tiny scale.

use std::fs;
use std::path::Path;

use formation::config::{Counts, ExperimentConfig};
use formation::pipeline::{cmd_bc, cmd_dagger, cmd_eval, cmd_fixed_follower, PolicyRef, RunManifest};
use formation::Error;

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 77,
        counts: Counts {
            bc_rollouts: 2,
            dagger_iterations: 2,
            dagger_rollouts: 2,
            eval_rollouts: 2,
        },
        ..ExperimentConfig::default()
    };
    cfg.train.epochs = 3;
    cfg
}

fn read(dir: &Path, rel: &str) -> String {
    fs::read_to_string(dir.join(rel)).unwrap()
}

#[test]
fn staged_run_matches_one_shot_run_and_resumes() {
    let cfg = tiny();
    let one = tempfile::tempdir().unwrap();
    let staged = tempfile::tempdir().unwrap();

    cmd_bc(&cfg, one.path()).unwrap();
    let all = cmd_dagger(&cfg, one.path()).unwrap();
    assert_eq!(all.iter().map(|r| r.iteration).collect::<Vec<_>>(), vec![1, 2]);

    cmd_bc(&cfg, staged.path()).unwrap();
    let mut first = cfg.clone();
    first.counts.dagger_iterations = 1;
    assert_eq!(cmd_dagger(&first, staged.path()).unwrap().len(), 1);
    let rest = cmd_dagger(&cfg, staged.path()).unwrap();
    assert_eq!(rest.len(), 1);
    assert_eq!(rest[0].iteration, 2);
    assert!(cmd_dagger(&cfg, staged.path()).unwrap().is_empty());

    for rel in ["dagger/iter_01/metrics.csv", "dagger/iter_02/metrics.csv", "training/history_02.csv"] {
        assert_eq!(read(one.path(), rel), read(staged.path(), rel), "{rel}");
    }
    assert_eq!(
        fs::read(one.path().join("checkpoints/policy_02.ckpt")).unwrap(),
        fs::read(staged.path().join("checkpoints/policy_02.ckpt")).unwrap()
    );

    let manifest = RunManifest::load(staged.path()).unwrap();
    manifest.verify(staged.path()).unwrap();
    assert_eq!(manifest.checkpoints.len(), 3);
    assert!(manifest.has_stage("bc") && manifest.has_stage("dagger-1") && manifest.has_stage("dagger-2"));
}

#[test]
fn evaluation_writes_one_row_per_rollout() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    cmd_bc(&cfg, dir.path()).unwrap();
    let refs: Vec<PolicyRef> = ["none", "expert", "policy_00"]
        .iter()
        .map(|p| PolicyRef::parse(p, dir.path()).unwrap())
        .collect();
    let out = cmd_eval(&cfg, dir.path(), &refs).unwrap();
    assert_eq!(out.policies.len(), 3);

    let csv = read(dir.path(), "eval/metrics.csv");
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "rollout_id,policy,side,termination,mae,cumulative_reward");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3 * cfg.counts.eval_rollouts);
    for row in &rows {
        assert_eq!(row.len(), 6);
        assert!(["left", "right"].contains(&row[2]));
        assert!(["completed", "contact", "separated"].contains(&row[3]), "{}", row[3]);
        let reward: f64 = row[5].parse().unwrap();
        assert!((0.0..=500.0).contains(&reward));
    }
    // The expert is its own label, so its MAE is zero.
    assert!(rows.iter().filter(|r| r[1] == "expert").all(|r| r[4].parse::<f64>().unwrap() == 0.0));
    assert!(dir.path().join("eval/summary.csv").exists());
    for svg in ["eval/learning_curve.svg", "eval/trajectories_policy_00.svg"] {
        roxmltree::Document::parse(&read(dir.path(), svg)).unwrap();
    }
    RunManifest::load(dir.path()).unwrap().verify(dir.path()).unwrap();
}

#[test]
fn tampered_dataset_is_refused() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    cmd_bc(&cfg, dir.path()).unwrap();
    let path = dir.path().join("dataset.json");
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 2;
    bytes[last] ^= 1;
    fs::write(&path, bytes).unwrap();
    assert!(matches!(cmd_dagger(&cfg, dir.path()), Err(Error::Checksum(_))));
}

#[test]
fn changed_configuration_is_refused() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    cmd_bc(&cfg, dir.path()).unwrap();
    let mut other = cfg.clone();
    other.seed += 1;
    assert!(matches!(cmd_dagger(&other, dir.path()), Err(Error::Config(_))));
}

#[test]
fn fixed_follower_writes_grid_and_panel() {
    let mut cfg = tiny();
    cfg.fixed_follower.lateral = vec![0.0, 60.0];
    cfg.fixed_follower.longitudinal = vec![0.0, 100.0];
    cfg.fixed_follower.duration = 0.5;
    let dir = tempfile::tempdir().unwrap();
    let out = cmd_fixed_follower(&cfg, dir.path()).unwrap();
    assert_eq!(out.cells.len(), 3);
    assert_eq!(out.skipped, vec![(0.0, 0.0)]);
    let grid = read(dir.path(), "fixed_follower/grid.csv");
    assert_eq!(grid.lines().count(), 4);
    let svg = read(dir.path(), "fixed_follower/panel.svg");
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
}
