//! Run orchestration: behaviour cloning, DAgger, evaluation and the
//! fixed-follower experiment, each writing artifacts plus a manifest into an
//! output directory.
//!
//! Layout of an output directory:
//!
//! ```text
//! manifest.json
//! dataset.json                  aggregated labelled rollouts
//! bc/rollout_NNN.csv
//! dagger/iter_KK/rollout_NNN.csv, dagger/iter_KK/metrics.csv
//! checkpoints/policy_KK.ckpt    00 is behaviour cloning, KK ≥ 1 DAgger
//! training/history_KK.csv
//! eval/metrics.csv, eval/summary.csv, eval/*.svg
//! fixed_follower/grid.csv, fixed_follower/panel.svg
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{
    fixed_follower_csv, fixed_follower_experiment, metrics_csv, rollout_metrics, summarize, summary_csv,
    FixedFollowerCell, Metrics, Quartiles, SummaryRow,
};
use crate::imitation::{batch_specs, collect_bc, dagger_iteration, run_batch, Dataset, FollowerPolicy, Rollout, Source};
use crate::plot;
use crate::policy::{self, LstmPolicy, TrainConfig, TrainOutcome};
use crate::seeds;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";
const DATASET_FILE: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub finished_unix: u64,
}

/// Everything needed to audit or resume a run: the configuration it was
/// started with, every artifact with its checksum, and completed stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub created_unix: u64,
    pub updated_unix: u64,
    pub config: ExperimentConfig,
    pub stages: Vec<StageRecord>,
    /// Checkpoint paths relative to the output directory, in training order.
    pub checkpoints: Vec<String>,
    /// Relative path → checksum.
    pub artifacts: BTreeMap<String, Artifact>,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig) -> Self {
        let t = now_unix();
        RunManifest {
            tool_version: TOOL_VERSION.to_string(),
            created_unix: t,
            updated_unix: t,
            config: config.clone(),
            stages: Vec::new(),
            checkpoints: Vec::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn load(out: &Path) -> Result<Self> {
        let path = out.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        if m.tool_version != TOOL_VERSION {
            return Err(Error::Config(format!(
                "{} was written by version {}, this is {TOOL_VERSION}",
                path.display(),
                m.tool_version
            )));
        }
        Ok(m)
    }

    pub fn save(&mut self, out: &Path) -> Result<()> {
        self.updated_unix = now_unix();
        let text = serde_json::to_string_pretty(self).expect("manifest always serializes");
        let path = out.join(MANIFEST_FILE);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn has_stage(&self, stage: &str) -> bool {
        self.stages.iter().any(|s| s.stage == stage)
    }

    fn finish_stage(&mut self, stage: String) {
        self.stages.retain(|s| s.stage != stage);
        self.stages.push(StageRecord {
            stage,
            finished_unix: now_unix(),
        });
    }

    /// Writes `bytes` to `out/rel` and records its checksum.
    pub fn write(&mut self, out: &Path, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = out.join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.artifacts.insert(
            rel.to_string(),
            Artifact {
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
            },
        );
        Ok(path)
    }

    /// Reads an artifact back, refusing it if the checksum no longer matches.
    pub fn read_verified(&self, out: &Path, rel: &str) -> Result<Vec<u8>> {
        let path = out.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        match self.artifacts.get(rel) {
            Some(a) if a.sha256 == sha256_hex(&bytes) => Ok(bytes),
            Some(_) => Err(Error::Checksum(path)),
            None => Err(Error::Format {
                path,
                detail: "not listed in the run manifest".into(),
            }),
        }
    }

    /// Checks every recorded artifact against the files on disk.
    pub fn verify(&self, out: &Path) -> Result<()> {
        for rel in self.artifacts.keys() {
            self.read_verified(out, rel)?;
        }
        Ok(())
    }
}

fn checkpoint_rel(iteration: usize) -> String {
    format!("checkpoints/policy_{iteration:02}.ckpt")
}

fn train_config(cfg: &ExperimentConfig, iteration: usize) -> TrainConfig {
    TrainConfig {
        seed: seeds::derive(cfg.seed, "train", iteration as u64),
        ..cfg.train.clone()
    }
}

/// Configuration fields that must not change between the stages of one run.
fn same_experiment(a: &ExperimentConfig, b: &ExperimentConfig) -> bool {
    a.seed == b.seed && a.sim() == b.sim() && a.net == b.net && a.train == b.train
}

fn load_run(cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    let manifest = match RunManifest::load(out) {
        Err(Error::Io { .. }) => {
            return Err(Error::Config(format!(
                "no run found in {}; run behaviour cloning first",
                out.display()
            )))
        }
        m => m?,
    };
    if !same_experiment(&manifest.config, cfg) {
        return Err(Error::Config(format!(
            "{} holds a run with a different configuration",
            out.display()
        )));
    }
    Ok(manifest)
}

fn load_dataset(manifest: &RunManifest, out: &Path) -> Result<Dataset> {
    let bytes = manifest.read_verified(out, DATASET_FILE)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: out.join(DATASET_FILE),
        detail: e.to_string(),
    })
}

fn write_rollouts(manifest: &mut RunManifest, out: &Path, dir: &str, rollouts: &[Rollout], cfg: &ExperimentConfig) -> Result<()> {
    for r in rollouts {
        manifest.write(out, &format!("{dir}/rollout_{:03}.csv", r.id), r.to_csv(&cfg.reward)?.as_bytes())?;
    }
    Ok(())
}

fn train_and_save(
    manifest: &mut RunManifest,
    out: &Path,
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    iteration: usize,
) -> Result<TrainOutcome> {
    let outcome = policy::train(&dataset.training_view(), &cfg.net, &train_config(cfg, iteration))?;
    let rel = checkpoint_rel(iteration);
    manifest.write(out, &rel, &policy::encode(&outcome.params, &outcome.stats)?)?;
    manifest.write(out, &format!("training/history_{iteration:02}.csv"), outcome.history_csv().as_bytes())?;
    manifest.checkpoints.truncate(iteration);
    manifest.checkpoints.push(rel);
    Ok(outcome)
}

#[derive(Debug)]
pub struct BcOutput {
    pub rollouts: Vec<Rollout>,
    pub outcome: TrainOutcome,
    pub checkpoint: PathBuf,
}

/// Collects expert demonstrations, trains the first policy and starts a
/// fresh manifest (any earlier run in `out` is superseded).
pub fn cmd_bc(cfg: &ExperimentConfig, out: &Path) -> Result<BcOutput> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = RunManifest::new(cfg);
    let rollouts = collect_bc(&cfg.sim(), cfg.seed, cfg.counts.bc_rollouts)?;
    write_rollouts(&mut manifest, out, "bc", &rollouts, cfg)?;
    let mut dataset = Dataset::default();
    dataset.append(rollouts.clone())?;
    manifest.write(out, DATASET_FILE, &serde_json::to_vec(&dataset).expect("dataset serializes"))?;
    let outcome = train_and_save(&mut manifest, out, cfg, &dataset, 0)?;
    manifest.finish_stage("bc".into());
    manifest.save(out)?;
    Ok(BcOutput {
        rollouts,
        outcome,
        checkpoint: out.join(checkpoint_rel(0)),
    })
}

#[derive(Debug)]
pub struct DaggerIterationOutput {
    pub iteration: usize,
    pub rollouts: Vec<Rollout>,
    pub metrics: Vec<Metrics>,
    pub outcome: TrainOutcome,
}

/// Runs DAgger iterations until `cfg.counts.dagger_iterations` are complete.
/// Iterations already recorded in the manifest are skipped, so an
/// interrupted run resumes where it stopped.
pub fn cmd_dagger(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<DaggerIterationOutput>> {
    cfg.validate()?;
    let mut manifest = load_run(cfg, out)?;
    if !manifest.has_stage("bc") {
        return Err(Error::Config("run behaviour cloning before DAgger".into()));
    }
    let mut dataset = load_dataset(&manifest, out)?;
    let sim = cfg.sim();
    let mut results = Vec::new();
    let done = (1..).take_while(|k| manifest.has_stage(&format!("dagger-{k}"))).count();
    for iteration in done + 1..=cfg.counts.dagger_iterations {
        let prev = manifest.checkpoints.get(iteration - 1).cloned().ok_or_else(|| {
            Error::Format {
                path: out.join(MANIFEST_FILE),
                detail: format!("no checkpoint for iteration {}", iteration - 1),
            }
        })?;
        let (params, stats) = policy::decode(&manifest.read_verified(out, &prev)?, &out.join(&prev))?;
        let learner = LstmPolicy::new(params, stats);
        let batch = dagger_iteration(&sim, cfg.seed, iteration, cfg.counts.dagger_rollouts, &learner, &mut dataset)?;
        let dir = format!("dagger/iter_{iteration:02}");
        write_rollouts(&mut manifest, out, &dir, &batch, cfg)?;
        let metrics = batch
            .iter()
            .map(|r| rollout_metrics(r, &cfg.reward))
            .collect::<Result<Vec<_>>>()?;
        let label = format!("policy_{:02}", iteration - 1);
        let rows: Vec<_> = batch.iter().zip(&metrics).map(|(r, m)| (r.id, label.clone(), r, *m)).collect();
        manifest.write(out, &format!("{dir}/metrics.csv"), metrics_csv(&rows).as_bytes())?;
        manifest.write(out, DATASET_FILE, &serde_json::to_vec(&dataset).expect("dataset serializes"))?;
        let outcome = train_and_save(&mut manifest, out, cfg, &dataset, iteration)?;
        manifest.finish_stage(format!("dagger-{iteration}"));
        manifest.config.counts.dagger_iterations = manifest.config.counts.dagger_iterations.max(iteration);
        manifest.save(out)?;
        results.push(DaggerIterationOutput {
            iteration,
            rollouts: batch,
            metrics,
            outcome,
        });
    }
    Ok(results)
}

/// A policy named on the evaluation command line.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyRef {
    Expert,
    NoSteering,
    Checkpoint { label: String, path: PathBuf },
}

impl PolicyRef {
    /// `expert`, `none`, a checkpoint file, or the stem of a checkpoint in
    /// `out/checkpoints` (e.g. `policy_02`).
    pub fn parse(name: &str, out: &Path) -> Result<Self> {
        match name {
            "expert" => return Ok(PolicyRef::Expert),
            "none" => return Ok(PolicyRef::NoSteering),
            _ => {}
        }
        let direct = PathBuf::from(name);
        let path = if direct.is_file() {
            direct
        } else {
            let named = out.join("checkpoints").join(format!("{name}.ckpt"));
            if !named.is_file() {
                return Err(Error::invalid(format!(
                    "unknown policy {name:?}: expected expert, none or a checkpoint"
                )));
            }
            named
        };
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| name.to_string());
        Ok(PolicyRef::Checkpoint { label, path })
    }

    pub fn label(&self) -> &str {
        match self {
            PolicyRef::Expert => "expert",
            PolicyRef::NoSteering => "none",
            PolicyRef::Checkpoint { label, .. } => label,
        }
    }

    fn load(&self) -> Result<FollowerPolicy> {
        Ok(match self {
            PolicyRef::Expert => FollowerPolicy::Expert,
            PolicyRef::NoSteering => FollowerPolicy::NoSteering,
            PolicyRef::Checkpoint { path, .. } => {
                let (params, stats) = policy::load(path)?;
                FollowerPolicy::Learner(Box::new(LstmPolicy::new(params, stats)))
            }
        })
    }
}

#[derive(Debug)]
pub struct PolicyEvaluation {
    pub label: String,
    pub rollouts: Vec<Rollout>,
    pub metrics: Vec<Metrics>,
    pub summary: Vec<SummaryRow>,
}

impl PolicyEvaluation {
    pub fn reward_quartiles(&self) -> Option<Quartiles> {
        self.summary.first().and_then(|r| r.reward)
    }

    pub fn mae_quartiles(&self) -> Option<Quartiles> {
        self.summary.first().and_then(|r| r.mae)
    }
}

#[derive(Debug)]
pub struct EvalOutput {
    pub policies: Vec<PolicyEvaluation>,
    pub table: String,
    pub metrics_csv: String,
}

/// Evaluates every policy on the same rollout seeds and writes metrics,
/// summaries, trajectory plots and a learning curve over the checkpoints.
pub fn cmd_eval(cfg: &ExperimentConfig, out: &Path, policies: &[PolicyRef]) -> Result<EvalOutput> {
    cfg.validate()?;
    if policies.is_empty() {
        return Err(Error::invalid("no policies to evaluate"));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = match RunManifest::load(out) {
        Ok(m) => m,
        Err(Error::Io { .. }) => RunManifest::new(cfg),
        Err(e) => return Err(e),
    };
    let sim = cfg.sim();
    let specs = batch_specs(cfg.seed, "eval", 0, cfg.counts.eval_rollouts, Source::Eval)?;
    let mut results = Vec::new();
    for p in policies {
        let rollouts = run_batch(&sim, &specs, &p.load()?)?;
        let metrics = rollouts
            .iter()
            .map(|r| rollout_metrics(r, &cfg.reward))
            .collect::<Result<Vec<_>>>()?;
        let summary = summarize(p.label(), &metrics)?;
        results.push(PolicyEvaluation {
            label: p.label().to_string(),
            rollouts,
            metrics,
            summary,
        });
    }

    let rows: Vec<_> = results
        .iter()
        .flat_map(|e| e.rollouts.iter().zip(&e.metrics).map(|(r, m)| (r.id, e.label.clone(), r, *m)))
        .collect();
    let metrics_text = metrics_csv(&rows);
    manifest.write(out, "eval/metrics.csv", metrics_text.as_bytes())?;
    let all_rows: Vec<SummaryRow> = results.iter().flat_map(|e| e.summary.clone()).collect();
    manifest.write(out, "eval/summary.csv", summary_csv(&all_rows).as_bytes())?;
    let table = quartile_table(&results);
    manifest.write(out, "eval/summary.txt", table.as_bytes())?;

    for e in &results {
        let shown: Vec<&Rollout> = e.rollouts.iter().take(2).collect();
        let svg = plot::trajectory_svg(&cfg.tank, &shown, &format!("policy {}", e.label));
        manifest.write(out, &format!("eval/trajectories_{}.svg", e.label), svg.as_bytes())?;
    }
    let stages: Vec<(String, Quartiles)> = policies
        .iter()
        .zip(&results)
        .filter(|(p, _)| matches!(p, PolicyRef::Checkpoint { .. }))
        .filter_map(|(_, e)| e.reward_quartiles().map(|q| (e.label.clone(), q)))
        .collect();
    let references: Vec<(String, f64)> = policies
        .iter()
        .zip(&results)
        .filter(|(p, _)| !matches!(p, PolicyRef::Checkpoint { .. }))
        .filter_map(|(_, e)| e.reward_quartiles().map(|q| (e.label.clone(), q.median)))
        .collect();
    let curve = plot::learning_curve_svg(&stages, &references, "cumulative reward");
    manifest.write(out, "eval/learning_curve.svg", curve.as_bytes())?;
    manifest.finish_stage("eval".into());
    manifest.save(out)?;
    Ok(EvalOutput {
        policies: results,
        table,
        metrics_csv: metrics_text,
    })
}

/// Per-policy quartiles (Q1 / median / Q3) of MAE and cumulative reward.
pub fn quartile_table(results: &[PolicyEvaluation]) -> String {
    let mut s = format!(
        "{:<14} {:<10} {:>5}  {:>26}  {:>26}\n",
        "policy", "subset", "n", "mae q1/med/q3", "reward q1/med/q3"
    );
    let fmt = |q: Option<Quartiles>, digits: usize| match q {
        Some(q) => format!("{:.d$}/{:.d$}/{:.d$}", q.q1, q.median, q.q3, d = digits),
        None => "-".into(),
    };
    for e in results {
        for r in &e.summary {
            let _ = writeln!(
                s,
                "{:<14} {:<10} {:>5}  {:>26}  {:>26}",
                r.policy,
                r.subset,
                r.count,
                fmt(r.mae, 4),
                fmt(r.reward, 1)
            );
        }
    }
    s
}

#[derive(Debug)]
pub struct FixedFollowerOutput {
    pub cells: Vec<FixedFollowerCell>,
    pub skipped: Vec<(f64, f64)>,
}

/// Static follower grid with all sensor noise switched off.
pub fn cmd_fixed_follower(cfg: &ExperimentConfig, out: &Path) -> Result<FixedFollowerOutput> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = match RunManifest::load(out) {
        Ok(m) => m,
        Err(Error::Io { .. }) => RunManifest::new(cfg),
        Err(e) => return Err(e),
    };
    let (cells, skipped) = fixed_follower_experiment(
        &cfg.fixed_follower,
        &cfg.body,
        &cfg.cpg,
        &cfg.flow.noiseless(),
        seeds::derive(cfg.seed, seeds::NOISE, u64::MAX),
    )?;
    manifest.write(out, "fixed_follower/grid.csv", fixed_follower_csv(&cells).as_bytes())?;
    for c in &cells {
        let mut trace = String::from("t,p_left,p_right\n");
        for f in &c.frames {
            let _ = writeln!(trace, "{},{},{}", f.t, f.p_left, f.p_right);
        }
        manifest.write(
            out,
            &format!("fixed_follower/trace_lat{}_lon{}.csv", c.lateral, c.longitudinal),
            trace.as_bytes(),
        )?;
    }
    manifest.write(out, "fixed_follower/panel.svg", plot::fixed_follower_svg(&cells).as_bytes())?;
    manifest.finish_stage("fixed-follower".into());
    manifest.save(out)?;
    Ok(FixedFollowerOutput { cells, skipped })
}

#[derive(Debug)]
pub struct DeskOutput {
    pub bc: BcOutput,
    pub dagger: Vec<DaggerIterationOutput>,
    pub eval: EvalOutput,
}

impl DeskOutput {
    pub fn policy(&self, label: &str) -> Option<&PolicyEvaluation> {
        self.eval.policies.iter().find(|p| p.label == label)
    }

    /// Label of the last checkpoint (the final DAgger policy).
    pub fn final_label(&self) -> String {
        format!("policy_{:02}", self.dagger.len())
    }
}

/// The whole experiment end to end: BC, every DAgger iteration, then an
/// evaluation of the references and every checkpoint.
pub fn run_desk(cfg: &ExperimentConfig, out: &Path) -> Result<DeskOutput> {
    let bc = cmd_bc(cfg, out)?;
    let dagger = cmd_dagger(cfg, out)?;
    let mut policies = vec![PolicyRef::NoSteering, PolicyRef::Expert];
    for k in 0..=dagger.len() {
        policies.push(PolicyRef::parse(&format!("policy_{k:02}"), out)?);
    }
    let eval = cmd_eval(cfg, out, &policies)?;
    Ok(DeskOutput { bc, dagger, eval })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new(&ExperimentConfig::default());
        m.write(dir.path(), "a/b.txt", b"hello").unwrap();
        m.save(dir.path()).unwrap();
        let back = RunManifest::load(dir.path()).unwrap();
        assert_eq!(back.artifacts, m.artifacts);
        back.verify(dir.path()).unwrap();
        std::fs::write(dir.path().join("a/b.txt"), b"hellO").unwrap();
        assert!(matches!(back.verify(dir.path()), Err(Error::Checksum(_))));
    }

    #[test]
    fn policy_names() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(PolicyRef::parse("expert", dir.path()).unwrap(), PolicyRef::Expert);
        assert_eq!(PolicyRef::parse("none", dir.path()).unwrap(), PolicyRef::NoSteering);
        assert!(matches!(PolicyRef::parse("oracle", dir.path()), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn dagger_needs_a_bc_run() {
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_dagger(&ExperimentConfig::default(), dir.path()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
