//! Experiment configuration: one TOML document with a section per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cpg::CpgParams;
use crate::error::{Error, Result};
use crate::eval::{FixedFollowerConfig, RewardConfig};
use crate::flow::FlowModelParams;
use crate::geometry::{GuidanceConfig, TankSpec};
use crate::imitation::{ProtocolConfig, SimConfig};
use crate::policy::{NetConfig, TrainConfig};
use crate::swimmer::BodySpec;

/// How much data each stage collects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Counts {
    pub bc_rollouts: usize,
    pub dagger_iterations: usize,
    pub dagger_rollouts: usize,
    pub eval_rollouts: usize,
}

impl Default for Counts {
    fn default() -> Self {
        Counts {
            bc_rollouts: 12,
            dagger_iterations: 3,
            dagger_rollouts: 8,
            eval_rollouts: 20,
        }
    }
}

impl Counts {
    /// The published protocol: 120 demonstrations, then 20-rollout DAgger
    /// iterations.
    pub fn published() -> Self {
        Counts {
            bc_rollouts: 120,
            dagger_iterations: 6,
            dagger_rollouts: 20,
            eval_rollouts: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, n) in [
            ("bc_rollouts", self.bc_rollouts),
            ("dagger_rollouts", self.dagger_rollouts),
            ("eval_rollouts", self.eval_rollouts),
        ] {
            if n == 0 || n % 2 != 0 {
                return Err(Error::Config(format!(
                    "{name} must be a positive even number (left/right balance), got {n}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub counts: Counts,
    pub tank: TankSpec,
    pub body: BodySpec,
    pub cpg: CpgParams,
    pub flow: FlowModelParams,
    pub guidance: GuidanceConfig,
    pub protocol: ProtocolConfig,
    pub reward: RewardConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub fixed_follower: FixedFollowerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        ExperimentConfig {
            seed: 2024,
            output_dir: PathBuf::from("runs/desk"),
            counts: Counts::default(),
            tank: sim.tank,
            body: sim.body,
            cpg: sim.cpg,
            flow: sim.flow,
            guidance: sim.guidance,
            protocol: sim.protocol,
            reward: sim.reward,
            net: NetConfig::default(),
            train: TrainConfig::default(),
            fixed_follower: FixedFollowerConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn sim(&self) -> SimConfig {
        SimConfig {
            tank: self.tank,
            body: self.body.clone(),
            cpg: self.cpg.clone(),
            flow: self.flow.clone(),
            guidance: self.guidance,
            protocol: self.protocol.clone(),
            reward: self.reward,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sim().validate()?;
        self.counts.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        self.fixed_follower.validate()?;
        if self.net.input_dim != crate::flow::OBSERVATION_DIM {
            return Err(Error::Config(format!(
                "net.input_dim must be {}, got {}",
                crate::flow::OBSERVATION_DIM,
                self.net.input_dim
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration always serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_documents_fill_in_defaults() {
        let cfg = ExperimentConfig::from_toml("seed = 5\n[counts]\nbc_rollouts = 4\n[train]\nepochs = 9\n").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.counts.bc_rollouts, 4);
        assert_eq!(cfg.counts.eval_rollouts, Counts::default().eval_rollouts);
        assert_eq!(cfg.train.epochs, 9);
        assert_eq!(cfg.train.learning_rate, TrainConfig::default().learning_rate);
        assert_eq!(cfg.net, NetConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(ExperimentConfig::from_toml("sede = 5\n"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("[net]\nlstm_unit = 3\n"), Err(Error::Config(_))));
    }

    #[test]
    fn odd_counts_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.counts.bc_rollouts = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn published_scale_is_expressible() {
        let mut cfg = ExperimentConfig {
            counts: Counts::published(),
            ..ExperimentConfig::default()
        };
        cfg.train.epochs = 10_000;
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back.counts.bc_rollouts, 120);
        assert_eq!(back.train.epochs, 10_000);
    }
}
