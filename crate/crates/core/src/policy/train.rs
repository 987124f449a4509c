//! Supervised training with a rollout-level split and best-validation
//! weight selection.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamMoments};
use super::bptt::{Batch, DropoutMasks, Sequence, Workspace};
use super::norm::{apply_norm, normalize, NormStats};
use super::{NetConfig, NetParams};
use crate::error::{Error, Result};
use crate::flow::OBSERVATION_DIM;
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.005,
            epochs: 500,
            train_fraction: 0.9,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if !(self.learning_rate > 0.0) || self.epochs == 0 {
            return Err(Error::Config("learning rate and epoch count must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Config("invalid Adam hyper-parameters".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// One labelled rollout as the trainer sees it. `group` identifies the
/// collection batch it came from (BC, or one DAgger iteration).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRollout {
    pub inputs: Vec<[f64; OBSERVATION_DIM]>,
    pub labels: Vec<f64>,
    pub group: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetParams,
    pub stats: NormStats,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

impl TrainOutcome {
    pub fn best_val_loss(&self) -> f64 {
        self.history[self.best_epoch - 1].val_loss
    }

    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for r in &self.history {
            s.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_loss));
        }
        s
    }
}

/// Splits rollout indices into (train, validation). Each collection group
/// is split on its own so that every batch is represented on both sides;
/// a group holds out `max(1, round((1 − f) · n))` rollouts, and groups of
/// one go entirely to training.
pub fn split_rollouts(groups: &[usize], train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if groups.len() < 2 {
        return Err(Error::Split(format!(
            "need at least 2 rollouts for a train/validation split, got {}",
            groups.len()
        )));
    }
    let mut ids: Vec<usize> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for g in ids {
        let mut members: Vec<usize> = (0..groups.len()).filter(|&i| groups[i] == g).collect();
        if members.len() == 1 {
            train.push(members[0]);
            continue;
        }
        let n_val = (((1.0 - train_fraction) * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
        members.shuffle(&mut seeds::rng(seed, seeds::SPLIT, g as u64));
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    if val.is_empty() {
        // Every group was a singleton: fall back to one pooled split.
        let mut all: Vec<usize> = (0..groups.len()).collect();
        all.shuffle(&mut seeds::rng(seed, seeds::SPLIT, u64::MAX));
        let n_val = (((1.0 - train_fraction) * all.len() as f64).round() as usize).clamp(1, all.len() - 1);
        val = all[..n_val].to_vec();
        train = all[n_val..].to_vec();
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

fn to_sequences(rollouts: &[TrainingRollout], idx: &[usize], stats: &NormStats) -> Vec<Sequence> {
    idx.iter()
        .map(|&i| {
            let r = &rollouts[i];
            Sequence {
                inputs: r.inputs.iter().flat_map(|x| apply_norm(x, stats)).collect(),
                labels: r.labels.clone(),
            }
        })
        .collect()
}

/// Fits normalisation on the training split, runs full-batch BPTT with Adam
/// for `epochs` epochs, and returns the weights of the epoch with the lowest
/// validation loss.
pub fn train(rollouts: &[TrainingRollout], net: &NetConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    net.validate()?;
    cfg.validate()?;
    if net.input_dim != OBSERVATION_DIM {
        return Err(Error::Config(format!("network input must be {OBSERVATION_DIM} wide")));
    }
    for (k, r) in rollouts.iter().enumerate() {
        if r.inputs.is_empty() || r.inputs.len() != r.labels.len() {
            return Err(Error::invalid(format!("rollout {k} is empty or misaligned")));
        }
    }
    let groups: Vec<usize> = rollouts.iter().map(|r| r.group).collect();
    let (train_idx, val_idx) = split_rollouts(&groups, cfg.train_fraction, cfg.seed)?;

    let train_x: Vec<[f64; OBSERVATION_DIM]> =
        train_idx.iter().flat_map(|&i| rollouts[i].inputs.iter().copied()).collect();
    let train_y: Vec<f64> = train_idx.iter().flat_map(|&i| rollouts[i].labels.iter().copied()).collect();
    let stats = normalize(&train_x, &train_y)?;
    let label_std = stats.output_std;

    let train_batch = Batch::new(&to_sequences(rollouts, &train_idx, &stats), net.input_dim)?;
    let val_batch = Batch::new(&to_sequences(rollouts, &val_idx, &stats), net.input_dim)?;

    let mut params = NetParams::init(*net, seeds::derive(cfg.seed, seeds::INIT, 0));
    let mut moments = AdamMoments::zeros(params.values.len());
    let mut dropout_rng = seeds::rng(cfg.seed, seeds::DROPOUT, 0);
    let adam = cfg.adam();
    let mut work = Workspace::default();
    let mut val_work = Workspace::default();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (usize::MAX, f64::INFINITY, params.clone());

    for epoch in 1..=cfg.epochs {
        let masks = (net.dropout_rate > 0.0)
            .then(|| DropoutMasks::sample(&mut dropout_rng, train_batch.lengths(), net.fc_units, net.dropout_rate));
        let g = train_batch.gradients(&params, masks.as_ref(), label_std, &mut work)?;
        adam_step(&mut params.values, &g.gradient, &mut moments, epoch as u64, &adam)?;
        let val_loss = val_batch.loss(&params, label_std, &mut val_work)?;
        if !val_loss.is_finite() {
            return Err(Error::numeric("training", format!("validation loss diverged at epoch {epoch}")));
        }
        history.push(EpochRecord {
            epoch,
            train_loss: g.loss,
            val_loss,
        });
        if val_loss < best.1 {
            best = (epoch, val_loss, params.clone());
        }
    }
    Ok(TrainOutcome {
        params: best.2,
        stats,
        history,
        best_epoch: best.0,
        train_indices: train_idx,
        val_indices: val_idx,
    })
}

/// Mean normalised squared error of `params` on the given rollouts in
/// inference mode.
pub fn evaluate_loss(params: &NetParams, stats: &NormStats, rollouts: &[TrainingRollout]) -> Result<f64> {
    let idx: Vec<usize> = (0..rollouts.len()).collect();
    let batch = Batch::new(&to_sequences(rollouts, &idx, stats), params.config.input_dim)?;
    batch.loss(params, stats.output_std, &mut Workspace::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, len: usize, group: usize, label: impl Fn(usize, usize) -> f64) -> Vec<TrainingRollout> {
        (0..n)
            .map(|k| TrainingRollout {
                inputs: (0..len)
                    .map(|t| {
                        let a = (t as f64 * 0.2 + k as f64).sin();
                        [a, a * 0.5, 1.0 - a, a * a, 3.0 * a, 0.1, -a, a * 2.0]
                    })
                    .collect(),
                labels: (0..len).map(|t| label(k, t)).collect(),
                group,
            })
            .collect()
    }

    #[test]
    fn twenty_rollouts_split_eighteen_two() {
        let (t, v) = split_rollouts(&[0; 20], 0.9, 1).unwrap();
        assert_eq!((t.len(), v.len()), (18, 2));
        let (t2, v2) = split_rollouts(&[0; 20], 0.9, 1).unwrap();
        assert_eq!((t, v), (t2, v2));
    }

    #[test]
    fn groups_are_split_separately() {
        let mut groups = vec![0; 12];
        groups.extend([1; 8]);
        let (t, v) = split_rollouts(&groups, 0.9, 3).unwrap();
        assert_eq!(t.len() + v.len(), 20);
        assert_eq!(v.iter().filter(|&&i| i < 12).count(), 1);
        assert_eq!(v.iter().filter(|&&i| i >= 12).count(), 1);
    }

    #[test]
    fn single_rollout_cannot_be_split() {
        assert!(matches!(split_rollouts(&[0], 0.9, 0), Err(Error::Split(_))));
    }

    #[test]
    fn constant_labels_are_learned() {
        let data = toy(6, 30, 0, |_, _| 0.12);
        let net = NetConfig {
            dropout_rate: 0.0,
            ..NetConfig::default()
        };
        let cfg = TrainConfig {
            epochs: 200,
            ..TrainConfig::default()
        };
        let out = train(&data, &net, &cfg).unwrap();
        let train_set: Vec<_> = out.train_indices.iter().map(|&i| data[i].clone()).collect();
        // constant label: output std snaps to 1, so this is the raw MSE
        assert!(out.stats.degenerate[OBSERVATION_DIM]);
        assert!(evaluate_loss(&out.params, &out.stats, &train_set).unwrap() < 1e-6);
    }

    #[test]
    fn selection_and_determinism() {
        let data = toy(10, 40, 0, |k, t| 0.25 * ((t as f64 * 0.2 + k as f64).sin()));
        let net = NetConfig {
            lstm_units: 8,
            fc_units: 8,
            ..NetConfig::default()
        };
        let cfg = TrainConfig {
            epochs: 30,
            seed: 4,
            ..TrainConfig::default()
        };
        let a = train(&data, &net, &cfg).unwrap();
        let b = train(&data, &net, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history_csv(), b.history_csv());
        assert!(a.best_val_loss() <= a.history.last().unwrap().val_loss);
        assert_eq!(a.history.len(), 30);
        let min = a.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(a.best_val_loss(), min);
        assert!(a.history_csv().starts_with("epoch,train_loss,val_loss\n1,"));
    }
}
