//! The learner: an LSTM policy from sensor frames to a steering fraction.
//!
//! Architecture: LSTM (one bias vector per gate) → fully connected tanh layer
//! → dropout (training only) → linear output without bias → tanh → scale.
//! With the default sizes this is exactly 22,912 parameters:
//! 4·(64·(8+64)+64) + (64·64+64) + 64.
//!
//! All parameters live in one flat vector, in this order:
//! LSTM input weights `4H × I`, LSTM recurrent weights `4H × H`, LSTM bias
//! `4H`, hidden layer weights `F × H`, hidden layer bias `F`, output weights
//! `F`. Gate blocks are ordered input, forget, cell, output; matrices are
//! row-major.

mod adam;
mod bptt;
mod checkpoint;
mod gemm;
mod norm;
mod train;

pub use adam::{adam_step, AdamConfig, AdamMoments};
pub use bptt::{bptt_gradients, sequence_loss, DropoutMasks, GradientResult, Sequence};
pub use checkpoint::{decode, encode, load, save, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use norm::{apply_norm, invert_norm, normalize, NormStats};
pub use train::{evaluate_loss, split_rollouts, train, EpochRecord, TrainConfig, TrainOutcome, TrainingRollout};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::OBSERVATION_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub input_dim: usize,
    pub lstm_units: usize,
    pub fc_units: usize,
    pub dropout_rate: f64,
    /// Bound on the emitted steering fraction.
    pub output_scale: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_dim: OBSERVATION_DIM,
            lstm_units: 64,
            fc_units: 64,
            dropout_rate: 0.2,
            output_scale: 0.3,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.lstm_units == 0 || self.fc_units == 0 {
            return Err(Error::Config("network layer sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !(self.output_scale > 0.0) {
            return Err(Error::Config("output scale must be positive".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self)
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().total
    }
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub input: usize,
    pub hidden: usize,
    pub fc: usize,
    pub w_x: usize,
    pub w_h: usize,
    pub b: usize,
    pub w_fc: usize,
    pub b_fc: usize,
    pub w_out: usize,
    pub total: usize,
}

impl ParamLayout {
    fn new(cfg: &NetConfig) -> Self {
        let (i, h, f) = (cfg.input_dim, cfg.lstm_units, cfg.fc_units);
        let w_x = 0;
        let w_h = w_x + 4 * h * i;
        let b = w_h + 4 * h * h;
        let w_fc = b + 4 * h;
        let b_fc = w_fc + f * h;
        let w_out = b_fc + f;
        ParamLayout {
            input: i,
            hidden: h,
            fc: f,
            w_x,
            w_h,
            b,
            w_fc,
            b_fc,
            w_out,
            total: w_out + f,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub config: NetConfig,
    pub values: Vec<f64>,
}

impl NetParams {
    pub fn zeros(config: NetConfig) -> Self {
        NetParams {
            values: vec![0.0; config.parameter_count()],
            config,
        }
    }

    /// Uniform ±1/√fan-in initialisation. The LSTM blocks use the
    /// concatenated input and hidden width as their fan-in.
    pub fn init(config: NetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = config.layout();
        let mut values = vec![0.0; l.total];
        let lstm_bound = 1.0 / ((l.input + l.hidden) as f64).sqrt();
        let fc_bound = 1.0 / (l.hidden as f64).sqrt();
        let out_bound = 1.0 / (l.fc as f64).sqrt();
        for (k, v) in values.iter_mut().enumerate() {
            let bound = if k < l.w_fc {
                lstm_bound
            } else if k < l.w_out {
                fc_bound
            } else {
                out_bound
            };
            *v = rng.gen_range(-bound..=bound);
        }
        NetParams { config, values }
    }

    pub fn layout(&self) -> ParamLayout {
        self.config.layout()
    }

    pub fn check(&self) -> Result<()> {
        let expected = self.config.parameter_count();
        if self.values.len() != expected {
            return Err(Error::invalid(format!(
                "parameter vector has {} entries, config needs {expected}",
                self.values.len()
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("policy", "non-finite parameter"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl HiddenState {
    pub fn zeros(config: &NetConfig) -> Self {
        HiddenState {
            h: vec![0.0; config.lstm_units],
            c: vec![0.0; config.lstm_units],
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `tanh` through one `exp`; several times cheaper than the libm routine and
/// within a few ulps of it.
pub(crate) fn tanh(x: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

/// One recurrent step on a normalised input vector. `dropout_mask`, when
/// given, multiplies the hidden-layer activations (training mode); inference
/// passes `None`.
pub fn forward_step(
    params: &NetParams,
    input: &[f64],
    state: &HiddenState,
    dropout_mask: Option<&[f64]>,
) -> Result<(f64, HiddenState)> {
    let l = params.layout();
    if input.len() != l.input {
        return Err(Error::invalid(format!(
            "policy expects {} inputs, got {}",
            l.input,
            input.len()
        )));
    }
    if state.h.len() != l.hidden || state.c.len() != l.hidden {
        return Err(Error::invalid("hidden state size does not match the network"));
    }
    if let Some(m) = dropout_mask {
        if m.len() != l.fc {
            return Err(Error::invalid("dropout mask size does not match the hidden layer"));
        }
    }
    let p = &params.values;
    let (ni, nh, nf) = (l.input, l.hidden, l.fc);
    let mut z = p[l.b..l.b + 4 * nh].to_vec();
    for (row, zr) in z.iter_mut().enumerate() {
        let wx = &p[l.w_x + row * ni..l.w_x + (row + 1) * ni];
        let wh = &p[l.w_h + row * nh..l.w_h + (row + 1) * nh];
        *zr += wx.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        *zr += wh.iter().zip(&state.h).map(|(w, h)| w * h).sum::<f64>();
    }
    let mut next = HiddenState::zeros(&params.config);
    for u in 0..nh {
        let ig = sigmoid(z[u]);
        let fg = sigmoid(z[nh + u]);
        let gg = tanh(z[2 * nh + u]);
        let og = sigmoid(z[3 * nh + u]);
        next.c[u] = fg * state.c[u] + ig * gg;
        next.h[u] = og * tanh(next.c[u]);
    }
    let mut y = 0.0;
    for k in 0..nf {
        let w = &p[l.w_fc + k * nh..l.w_fc + (k + 1) * nh];
        let pre = p[l.b_fc + k] + w.iter().zip(&next.h).map(|(a, b)| a * b).sum::<f64>();
        let mut act = tanh(pre);
        if let Some(m) = dropout_mask {
            act *= m[k];
        }
        y += p[l.w_out + k] * act;
    }
    let sigma = params.config.output_scale * tanh(y);
    Ok((sigma, next))
}

/// A trained policy bundled with its normalisation statistics and the
/// recurrent state of the current rollout.
#[derive(Debug, Clone)]
pub struct LstmPolicy {
    pub params: NetParams,
    pub stats: NormStats,
    state: HiddenState,
}

impl LstmPolicy {
    pub fn new(params: NetParams, stats: NormStats) -> Self {
        let state = HiddenState::zeros(&params.config);
        LstmPolicy {
            params,
            stats,
            state,
        }
    }

    pub fn reset(&mut self) {
        self.state = HiddenState::zeros(&self.params.config);
    }

    /// Steering fraction for one raw (calibrated, unnormalised) observation.
    pub fn act(&mut self, observation: &[f64; OBSERVATION_DIM]) -> Result<f64> {
        let x = apply_norm(observation, &self.stats);
        let (sigma, next) = forward_step(&self.params, &x, &self.state, None)?;
        self.state = next;
        Ok(sigma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_parameter_count() {
        assert_eq!(NetConfig::default().parameter_count(), 22_912);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let params = NetParams::zeros(NetConfig::default());
        let h = HiddenState::zeros(&params.config);
        let (sigma, _) = forward_step(&params, &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0, -9.0, 4.0], &h, None).unwrap();
        assert_eq!(sigma, 0.0);
    }

    #[test]
    fn inference_is_deterministic_and_bounded() {
        let mut params = NetParams::init(NetConfig::default(), 3);
        for v in &mut params.values {
            *v *= 40.0;
        }
        let h = HiddenState::zeros(&params.config);
        let x = [3.0, -1.0, 0.2, 0.0, 1.0, 2.0, -2.0, 0.7];
        let a = forward_step(&params, &x, &h, None).unwrap();
        let b = forward_step(&params, &x, &h, None).unwrap();
        assert_eq!(a, b);
        assert!(a.0.abs() <= 0.3);
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let params = NetParams::zeros(NetConfig::default());
        let h = HiddenState::zeros(&params.config);
        assert!(matches!(forward_step(&params, &[0.0; 7], &h, None), Err(Error::InvalidArgument(_))));
    }
}
