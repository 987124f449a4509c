//! Kuramoto-style central pattern generator.
//!
//! One phase oscillator per joint, coupled to its chain neighbours, with
//! critically damped second-order amplitude and offset dynamics. The steering
//! fraction is the only control input: it moves every joint's offset toward
//! `σ · R_i`.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bound on the steering offset as a fraction of the oscillation amplitude.
pub const STEERING_LIMIT: f64 = 0.3;

/// Largest integration step accepted by the step functions.
pub const MAX_DT: f64 = 0.02;

pub fn clamp_steering(sigma: f64) -> f64 {
    clamp_steering_to(sigma, STEERING_LIMIT)
}

/// NaN maps to zero steering.
pub fn clamp_steering_to(sigma: f64, limit: f64) -> f64 {
    if sigma.is_nan() {
        return 0.0;
    }
    sigma.clamp(-limit, limit)
}

pub fn truncate_torque(raw: f64, limit: f64) -> f64 {
    if raw.is_nan() {
        return 0.0;
    }
    raw.clamp(-limit, limit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CpgParams {
    /// Oscillation frequency in Hz.
    pub frequency: f64,
    /// Target oscillation amplitude per joint.
    pub target_amplitude: Vec<f64>,
    /// Phase coupling strength (1/s).
    pub coupling_weight: f64,
    /// Desired phase of joint i+1 minus phase of joint i (radians).
    pub phase_bias: f64,
    /// Convergence rate of amplitude and offset (1/s).
    pub amplitude_gain: f64,
    pub torque_limit: f64,
    pub clamp_fraction: f64,
}

impl Default for CpgParams {
    fn default() -> Self {
        CpgParams::uniform(5, crate::swimmer::DEFAULT_TORQUE_AMPLITUDE)
    }
}

impl CpgParams {
    /// Default gait with the same target amplitude on every joint.
    pub fn uniform(joints: usize, amplitude: f64) -> Self {
        CpgParams {
            frequency: 5.0,
            target_amplitude: vec![amplitude; joints],
            coupling_weight: 20.0,
            phase_bias: (-65.0f64).to_radians(),
            amplitude_gain: 20.0,
            torque_limit: 1.15 * amplitude,
            clamp_fraction: STEERING_LIMIT,
        }
    }

    pub fn joints(&self) -> usize {
        self.target_amplitude.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.frequency > 0.0 && self.frequency.is_finite()) {
            return bad(format!("cpg frequency must be positive, got {}", self.frequency));
        }
        if self.target_amplitude.is_empty() {
            return bad("cpg needs at least one joint".into());
        }
        if self.target_amplitude.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return bad("cpg target amplitudes must be positive".into());
        }
        if !(self.torque_limit > 0.0) {
            return bad(format!("torque limit must be positive, got {}", self.torque_limit));
        }
        if !(self.clamp_fraction > 0.0 && self.clamp_fraction <= 1.0) {
            return bad(format!(
                "clamp fraction must be in (0, 1], got {}",
                self.clamp_fraction
            ));
        }
        if !(self.coupling_weight >= 0.0 && self.amplitude_gain > 0.0) {
            return bad("coupling weight and amplitude gain must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpgState {
    pub phase: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub amplitude_rate: Vec<f64>,
    pub offset: Vec<f64>,
    pub offset_rate: Vec<f64>,
}

impl CpgState {
    /// Oscillators at zero amplitude with phases already on the travelling wave.
    pub fn at_rest(params: &CpgParams) -> Self {
        let phases = (0..params.joints())
            .map(|i| i as f64 * params.phase_bias)
            .collect();
        CpgState::with_phases(phases)
    }

    pub fn with_phases(phase: Vec<f64>) -> Self {
        let n = phase.len();
        CpgState {
            phase,
            amplitude: vec![0.0; n],
            amplitude_rate: vec![0.0; n],
            offset: vec![0.0; n],
            offset_rate: vec![0.0; n],
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            &self.phase,
            &self.amplitude,
            &self.amplitude_rate,
            &self.offset,
            &self.offset_rate,
        ]
        .iter()
        .all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Raw (untruncated) torque of joint `i`.
    pub fn raw_torque(&self, i: usize) -> f64 {
        self.offset[i] + self.amplitude[i] * self.phase[i].cos()
    }
}

/// Per-joint torques, each within the torque limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorqueCommand(pub Vec<f64>);

impl TorqueCommand {
    pub fn zeros(n: usize) -> Self {
        TorqueCommand(vec![0.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Torques the oscillators would emit in `state`.
pub fn output_torques(state: &CpgState, params: &CpgParams) -> TorqueCommand {
    TorqueCommand(
        (0..state.phase.len())
            .map(|i| truncate_torque(state.raw_torque(i), params.torque_limit))
            .collect(),
    )
}

/// One explicit Euler step of the oscillator network.
pub fn cpg_step(
    state: &CpgState,
    params: &CpgParams,
    sigma: f64,
    dt: f64,
) -> Result<(CpgState, TorqueCommand)> {
    if !(dt > 0.0 && dt <= MAX_DT) {
        return Err(Error::invalid(format!("cpg dt must be in (0, {MAX_DT}], got {dt}")));
    }
    let n = params.joints();
    if state.phase.len() != n {
        return Err(Error::invalid(format!(
            "cpg state has {} joints, params have {n}",
            state.phase.len()
        )));
    }
    if !state.is_finite() {
        return Err(Error::numeric("cpg_step", "non-finite oscillator state"));
    }
    let sigma = clamp_steering_to(sigma, params.clamp_fraction);
    let omega = TAU * params.frequency;
    let w = params.coupling_weight;
    let bias = params.phase_bias;
    let a = params.amplitude_gain;

    let mut next = state.clone();
    for i in 0..n {
        let th = state.phase[i];
        let mut dphase = omega;
        if i > 0 {
            dphase += w * (state.phase[i - 1] - th + bias).sin();
        }
        if i + 1 < n {
            dphase += w * (state.phase[i + 1] - th - bias).sin();
        }
        next.phase[i] = th + dt * dphase;

        let r_target = params.target_amplitude[i];
        next.amplitude[i] = state.amplitude[i] + dt * state.amplitude_rate[i];
        next.amplitude_rate[i] = state.amplitude_rate[i]
            + dt * a * (0.25 * a * (r_target - state.amplitude[i]) - state.amplitude_rate[i]);

        let x_target = sigma * r_target;
        next.offset[i] = state.offset[i] + dt * state.offset_rate[i];
        next.offset_rate[i] = state.offset_rate[i]
            + dt * a * (0.25 * a * (x_target - state.offset[i]) - state.offset_rate[i]);
    }
    if !next.is_finite() {
        return Err(Error::numeric("cpg_step", "oscillator state diverged"));
    }
    let torques = output_torques(&next, params);
    Ok((next, torques))
}

/// Phase of joint i+1 minus joint i, wrapped into (-π, π].
pub fn phase_differences(state: &CpgState) -> Vec<f64> {
    state
        .phase
        .windows(2)
        .map(|w| crate::geometry::wrap_angle(w[1] - w[0]))
        .collect()
}

/// CSV dump of a torque/phase trace: `t,phase_0..,torque_0..`.
pub fn trace_csv(times: &[f64], states: &[CpgState], torques: &[TorqueCommand]) -> String {
    use std::fmt::Write as _;
    let n = states.first().map_or(0, |s| s.phase.len());
    let mut out = String::from("t");
    for i in 0..n {
        let _ = write!(out, ",phase_{i}");
    }
    for i in 0..n {
        let _ = write!(out, ",torque_{i}");
    }
    out.push('\n');
    for ((t, s), tq) in times.iter().zip(states).zip(torques) {
        let _ = write!(out, "{t}");
        for p in &s.phase {
            let _ = write!(out, ",{p}");
        }
        for v in &tq.0 {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const DT: f64 = 0.0005;

    fn run(state: &mut CpgState, params: &CpgParams, sigma: f64, steps: usize) -> Vec<TorqueCommand> {
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let (s, t) = cpg_step(state, params, sigma, DT).unwrap();
            *state = s;
            out.push(t);
        }
        out
    }

    #[test]
    fn clamp_and_truncate_examples() {
        assert_eq!(clamp_steering(0.0), 0.0);
        assert_eq!(clamp_steering(0.5), 0.3);
        assert_eq!(clamp_steering(-0.31), -0.3);
        assert_eq!(truncate_torque(0.5, 1.0), 0.5);
        assert_eq!(truncate_torque(1.2, 1.0), 1.0);
        assert_eq!(truncate_torque(-2.0, 1.0), -1.0);
    }

    #[test]
    fn zero_amplitude_gives_zero_torque() {
        let params = CpgParams {
            target_amplitude: vec![1e-300; 5],
            ..CpgParams::default()
        };
        let mut state = CpgState::at_rest(&params);
        for t in run(&mut state, &params, 0.0, 2000) {
            assert!(t.0.iter().all(|&x| x.abs() < 1e-290));
        }
    }

    #[test]
    fn amplitude_converges_to_target() {
        let params = CpgParams::uniform(5, 2.0);
        assert_eq!(params.torque_limit, 2.3);
        let mut state = CpgState::at_rest(&params);
        run(&mut state, &params, 0.0, 4000);
        for &r in &state.amplitude {
            assert_abs_diff_eq!(r, 2.0, epsilon = 0.02);
        }
    }

    #[test]
    fn random_phases_lock_to_the_bias() {
        use rand::{Rng, SeedableRng};
        let params = CpgParams::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let mut state = CpgState::with_phases((0..5).map(|_| rng.gen_range(0.0..TAU)).collect());
            run(&mut state, &params, 0.0, 4000);
            for d in phase_differences(&state) {
                assert_abs_diff_eq!(d, params.phase_bias, epsilon = 0.5f64.to_radians());
            }
        }
    }

    #[test]
    fn rejects_bad_dt_and_nan_state() {
        let params = CpgParams::default();
        let state = CpgState::at_rest(&params);
        assert!(matches!(cpg_step(&state, &params, 0.0, 0.0), Err(Error::InvalidArgument(_))));
        assert!(cpg_step(&state, &params, 0.0, 0.03).is_err());
        let mut bad = state.clone();
        bad.phase[2] = f64::NAN;
        assert!(matches!(cpg_step(&bad, &params, 0.0, DT), Err(Error::Numeric { .. })));
    }

    #[test]
    fn steering_neutrality_over_whole_cycles() {
        let params = CpgParams::default();
        let mut state = CpgState::at_rest(&params);
        run(&mut state, &params, 0.0, 4000);
        // 10 cycles of 200 steps each
        let torques = run(&mut state, &params, 0.0, 2000);
        for j in 0..5 {
            let mean: f64 = torques.iter().map(|t| t.0[j]).sum::<f64>() / torques.len() as f64;
            assert!(mean.abs() < 1e-3 * params.target_amplitude[j], "joint {j} mean {mean}");
        }
    }

    #[test]
    fn steering_shifts_offset_and_truncates() {
        let params = CpgParams::default();
        let mut state = CpgState::at_rest(&params);
        let torques = run(&mut state, &params, 5.0, 4000);
        assert_abs_diff_eq!(state.offset[0], 0.3 * params.target_amplitude[0], epsilon = 1e-3);
        let max = torques.iter().flat_map(|t| t.0.iter()).cloned().fold(f64::MIN, f64::max);
        assert_eq!(max, params.torque_limit);
    }

    #[test]
    fn trace_is_deterministic() {
        let params = CpgParams::default();
        let mut a = CpgState::with_phases(vec![0.1, 2.0, -1.0, 0.5, 3.0]);
        let mut b = a.clone();
        let ta = run(&mut a, &params, 0.2, 500);
        let tb = run(&mut b, &params, 0.2, 500);
        assert_eq!(ta, tb);
        assert_eq!(a, b);
        let csv = trace_csv(&[0.0], &[a], &[ta[0].clone()]);
        assert!(csv.starts_with("t,phase_0"));
    }
}
