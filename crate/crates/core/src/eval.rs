//! Reward, the reward-square distance, per-rollout metrics, quartile
//! summaries, and the fixed-follower pressure study.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cpg::{cpg_step, CpgParams, CpgState};
use crate::error::{Error, Result};
use crate::flow::{rms, FlowModelParams, SensorFrame, SensorLayout, SensorModel, MOTOR_CHANNELS};
use crate::geometry::{Point2, Pose2};
use crate::imitation::{Rollout, Termination};
use crate::swimmer::{body_step, detect_contact, BodySpec, BodyState};
use crate::{CONTROL_DT, PHYSICS_DT, SUBSTEPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Shape parameter; the exponent is `2 / (1 − s) − 1`.
    pub shape: f64,
    pub inner_threshold: f64,
    pub outer_threshold: f64,
    /// Half the side of the square centred on the leader's tail link.
    pub square_half_side: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            shape: 0.7,
            inner_threshold: 70.0,
            outer_threshold: 140.0,
            square_half_side: 60.0,
        }
    }
}

impl RewardConfig {
    pub fn exponent(&self) -> f64 {
        2.0 / (1.0 - self.shape) - 1.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.shape < 1.0 && self.exponent() > 0.0) {
            return Err(Error::Config(format!("reward shape {} gives no positive exponent", self.shape)));
        }
        if !(self.inner_threshold > 0.0 && self.inner_threshold < self.outer_threshold) {
            return Err(Error::Config("reward thresholds must satisfy 0 < inner < outer".into()));
        }
        if !(self.square_half_side > 0.0) {
            return Err(Error::Config("reward square half-side must be positive".into()));
        }
        Ok(())
    }
}

/// Unsigned distance from `nose` to the outline of the square centred on
/// `tail` and aligned with its heading. Zero on the outline, positive both
/// inside and outside.
pub fn d_r(nose: Point2, tail: &Pose2, cfg: &RewardConfig) -> f64 {
    let q = tail.to_local(nose);
    let a = cfg.square_half_side;
    let (ax, ay) = (q.x.abs(), q.y.abs());
    if ax <= a && ay <= a {
        (a - ax).min(a - ay)
    } else {
        let dx = (ax - a).max(0.0);
        let dy = (ay - a).max(0.0);
        dx.hypot(dy)
    }
}

/// Per-step reward: `1 − f(d/outer)` up to the inner threshold,
/// `f(1 − d/outer)` up to the outer one, zero beyond, with
/// `f(x) = (2x)^c / 2`.
pub fn reward(d_r: f64, cfg: &RewardConfig) -> Result<f64> {
    if !(d_r >= 0.0) {
        return Err(Error::invalid(format!("d_r must be non-negative, got {d_r}")));
    }
    let c = cfg.exponent();
    let f = |x: f64| (2.0 * x).powf(c) / 2.0;
    let x = d_r / cfg.outer_threshold;
    Ok(if d_r <= cfg.inner_threshold {
        1.0 - f(x)
    } else if d_r <= cfg.outer_threshold {
        f(1.0 - x)
    } else {
        0.0
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae_vs_expert: f64,
    pub cumulative_reward: f64,
    pub termination: Termination,
    pub frames: usize,
}

pub fn rollout_metrics(rollout: &Rollout, cfg: &RewardConfig) -> Result<Metrics> {
    if rollout.frames.is_empty() {
        return Err(Error::invalid("rollout has no frames"));
    }
    let n = rollout.frames.len() as f64;
    let mae = rollout
        .frames
        .iter()
        .map(|f| (f.sigma_applied - f.sigma_expert).abs())
        .sum::<f64>()
        / n;
    let mut cumulative = 0.0;
    for f in &rollout.frames {
        cumulative += reward(f.d_r, cfg)?;
    }
    Ok(Metrics {
        mae_vs_expert: mae,
        cumulative_reward: cumulative,
        termination: rollout.termination,
        frames: rollout.frames.len(),
    })
}

/// Linear-interpolation quantile of already sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Option<Quartiles> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Quartiles {
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
        })
    }
}

/// Quartiles of both metrics over one subset of a policy's rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: String,
    /// `all`, or one termination cause.
    pub subset: String,
    pub count: usize,
    pub mae: Option<Quartiles>,
    pub reward: Option<Quartiles>,
}

/// One row for all rollouts of the policy, then one per termination cause.
pub fn summarize(policy: &str, metrics: &[Metrics]) -> Result<Vec<SummaryRow>> {
    if metrics.is_empty() {
        return Err(Error::invalid(format!("no rollouts to summarize for policy {policy}")));
    }
    let row = |subset: &str, pick: &dyn Fn(&Metrics) -> bool| {
        let chosen: Vec<&Metrics> = metrics.iter().filter(|m| pick(m)).collect();
        SummaryRow {
            policy: policy.to_string(),
            subset: subset.to_string(),
            count: chosen.len(),
            mae: Quartiles::of(&chosen.iter().map(|m| m.mae_vs_expert).collect::<Vec<_>>()),
            reward: Quartiles::of(&chosen.iter().map(|m| m.cumulative_reward).collect::<Vec<_>>()),
        }
    };
    let mut rows = vec![row("all", &|_| true)];
    for t in Termination::ALL {
        rows.push(row(t.as_str(), &|m| m.termination == t));
    }
    Ok(rows)
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(
        "policy,subset,count,mae_q1,mae_median,mae_q3,reward_q1,reward_median,reward_q3\n",
    );
    let q = |x: Option<Quartiles>| match x {
        Some(q) => format!("{},{},{}", q.q1, q.median, q.q3),
        None => ",,".to_string(),
    };
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.policy, r.subset, r.count, q(r.mae), q(r.reward));
    }
    out
}

/// Per-rollout metrics CSV row set.
pub fn metrics_csv(rows: &[(usize, String, &Rollout, Metrics)]) -> String {
    let mut out = String::from("rollout_id,policy,side,termination,mae,cumulative_reward\n");
    for (id, policy, rollout, m) in rows {
        let _ = writeln!(
            out,
            "{id},{policy},{},{},{},{}",
            rollout.side.as_str(),
            m.termination.as_str(),
            m.mae_vs_expert,
            m.cumulative_reward
        );
    }
    out
}

/// Geometry and timing of the fixed-follower study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixedFollowerConfig {
    /// Centre-line separations, mm.
    pub lateral: Vec<f64>,
    /// Distance along the heading from the follower's nose to the leader's
    /// tail tip, mm.
    pub longitudinal: Vec<f64>,
    pub duration: f64,
    /// Onset is the first frame whose pressure magnitude exceeds this
    /// fraction of the cell's peak. With noise off the leader's signal is
    /// exactly zero until its first disturbance arrives, so a tiny fraction
    /// measures the arrival time.
    pub onset_fraction: f64,
}

impl Default for FixedFollowerConfig {
    fn default() -> Self {
        FixedFollowerConfig {
            lateral: vec![0.0, 50.0, 60.0, 100.0],
            longitudinal: vec![0.0, 25.0, 50.0, 100.0, 150.0, 200.0],
            duration: 2.0,
            onset_fraction: 1e-6,
        }
    }
}

impl FixedFollowerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lateral.is_empty() || self.longitudinal.is_empty() {
            return Err(Error::Config("fixed-follower grid must not be empty".into()));
        }
        if !(self.duration > 0.0) || !(self.onset_fraction >= 0.0 && self.onset_fraction < 1.0) {
            return Err(Error::Config("invalid fixed-follower duration or onset fraction".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedFollowerCell {
    pub lateral: f64,
    pub longitudinal: f64,
    pub rms: f64,
    pub peak: f64,
    /// Time from the leader's start until the signal first reaches the onset
    /// fraction of its peak; `None` when the signal never rises.
    pub onset_delay: Option<f64>,
    pub frames: Vec<SensorFrame>,
}

/// Places the leader relative to a follower whose nose is at the origin,
/// heading +x, with the leader displaced to the follower's left.
pub fn fixed_follower_bodies(lateral: f64, longitudinal: f64, spec: &BodySpec) -> Result<(BodyState, BodyState)> {
    let follower = BodyState::straight_from_nose(Point2::ORIGIN, 0.0, spec);
    let leader_nose = Point2::new(longitudinal + crate::swimmer::BODY_LENGTH, lateral);
    let leader = BodyState::straight_from_nose(leader_nose, 0.0, spec);
    let contact = detect_contact(&leader, &follower, spec);
    if contact.contact {
        return Err(Error::invalid(format!(
            "leader at lateral {lateral} mm, longitudinal {longitudinal} mm overlaps the follower"
        )));
    }
    Ok((leader, follower))
}

/// One grid cell: the follower is held fixed while the leader swims straight
/// from rest. Returns the follower's clean sensor trace.
pub fn fixed_follower_cell(
    lateral: f64,
    longitudinal: f64,
    cfg: &FixedFollowerConfig,
    spec: &BodySpec,
    cpg: &CpgParams,
    flow: &FlowModelParams,
    seed: u64,
) -> Result<FixedFollowerCell> {
    let (mut leader, follower) = fixed_follower_bodies(lateral, longitudinal, spec)?;
    let mut sensors = SensorModel::new(SensorLayout::for_body(spec), flow.clone(), seed);
    let mut osc = CpgState::at_rest(cpg);
    sensors.record(&[(&leader, spec), (&follower, spec)]);
    let ticks = (cfg.duration / CONTROL_DT).round() as usize;
    let mut frames = Vec::with_capacity(ticks);
    for k in 1..=ticks {
        for _ in 0..SUBSTEPS {
            let (next, torques) = cpg_step(&osc, cpg, 0.0, PHYSICS_DT)?;
            osc = next;
            leader = body_step(&leader, spec, torques.as_slice(), PHYSICS_DT)?;
            sensors.record(&[(&leader, spec), (&follower, spec)]);
        }
        frames.push(sensors.sample(&follower, None, 0.0, [0.0; MOTOR_CHANNELS], k as f64 * CONTROL_DT));
    }
    let magnitude: Vec<f64> = frames.iter().map(|f| f.p_left.abs().max(f.p_right.abs())).collect();
    let peak = magnitude.iter().copied().fold(0.0, f64::max);
    let onset_delay = (peak > 0.0)
        .then(|| magnitude.iter().position(|&m| m > cfg.onset_fraction * peak))
        .flatten()
        .map(|i| frames[i].t);
    let both: Vec<f64> = frames.iter().flat_map(|f| [f.p_left, f.p_right]).collect();
    Ok(FixedFollowerCell {
        lateral,
        longitudinal,
        rms: rms(&both),
        peak,
        onset_delay,
        frames,
    })
}

/// Runs every grid cell with a valid (non-overlapping) placement. Cells
/// whose placement overlaps are skipped and listed separately.
pub fn fixed_follower_experiment(
    cfg: &FixedFollowerConfig,
    spec: &BodySpec,
    cpg: &CpgParams,
    flow: &FlowModelParams,
    seed: u64,
) -> Result<(Vec<FixedFollowerCell>, Vec<(f64, f64)>)> {
    cfg.validate()?;
    let mut cells = Vec::new();
    let mut skipped = Vec::new();
    for &lat in &cfg.lateral {
        for &lon in &cfg.longitudinal {
            match fixed_follower_cell(lat, lon, cfg, spec, cpg, flow, seed) {
                Ok(c) => cells.push(c),
                Err(Error::InvalidArgument(_)) => skipped.push((lat, lon)),
                Err(e) => return Err(e),
            }
        }
    }
    Ok((cells, skipped))
}

pub fn fixed_follower_csv(cells: &[FixedFollowerCell]) -> String {
    let mut out = String::from("lateral_mm,longitudinal_mm,rms_pa,peak_pa,onset_delay_s\n");
    for c in cells {
        let onset = c.onset_delay.map(|d| d.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{}", c.lateral, c.longitudinal, c.rms, c.peak, onset);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn exponent_is_seventeen_thirds() {
        assert_abs_diff_eq!(RewardConfig::default().exponent(), 17.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn reward_examples() {
        let cfg = RewardConfig::default();
        assert_eq!(reward(0.0, &cfg).unwrap(), 1.0);
        assert_eq!(reward(140.0, &cfg).unwrap(), 0.0);
        assert_eq!(reward(200.0, &cfg).unwrap(), 0.0);
        assert_abs_diff_eq!(reward(70.0, &cfg).unwrap(), 0.5, epsilon = 1e-12);
        // 1 − 2^(−17/3)/2 and 2^(−17/3)/2
        assert_abs_diff_eq!(reward(35.0, &cfg).unwrap(), 0.990156867, epsilon = 1e-9);
        assert_abs_diff_eq!(reward(105.0, &cfg).unwrap(), 0.009843133, epsilon = 1e-9);
        assert!(matches!(reward(-1.0, &cfg), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn reward_is_continuous_and_decreasing() {
        let cfg = RewardConfig::default();
        for edge in [70.0, 140.0] {
            let gap = reward(edge - 1e-7, &cfg).unwrap() - reward(edge + 1e-7, &cfg).unwrap();
            assert!(gap.abs() < 1e-6);
        }
        let mut prev = reward(0.0, &cfg).unwrap();
        for i in 1..=1400 {
            let r = reward(i as f64 * 0.1, &cfg).unwrap();
            // near zero the drop is below one ulp of 1.0
            assert!(r < prev || (i < 10 && r == prev), "not decreasing at {}", i as f64 * 0.1);
            prev = r;
        }
    }

    #[test]
    fn d_r_examples() {
        let cfg = RewardConfig::default();
        let tail = Pose2::new(Point2::ORIGIN, 0.0);
        assert_eq!(d_r(Point2::new(60.0, 10.0), &tail, &cfg), 0.0);
        assert_eq!(d_r(Point2::ORIGIN, &tail, &cfg), 60.0);
        assert_abs_diff_eq!(d_r(Point2::new(0.0, 160.0), &tail, &cfg), 100.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d_r(Point2::new(63.0, 64.0), &tail, &cfg), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn d_r_is_rigid_invariant() {
        let cfg = RewardConfig::default();
        let tail = Pose2::new(Point2::new(3.0, -2.0), 0.4);
        let nose = Point2::new(70.0, 85.0);
        let base = d_r(nose, &tail, &cfg);
        let (rot, by) = (1.1f64, Point2::new(-40.0, 250.0));
        let move_pt = |p: Point2| Point2::new(p.x * rot.cos() - p.y * rot.sin(), p.x * rot.sin() + p.y * rot.cos()) + by;
        let moved_tail = Pose2::new(move_pt(tail.position), tail.heading() + rot);
        assert_abs_diff_eq!(d_r(move_pt(nose), &moved_tail, &cfg), base, epsilon = 1e-9);
    }

    #[test]
    fn quartile_examples() {
        let q = Quartiles::of(&[5.0, 1.0, 3.0, 2.0, 4.0]).unwrap();
        assert_eq!((q.q1, q.median, q.q3), (2.0, 3.0, 4.0));
        let one = Quartiles::of(&[7.5]).unwrap();
        assert_eq!((one.q1, one.median, one.q3), (7.5, 7.5, 7.5));
        assert!(Quartiles::of(&[]).is_none());
    }

    #[test]
    fn overlapping_placement_is_rejected() {
        let spec = BodySpec::default();
        assert!(matches!(fixed_follower_bodies(0.0, 0.0, &spec), Err(Error::InvalidArgument(_))));
        assert!(fixed_follower_bodies(0.0, 25.0, &spec).is_ok());
        assert!(fixed_follower_bodies(60.0, 0.0, &spec).is_ok());
    }

    #[test]
    fn farther_leader_is_quieter_and_later() {
        let spec = BodySpec::default();
        let cpg = CpgParams::default();
        let flow = FlowModelParams::default().noiseless();
        let cfg = FixedFollowerConfig {
            duration: 1.0,
            ..FixedFollowerConfig::default()
        };
        let cell = |lat, lon| fixed_follower_cell(lat, lon, &cfg, &spec, &cpg, &flow, 0).unwrap();
        let near = cell(60.0, 50.0);
        let far = cell(60.0, 200.0);
        assert_eq!(near.frames.len(), 50);
        assert!(near.rms > far.rms, "near {} far {}", near.rms, far.rms);
        assert!(near.onset_delay.unwrap() <= far.onset_delay.unwrap());
        // rerunning a cell is bit-identical
        assert_eq!(cell(60.0, 50.0).rms.to_bits(), near.rms.to_bits());
    }
}
