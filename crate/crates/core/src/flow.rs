//! Surrogate hydrodynamic pressure sensing.
//!
//! Every link of every body acts as a lateral dipole whose strength scales
//! with its normal velocity and displaced volume (width² · length). The
//! pressure at a point is the superposition of all link contributions,
//! decaying as `1 / distance^decay_exponent` and signed by the bearing of the
//! point relative to the link normal.
//!
//! Disturbances travel at a finite `propagation_speed`: the sensors see each
//! link as it was `distance / propagation_speed` seconds earlier, read from a
//! per-rollout kinematics history. This is what makes the onset of the
//! leader's signal arrive later at sensors further away.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cpg::CpgState;
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Point2};
use crate::swimmer::{BodySpec, BodyState};
use crate::{CONTROL_DT, PHYSICS_DT};

/// Number of scalar observation channels in a [`SensorFrame`].
pub const OBSERVATION_DIM: usize = 8;

/// Default sensor port directivity, see [`FlowModelParams::port_directivity`].
pub const PORT_DIRECTIVITY: f64 = 2.0;

/// Number of head-most joint commands fed back to the learner.
pub const MOTOR_CHANNELS: usize = 3;

/// Sensor positions in the head-link frame (x forward from the link centre,
/// y to the left). The right sensor mirrors the left one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorLayout {
    pub forward: f64,
    pub lateral: f64,
}

impl SensorLayout {
    /// Sensors flush with the sides of the head link.
    pub fn for_body(spec: &BodySpec) -> Self {
        SensorLayout {
            forward: 0.3 * spec.link_length(),
            lateral: 0.5 * spec.link_width,
        }
    }

    pub fn left_local(&self) -> Point2 {
        Point2::new(self.forward, self.lateral)
    }

    pub fn right_local(&self) -> Point2 {
        Point2::new(self.forward, -self.lateral)
    }

    /// Outward port normals (left, right) in world coordinates.
    pub fn world_normals(&self, body: &BodyState) -> (Point2, Point2) {
        let left = body.links[0].pose().direction().perp();
        (left, left * -1.0)
    }

    /// World positions of (left, right) sensors on `body`.
    pub fn world_positions(&self, body: &BodyState) -> (Point2, Point2) {
        let head = body.links[0].pose();
        (head.to_world(self.left_local()), head.to_world(self.right_local()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowModelParams {
    /// Pa · mm^decay_exponent per (mm/s · mm³) of normal velocity times displaced volume.
    pub dipole_coefficient: f64,
    pub decay_exponent: f64,
    /// mm/s; `f64::INFINITY` gives an instantaneous kernel.
    pub propagation_speed: f64,
    /// Standard deviation of additive pressure noise, Pa. The default is 2%
    /// of the RMS signal sensed by an expert-driven follower (about 11.5 Pa).
    pub noise_std: f64,
    /// Standard deviation of the constant per-rollout pressure offsets, Pa.
    pub offset_std: f64,
    /// Amplitude of the synthesized pitch and roll oscillations, degrees.
    pub tilt_amplitude_deg: f64,
    /// Standard deviation of the Euler angle noise, degrees.
    pub euler_noise_std_deg: f64,
    /// One-way sensing latency, s.
    pub latency: f64,
    /// Directivity of the sensor ports. A source seen at bearing cosine `c`
    /// from the port's outward normal is weighted by `((1 + c) / 2)^k`, so
    /// the head shields each port from sources on the far side. 0 gives an
    /// omnidirectional port.
    pub port_directivity: f64,
}

impl Default for FlowModelParams {
    fn default() -> Self {
        FlowModelParams {
            dipole_coefficient: 1.0,
            decay_exponent: 3.0,
            propagation_speed: 500.0,
            noise_std: 0.23,
            offset_std: 50.0,
            tilt_amplitude_deg: 2.0,
            euler_noise_std_deg: 0.1,
            latency: 0.0,
            port_directivity: PORT_DIRECTIVITY,
        }
    }
}

impl FlowModelParams {
    /// Noise, offsets and latency disabled.
    pub fn noiseless(&self) -> Self {
        FlowModelParams {
            noise_std: 0.0,
            offset_std: 0.0,
            euler_noise_std_deg: 0.0,
            latency: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0 && self.offset_std >= 0.0 && self.euler_noise_std_deg >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        if !(self.latency >= 0.0 && self.latency.is_finite()) {
            return Err(Error::Config(format!("latency must be non-negative, got {}", self.latency)));
        }
        if !(self.propagation_speed > 0.0) {
            return Err(Error::Config("propagation speed must be positive".into()));
        }
        if !(self.port_directivity >= 0.0 && self.port_directivity.is_finite()) {
            return Err(Error::Config("port directivity must be non-negative".into()));
        }
        if !(self.decay_exponent > 0.0 && self.dipole_coefficient.is_finite()) {
            return Err(Error::Config("invalid dipole kernel parameters".into()));
        }
        Ok(())
    }

    pub fn latency_ticks(&self) -> usize {
        (self.latency / CONTROL_DT).round() as usize
    }
}

/// What the flow kernel needs to know about one source link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkSource {
    pub center: Point2,
    /// Unit normal (counter-clockwise from the link axis).
    pub normal: Point2,
    pub tangent: Point2,
    pub normal_velocity: f64,
    pub half_length: f64,
    pub half_width: f64,
    /// width² · length, mm³.
    pub volume: f64,
}

pub fn link_sources(body: &BodyState, spec: &BodySpec) -> Vec<LinkSource> {
    let half_length = 0.5 * spec.link_length();
    body.links
        .iter()
        .map(|l| {
            let tangent = l.tangent();
            let normal = tangent.perp();
            LinkSource {
                center: l.center,
                normal,
                tangent,
                normal_velocity: l.velocity.dot(normal),
                half_length,
                half_width: 0.5 * spec.link_width,
                volume: spec.link_width * spec.link_width * spec.link_length(),
            }
        })
        .collect()
}

/// Pressure contributed by one link at `point`. Points inside the link's
/// capsule are moved to the nearest point of its surface first.
pub fn link_pressure(point: Point2, src: &LinkSource, params: &FlowModelParams) -> f64 {
    if src.normal_velocity == 0.0 {
        return 0.0;
    }
    let mut q = point;
    let along = (q - src.center).dot(src.tangent).clamp(-src.half_length, src.half_length);
    let axis_point = src.center + src.tangent * along;
    let off = q - axis_point;
    let off_len = off.norm();
    if off_len < src.half_width {
        let dir = if off_len > 0.0 {
            off * (1.0 / off_len)
        } else {
            src.normal
        };
        q = axis_point + dir * src.half_width;
    }
    let r = q - src.center;
    let dist = r.norm();
    let cos_bearing = r.dot(src.normal) / dist;
    params.dipole_coefficient * src.normal_velocity * src.volume * cos_bearing
        / dist.powf(params.decay_exponent)
}

/// Weight of a source at `source` as seen by a port at `point` facing `outward`.
pub fn port_exposure(point: Point2, outward: Point2, source: Point2, directivity: f64) -> f64 {
    if directivity == 0.0 {
        return 1.0;
    }
    let r = source - point;
    let len = r.norm();
    if len == 0.0 {
        return 1.0;
    }
    (0.5 * (1.0 + r.dot(outward) / len)).powf(directivity)
}

/// Instantaneous pressure at `point` from all links of the given bodies.
/// Each body's contributions are summed separately, then the body totals are
/// added in order, so a two-body field equals the sum of the one-body fields.
pub fn pressure_at(point: Point2, bodies: &[(&BodyState, &BodySpec)], params: &FlowModelParams) -> f64 {
    bodies
        .iter()
        .map(|(body, spec)| {
            link_sources(body, spec)
                .iter()
                .map(|src| link_pressure(point, src, params))
                .sum::<f64>()
        })
        .sum()
}

/// Time-stamped link kinematics of every body, one entry per physics step.
#[derive(Debug, Clone)]
pub struct FlowHistory {
    capacity: usize,
    first_index: u64,
    snapshots: VecDeque<Vec<Vec<LinkSource>>>,
}

impl FlowHistory {
    /// Keeps enough history for disturbances to cross `reach` mm.
    pub fn new(params: &FlowModelParams, reach: f64) -> Self {
        let span = if params.propagation_speed.is_finite() {
            reach / params.propagation_speed
        } else {
            0.0
        };
        let capacity = (span / PHYSICS_DT).ceil() as usize + 2;
        FlowHistory {
            capacity,
            first_index: 0,
            snapshots: VecDeque::with_capacity(capacity),
        }
    }

    pub fn record(&mut self, bodies: &[(&BodyState, &BodySpec)]) {
        if self.snapshots.len() == self.capacity {
            self.snapshots.pop_front();
            self.first_index += 1;
        }
        self.snapshots
            .push_back(bodies.iter().map(|(b, s)| link_sources(b, s)).collect());
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// Pressure at `point` with retarded link states. Delays older than the
    /// stored history fall back to the oldest snapshot.
    pub fn pressure_at(&self, point: Point2, params: &FlowModelParams) -> f64 {
        self.pressure_from(point, None, params, None)
    }

    /// Pressure read by a sensor port at `point` facing `outward` (unit).
    pub fn port_pressure(&self, point: Point2, outward: Point2, params: &FlowModelParams) -> f64 {
        self.pressure_from(point, Some(outward), params, None)
    }

    /// Same as [`FlowHistory::pressure_at`] restricted to one body.
    pub fn body_pressure_at(&self, point: Point2, params: &FlowModelParams, body: usize) -> f64 {
        self.pressure_from(point, None, params, Some(body))
    }

    fn pressure_from(&self, point: Point2, port: Option<Point2>, params: &FlowModelParams, only: Option<usize>) -> f64 {
        let Some(latest) = self.snapshots.back() else {
            return 0.0;
        };
        let newest = self.snapshots.len() - 1;
        let mut total = 0.0;
        for (b, links) in latest.iter().enumerate() {
            if only.is_some_and(|o| o != b) {
                continue;
            }
            let mut body_total = 0.0;
            for (k, now) in links.iter().enumerate() {
                let delay = point.distance(now.center) / params.propagation_speed;
                let back = ((delay / PHYSICS_DT).round() as usize).min(newest);
                let src = &self.snapshots[newest - back][b][k];
                let mut p = link_pressure(point, src, params);
                if let Some(n) = port {
                    p *= port_exposure(point, n, src.center, params.port_directivity);
                }
                body_total += p;
            }
            total += body_total;
        }
        total
    }
}

/// One 50 Hz observation of the follower.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorFrame {
    pub t: f64,
    pub p_left: f64,
    pub p_right: f64,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub motor: [f64; MOTOR_CHANNELS],
}

impl SensorFrame {
    pub fn to_vector(&self) -> [f64; OBSERVATION_DIM] {
        [
            self.p_left,
            self.p_right,
            self.yaw,
            self.pitch,
            self.roll,
            self.motor[0],
            self.motor[1],
            self.motor[2],
        ]
    }

    pub fn from_vector(t: f64, v: &[f64; OBSERVATION_DIM]) -> Self {
        SensorFrame {
            t,
            p_left: v[0],
            p_right: v[1],
            yaw: v[2],
            pitch: v[3],
            roll: v[4],
            motor: [v[5], v[6], v[7]],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|x| x.is_finite())
    }
}

/// Values subtracted from raw frames after calibration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SensorBias {
    pub p_left: f64,
    pub p_right: f64,
    pub yaw: f64,
}

impl SensorBias {
    pub fn apply(&self, raw: &SensorFrame) -> SensorFrame {
        SensorFrame {
            p_left: raw.p_left - self.p_left,
            p_right: raw.p_right - self.p_right,
            yaw: wrap_angle(raw.yaw - self.yaw),
            ..*raw
        }
    }
}

/// A raw frame together with the follower's speed when it was taken.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawSample {
    pub frame: SensorFrame,
    pub speed: f64,
}

/// Minimum at-rest window accepted by [`calibrate_bias`], s.
pub const MIN_CALIBRATION_WINDOW: f64 = 0.5;

/// Follower speed above which a calibration window is considered moving, mm/s.
pub const REST_SPEED_THRESHOLD: f64 = 1.0;

/// Mean pressure per channel and the initial yaw over an at-rest window.
pub fn calibrate_bias(window: &[RawSample]) -> Result<SensorBias> {
    if window.is_empty() {
        return Err(Error::Calibration("calibration window is empty".into()));
    }
    let duration = window.len() as f64 * CONTROL_DT;
    if duration + 1e-9 < MIN_CALIBRATION_WINDOW {
        return Err(Error::Calibration(format!(
            "calibration window of {duration:.3} s is shorter than {MIN_CALIBRATION_WINDOW} s"
        )));
    }
    if let Some(moving) = window.iter().find(|s| s.speed > REST_SPEED_THRESHOLD) {
        return Err(Error::Calibration(format!(
            "follower moving at {:.2} mm/s during calibration (t = {:.3} s)",
            moving.speed, moving.frame.t
        )));
    }
    let n = window.len() as f64;
    Ok(SensorBias {
        p_left: window.iter().map(|s| s.frame.p_left).sum::<f64>() / n,
        p_right: window.iter().map(|s| s.frame.p_right).sum::<f64>() / n,
        yaw: window[0].frame.yaw,
    })
}

/// Per-rollout sensor front end: kinematics history, noise, offsets and the
/// latency buffer.
#[derive(Debug, Clone)]
pub struct SensorModel {
    layout: SensorLayout,
    params: FlowModelParams,
    history: FlowHistory,
    rng: ChaCha8Rng,
    offsets: (f64, f64),
    delay: VecDeque<SensorFrame>,
}

impl SensorModel {
    pub fn new(layout: SensorLayout, params: FlowModelParams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let offsets = if params.offset_std > 0.0 {
            let d = Normal::new(0.0, params.offset_std).expect("finite offset std");
            (d.sample(&mut rng), d.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        let history = FlowHistory::new(&params, 600.0);
        SensorModel {
            layout,
            params,
            history,
            rng,
            offsets,
            delay: VecDeque::new(),
        }
    }

    pub fn params(&self) -> &FlowModelParams {
        &self.params
    }

    pub fn layout(&self) -> &SensorLayout {
        &self.layout
    }

    pub fn history(&self) -> &FlowHistory {
        &self.history
    }

    /// Records the bodies' kinematics after a physics step.
    pub fn record(&mut self, bodies: &[(&BodyState, &BodySpec)]) {
        self.history.record(bodies);
    }

    /// Noise-free pressures at the (left, right) sensors of `follower`.
    pub fn clean_pressures(&self, follower: &BodyState) -> (f64, f64) {
        let (l, r) = self.layout.world_positions(follower);
        let (nl, nr) = self.layout.world_normals(follower);
        (
            self.history.port_pressure(l, nl, &self.params),
            self.history.port_pressure(r, nr, &self.params),
        )
    }

    /// Takes a raw (uncalibrated) frame and pushes it through the latency
    /// buffer. `cpg` is the follower's oscillator state, `None` while it is
    /// switched off.
    pub fn sample(
        &mut self,
        follower: &BodyState,
        cpg: Option<&CpgState>,
        target_amplitude: f64,
        motor: [f64; MOTOR_CHANNELS],
        t: f64,
    ) -> SensorFrame {
        let (pl, pr) = self.clean_pressures(follower);
        let (nl, nr) = if self.params.noise_std > 0.0 {
            let d = Normal::new(0.0, self.params.noise_std).expect("finite noise std");
            (d.sample(&mut self.rng), d.sample(&mut self.rng))
        } else {
            (0.0, 0.0)
        };
        let (tilt_pitch, tilt_roll) = match cpg {
            Some(c) if target_amplitude > 0.0 => {
                let amp = self.params.tilt_amplitude_deg.to_radians() * c.amplitude[0] / target_amplitude;
                (amp * c.phase[0].sin(), amp * c.phase[0].cos())
            }
            _ => (0.0, 0.0),
        };
        let (ep, er) = if self.params.euler_noise_std_deg > 0.0 {
            let d = Normal::new(0.0, self.params.euler_noise_std_deg.to_radians()).expect("finite noise std");
            (d.sample(&mut self.rng), d.sample(&mut self.rng))
        } else {
            (0.0, 0.0)
        };
        let frame = SensorFrame {
            t,
            p_left: pl + self.offsets.0 + nl,
            p_right: pr + self.offsets.1 + nr,
            yaw: wrap_angle(follower.head_heading()),
            pitch: tilt_pitch + ep,
            roll: tilt_roll + er,
            motor,
        };
        self.delay.push_back(frame);
        let lag = self.params.latency_ticks();
        while self.delay.len() > lag + 1 {
            self.delay.pop_front();
        }
        self.delay[0]
    }
}

/// Root-mean-square of a signal.
pub fn rms(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

/// Pressure trace CSV: `t,p_left,p_right,yaw,pitch,roll,motor_0,motor_1,motor_2`.
pub fn pressure_trace_csv(frames: &[SensorFrame]) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("t,p_left,p_right,yaw,pitch,roll,motor_0,motor_1,motor_2\n");
    for f in frames {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            f.t, f.p_left, f.p_right, f.yaw, f.pitch, f.roll, f.motor[0], f.motor[1], f.motor[2]
        );
    }
    out
}
