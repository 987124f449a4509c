//! Expert policy, the rollout protocol, behaviour cloning and DAgger.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cpg::{clamp_steering, clamp_steering_to, cpg_step, CpgParams, CpgState, TorqueCommand};
use crate::error::{Error, Result};
use crate::eval::{d_r, reward, RewardConfig};
use crate::flow::{
    calibrate_bias, FlowModelParams, RawSample, SensorBias, SensorFrame, SensorLayout, SensorModel, MOTOR_CHANNELS,
    OBSERVATION_DIM,
};
use crate::geometry::{
    generate_random_path, heading_error, los_reference, offset_path, GuidanceConfig, PathSpline, Point2, Pose2, Side,
    TankSpec,
};
use crate::policy::{LstmPolicy, TrainingRollout};
use crate::seeds;
use crate::swimmer::{body_step, detect_contact, nose_position, tail_pose, wall_interaction, BodySpec, BodyState};
use crate::{CONTROL_DT, PHYSICS_DT, SUBSTEPS};

/// Timing and geometry of one rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    /// Centre-line distance between the two fish at the start, mm.
    pub lateral_separation: f64,
    /// Offset of the expert's path from the leader's, mm.
    pub expert_offset: f64,
    /// Ticks the leader swims before the follower's oscillators start.
    pub head_start_ticks: usize,
    pub max_ticks: usize,
    /// Nose-to-tail distance beyond which the follower has lost the leader, mm.
    pub separation_limit: f64,
    /// At-rest ticks used to remove sensor biases before anything moves.
    pub calibration_ticks: usize,
    /// Where the leader's nose starts; it faces +x.
    pub leader_start: Point2,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            lateral_separation: 60.0,
            expert_offset: 60.0,
            head_start_ticks: 20,
            max_ticks: 500,
            separation_limit: 200.0,
            calibration_ticks: 25,
            leader_start: Point2::new(400.0, 290.0),
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_ticks == 0 || !(self.separation_limit > 0.0) || !(self.lateral_separation >= 0.0) {
            return Err(Error::Config("invalid rollout protocol".into()));
        }
        if !(self.expert_offset >= 0.0) {
            return Err(Error::Config("expert offset must be non-negative".into()));
        }
        Ok(())
    }
}

/// Everything about the simulated world that a rollout needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub tank: TankSpec,
    pub body: BodySpec,
    pub cpg: CpgParams,
    pub flow: FlowModelParams,
    pub guidance: GuidanceConfig,
    pub protocol: ProtocolConfig,
    pub reward: RewardConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        let body = BodySpec::default();
        SimConfig {
            tank: TankSpec::default(),
            cpg: CpgParams::uniform(body.joints(), crate::swimmer::DEFAULT_TORQUE_AMPLITUDE),
            body,
            flow: FlowModelParams::default(),
            guidance: GuidanceConfig::default(),
            protocol: ProtocolConfig::default(),
            reward: RewardConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.tank.validate()?;
        self.body.validate()?;
        self.cpg.validate()?;
        self.flow.validate()?;
        self.guidance.validate()?;
        self.protocol.validate()?;
        self.reward.validate()?;
        if self.cpg.joints() != self.body.joints() {
            return Err(Error::Config(format!(
                "cpg drives {} joints but the body has {}",
                self.cpg.joints(),
                self.body.joints()
            )));
        }
        if self.body.joints() < MOTOR_CHANNELS {
            return Err(Error::Config(format!("the body needs at least {MOTOR_CHANNELS} joints")));
        }
        Ok(())
    }
}

/// Heading of the body as a whole: from the mean link position to the nose.
/// Unlike the head link's heading it does not swing with every tail beat.
pub fn body_heading(state: &BodyState, spec: &BodySpec) -> f64 {
    (nose_position(state, spec) - state.centroid()).angle()
}

/// Proportional LOS steering toward `path`.
pub fn expert_action(nose: Point2, heading: f64, path: &PathSpline, cfg: &GuidanceConfig) -> f64 {
    let err = heading_error(los_reference(path, nose, cfg), heading);
    clamp_steering_to(clamp_steering(cfg.gain * err), cfg.clamp_fraction)
}

/// The leader's path offset toward the side the follower starts on.
pub fn make_expert_path(leader_path: &PathSpline, follower_start: Point2, offset: f64) -> Result<PathSpline> {
    let proj = leader_path.project(follower_start);
    let dir = leader_path.segment_direction(proj.segment);
    let side = dir.cross(follower_start - proj.point);
    if proj.distance < 1e-9 || side == 0.0 {
        return Err(Error::invalid("follower starts on the leader's path; the offset side is undefined"));
    }
    let side = if side > 0.0 { Side::Left } else { Side::Right };
    offset_path(leader_path, offset, side)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Termination {
    Completed,
    Contact,
    Separated,
}

impl Termination {
    pub const ALL: [Termination; 3] = [Termination::Completed, Termination::Contact, Termination::Separated];

    pub fn as_str(self) -> &'static str {
        match self {
            Termination::Completed => "completed",
            Termination::Contact => "contact",
            Termination::Separated => "separated",
        }
    }
}

/// Which collection stage produced a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "stage", content = "iteration")]
pub enum Source {
    Bc,
    Dagger(usize),
    Eval,
}

impl Source {
    /// Provenance index: 0 for BC, k for the k-th DAgger iteration.
    pub fn group(self) -> usize {
        match self {
            Source::Bc | Source::Eval => 0,
            Source::Dagger(k) => k,
        }
    }
}

/// One 50 Hz record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub t: f64,
    /// Calibrated observation, as the learner sees it.
    pub sensor: SensorFrame,
    pub sigma_expert: f64,
    pub sigma_applied: f64,
    pub leader_nose: Point2,
    pub leader_heading: f64,
    pub leader_tail: Pose2,
    pub follower_nose: Point2,
    pub follower_heading: f64,
    pub d: f64,
    pub d_r: f64,
    pub contact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub id: usize,
    pub seed: u64,
    /// Side of the follower on which the leader swims.
    pub side: Side,
    pub source: Source,
    pub termination: Termination,
    pub frames: Vec<Frame>,
}

impl Rollout {
    pub fn to_training(&self) -> TrainingRollout {
        TrainingRollout {
            inputs: self.frames.iter().map(|f| f.sensor.to_vector()).collect(),
            labels: self.frames.iter().map(|f| f.sigma_expert).collect(),
            group: self.source.group(),
        }
    }

    pub fn to_csv(&self, reward_cfg: &RewardConfig) -> Result<String> {
        let mut out = String::from(
            "t,p_left,p_right,yaw,pitch,roll,motor_0,motor_1,motor_2,sigma_expert,sigma_applied,d_mm,d_r_mm,reward,\
             leader_x,leader_y,leader_heading,leader_tail_x,leader_tail_y,leader_tail_heading,\
             follower_x,follower_y,follower_heading\n",
        );
        for f in &self.frames {
            let s = &f.sensor;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                f.t,
                s.p_left,
                s.p_right,
                s.yaw,
                s.pitch,
                s.roll,
                s.motor[0],
                s.motor[1],
                s.motor[2],
                f.sigma_expert,
                f.sigma_applied,
                f.d,
                f.d_r,
                reward(f.d_r, reward_cfg)?,
                f.leader_nose.x,
                f.leader_nose.y,
                f.leader_heading,
                f.leader_tail.position.x,
                f.leader_tail.position.y,
                f.leader_tail.heading(),
                f.follower_nose.x,
                f.follower_nose.y,
                f.follower_heading
            );
        }
        Ok(out)
    }
}

/// Who steers the follower.
#[derive(Debug, Clone)]
pub enum FollowerPolicy {
    Expert,
    NoSteering,
    Constant(f64),
    Learner(Box<LstmPolicy>),
}

impl FollowerPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            FollowerPolicy::Expert => "expert",
            FollowerPolicy::NoSteering => "none",
            FollowerPolicy::Constant(_) => "constant",
            FollowerPolicy::Learner(_) => "learner",
        }
    }

    fn reset(&mut self) {
        if let FollowerPolicy::Learner(p) = self {
            p.reset();
        }
    }

    fn act(&mut self, obs: &[f64; OBSERVATION_DIM], sigma_expert: f64) -> Result<f64> {
        Ok(match self {
            FollowerPolicy::Expert => sigma_expert,
            FollowerPolicy::NoSteering => 0.0,
            FollowerPolicy::Constant(s) => *s,
            FollowerPolicy::Learner(p) => p.act(obs)?,
        })
    }
}

/// One swimmer: oscillators plus body.
#[derive(Debug, Clone)]
struct Fish {
    body: BodyState,
    osc: CpgState,
    torques: TorqueCommand,
}

impl Fish {
    fn new(body: BodyState, cpg: &CpgParams) -> Self {
        Fish {
            body,
            osc: CpgState::at_rest(cpg),
            torques: TorqueCommand::zeros(cpg.joints()),
        }
    }

    fn substep(&mut self, sim: &SimConfig, sigma: f64) -> Result<()> {
        let (osc, torques) = cpg_step(&self.osc, &sim.cpg, sigma, PHYSICS_DT)?;
        self.osc = osc;
        self.torques = torques;
        let next = body_step(&self.body, &sim.body, self.torques.as_slice(), PHYSICS_DT)?;
        self.body = wall_interaction(&next, &sim.body, &sim.tank);
        Ok(())
    }

    fn motor(&self) -> [f64; MOTOR_CHANNELS] {
        let mut m = [0.0; MOTOR_CHANNELS];
        m.copy_from_slice(&self.torques.0[..MOTOR_CHANNELS]);
        m
    }
}

/// Identity of one rollout within an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RolloutSpec {
    pub id: usize,
    /// Seed from which the leader's path and the sensor noise derive.
    pub seed: u64,
    pub side: Side,
    pub source: Source,
}

/// Start poses: leader nose at the protocol start facing +x; follower
/// parallel, its nose abeam the joint between the leader's last two links,
/// displaced so that the leader lies on `side` of it.
pub fn start_bodies(sim: &SimConfig, side: Side) -> (BodyState, BodyState) {
    let spec = &sim.body;
    let p = &sim.protocol;
    let leader = BodyState::straight_from_nose(p.leader_start, 0.0, spec);
    let back = (spec.n_links - 1) as f64 * spec.link_length();
    let follower_nose = Point2::new(
        p.leader_start.x - back,
        p.leader_start.y - side.sign() * p.lateral_separation,
    );
    let follower = BodyState::straight_from_nose(follower_nose, 0.0, spec);
    (leader, follower)
}

/// The leader's random path and the expert's offset path for a rollout. A
/// path too tight to offset is redrawn from the next sub-seed.
pub fn rollout_paths(sim: &SimConfig, spec: &RolloutSpec) -> Result<(PathSpline, PathSpline)> {
    let (_, follower) = start_bodies(sim, spec.side);
    let start = nose_position(&follower, &sim.body);
    let mut last = None;
    for attempt in 0..16 {
        let seed = seeds::derive(spec.seed, seeds::PATHS, attempt);
        let leader_path = generate_random_path(seed, &sim.tank, sim.protocol.leader_start)?;
        match make_expert_path(&leader_path, start, sim.protocol.expert_offset) {
            Ok(expert) => return Ok((leader_path, expert)),
            Err(e @ Error::DegenerateOffset { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::invalid("no usable path")))
}

/// Runs one rollout: calibration at rest, the leader's head start, then the
/// closed loop until timeout, contact or separation.
pub fn run_rollout(sim: &SimConfig, spec: &RolloutSpec, policy: &mut FollowerPolicy) -> Result<Rollout> {
    let (leader_path, expert_path) = rollout_paths(sim, spec)?;
    let (leader_body, follower_body) = start_bodies(sim, spec.side);
    let body = &sim.body;
    let proto = &sim.protocol;
    let mut leader = Fish::new(leader_body, &sim.cpg);
    let mut follower = Fish::new(follower_body, &sim.cpg);
    let mut sensors = SensorModel::new(
        SensorLayout::for_body(body),
        sim.flow.clone(),
        seeds::derive(spec.seed, seeds::NOISE, 0),
    );
    let target_amp = sim.cpg.target_amplitude[0];
    policy.reset();

    // Both fish at rest: estimate the pressure and yaw biases.
    sensors.record(&[(&leader.body, body), (&follower.body, body)]);
    let mut window = Vec::with_capacity(proto.calibration_ticks);
    for k in 0..proto.calibration_ticks {
        let t = (k as f64 - proto.calibration_ticks as f64) * CONTROL_DT;
        let frame = sensors.sample(&follower.body, None, target_amp, [0.0; MOTOR_CHANNELS], t);
        window.push(RawSample {
            frame,
            speed: follower.body.mean_velocity().norm(),
        });
    }
    let bias: SensorBias = calibrate_bias(&window)?;

    let mut frames = Vec::with_capacity(proto.max_ticks);
    let mut termination = Termination::Completed;
    for k in 0..proto.max_ticks {
        let t = k as f64 * CONTROL_DT;
        let active = k >= proto.head_start_ticks;
        let raw = sensors.sample(
            &follower.body,
            active.then_some(&follower.osc),
            target_amp,
            follower.motor(),
            t,
        );
        let obs = bias.apply(&raw);
        let f_nose = nose_position(&follower.body, body);
        let f_heading = body_heading(&follower.body, body);
        let l_nose = nose_position(&leader.body, body);
        let l_heading = body_heading(&leader.body, body);
        let tail = tail_pose(&leader.body);
        let sigma_expert = expert_action(f_nose, f_heading, &expert_path, &sim.guidance);
        let sigma_applied = clamp_steering_to(
            clamp_steering(policy.act(&obs.to_vector(), sigma_expert)?),
            sim.guidance.clamp_fraction,
        );
        let contact = detect_contact(&leader.body, &follower.body, body).contact;
        let d = f_nose.distance(tail.position);
        frames.push(Frame {
            t,
            sensor: obs,
            sigma_expert,
            sigma_applied,
            leader_nose: l_nose,
            leader_heading: l_heading,
            leader_tail: tail,
            follower_nose: f_nose,
            follower_heading: f_heading,
            d,
            d_r: d_r(f_nose, &tail, &sim.reward),
            contact,
        });
        if contact {
            termination = Termination::Contact;
            break;
        }
        if d > proto.separation_limit {
            termination = Termination::Separated;
            break;
        }
        if k + 1 == proto.max_ticks {
            break;
        }

        let sigma_leader = expert_action(l_nose, l_heading, &leader_path, &sim.guidance);
        for _ in 0..SUBSTEPS {
            leader.substep(sim, sigma_leader)?;
            if active {
                follower.substep(sim, sigma_applied)?;
            }
            sensors.record(&[(&leader.body, body), (&follower.body, body)]);
        }
        if !leader.body.is_finite() || !follower.body.is_finite() {
            return Err(Error::numeric("rollout", format!("body state diverged at tick {k} of rollout {}", spec.id)));
        }
    }
    Ok(Rollout {
        id: spec.id,
        seed: spec.seed,
        side: spec.side,
        source: spec.source,
        termination,
        frames,
    })
}

/// Runs a batch of rollouts in parallel; results come back in input order.
pub fn run_batch(sim: &SimConfig, specs: &[RolloutSpec], policy: &FollowerPolicy) -> Result<Vec<Rollout>> {
    specs
        .par_iter()
        .map(|spec| {
            let mut p = policy.clone();
            run_rollout(sim, spec, &mut p)
        })
        .collect()
}

/// Rollout specs for `n` consecutive ids starting at `first_id`, alternating
/// sides (even ids: leader on the left).
pub fn batch_specs(master_seed: u64, stream: &str, first_id: usize, n: usize, source: Source) -> Result<Vec<RolloutSpec>> {
    if !n.is_multiple_of(2) {
        return Err(Error::invalid(format!("rollout count must be even for left/right balance, got {n}")));
    }
    Ok((first_id..first_id + n)
        .map(|id| RolloutSpec {
            id,
            seed: seeds::derive(master_seed, stream, id as u64),
            side: if id % 2 == 0 { Side::Left } else { Side::Right },
            source,
        })
        .collect())
}

/// Aggregated demonstrations across BC and DAgger iterations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub rollouts: Vec<Rollout>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    /// Appends one collection batch. All its rollouts share a source, and
    /// that source's provenance index must exceed every earlier one.
    pub fn append(&mut self, batch: Vec<Rollout>) -> Result<()> {
        let Some(first) = batch.first() else {
            return Ok(());
        };
        let source = first.source;
        if matches!(source, Source::Eval) {
            return Err(Error::invalid("evaluation rollouts do not belong in a training set"));
        }
        if batch.iter().any(|r| r.source != source) {
            return Err(Error::invalid("a batch must come from a single collection stage"));
        }
        if let Some(last) = self.rollouts.last() {
            if source.group() <= last.source.group() {
                return Err(Error::invalid("dataset provenance must increase across iterations"));
            }
        }
        self.rollouts.extend(batch);
        Ok(())
    }

    pub fn training_view(&self) -> Vec<TrainingRollout> {
        self.rollouts.iter().map(Rollout::to_training).collect()
    }

    pub fn side_counts(&self, source: Source) -> (usize, usize) {
        let of = |s: Side| self.rollouts.iter().filter(|r| r.source == source && r.side == s).count();
        (of(Side::Left), of(Side::Right))
    }
}

/// Behaviour cloning data: the expert acts, every frame is labelled.
pub fn collect_bc(sim: &SimConfig, master_seed: u64, n: usize) -> Result<Vec<Rollout>> {
    let specs = batch_specs(master_seed, "bc", 0, n, Source::Bc)?;
    run_batch(sim, &specs, &FollowerPolicy::Expert)
}

/// One DAgger iteration: the learner acts on its own observations, the
/// expert labels every visited state, and the new rollouts are appended.
pub fn dagger_iteration(
    sim: &SimConfig,
    master_seed: u64,
    iteration: usize,
    n: usize,
    policy: &LstmPolicy,
    dataset: &mut Dataset,
) -> Result<Vec<Rollout>> {
    if iteration == 0 {
        return Err(Error::invalid("DAgger iterations are numbered from 1"));
    }
    let first = dataset.len();
    let specs = batch_specs(master_seed, "dagger", first, n, Source::Dagger(iteration))?;
    let batch = run_batch(sim, &specs, &FollowerPolicy::Learner(Box::new(policy.clone())))?;
    dataset.append(batch.clone())?;
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_4;

    fn straight(len: f64, y: f64) -> PathSpline {
        let pts: Vec<Point2> = (0..=(len / 5.0) as usize).map(|i| Point2::new(i as f64 * 5.0, y)).collect();
        PathSpline::from_polyline(&pts).unwrap()
    }

    #[test]
    fn expert_examples() {
        let g = GuidanceConfig::default();
        let path = straight(1000.0, 0.0);
        assert_eq!(expert_action(Point2::new(100.0, 0.0), 0.0, &path, &g), 0.0);
        // aimed 45° to the right of the path direction: steer left, saturated
        assert_abs_diff_eq!(expert_action(Point2::new(100.0, 0.0), -FRAC_PI_4, &path, &g), 0.3, epsilon = 1e-12);
        let a = expert_action(Point2::new(100.0, 20.0), 0.1, &path, &g);
        let mirrored = path.mirrored(0.0);
        let b = expert_action(Point2::new(100.0, -20.0), -0.1, &mirrored, &g);
        assert_abs_diff_eq!(a, -b, epsilon = 1e-15);
    }

    #[test]
    fn expert_path_goes_toward_follower() {
        let path = straight(1000.0, 100.0);
        let near = make_expert_path(&path, Point2::new(300.0, 110.0), 60.0).unwrap();
        let far = make_expert_path(&path, Point2::new(300.0, 300.0), 60.0).unwrap();
        assert_eq!(near, far);
        assert_abs_diff_eq!(near.samples[10].point.y, 160.0, epsilon = 1e-9);
        let below = make_expert_path(&path, Point2::new(300.0, 20.0), 60.0).unwrap();
        assert_abs_diff_eq!(below.samples[10].point.y, 40.0, epsilon = 1e-9);
        assert!(matches!(
            make_expert_path(&path, Point2::new(300.0, 100.0), 60.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn start_geometry() {
        let sim = SimConfig::default();
        let (leader, follower) = start_bodies(&sim, Side::Left);
        let spec = &sim.body;
        let fl = nose_position(&follower, spec);
        // the leader is to the follower's left, i.e. at larger y
        assert!(leader.centroid().y > follower.centroid().y);
        assert_abs_diff_eq!(leader.centroid().y - follower.centroid().y, 60.0, epsilon = 1e-9);
        let joint = leader.rear_point(spec.n_links - 2, spec);
        assert_abs_diff_eq!(fl.x, joint.x, epsilon = 1e-9);
        assert!(!detect_contact(&leader, &follower, spec).contact);
    }

    #[test]
    fn batch_specs_balance_sides() {
        let specs = batch_specs(1, "bc", 0, 4, Source::Bc).unwrap();
        let left = specs.iter().filter(|s| s.side == Side::Left).count();
        assert_eq!((left, specs.len() - left), (2, 2));
        assert!(batch_specs(1, "bc", 0, 3, Source::Bc).is_err());
    }
}
