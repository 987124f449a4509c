//! Planar articulated swimmer.
//!
//! The body is a chain of rigid links in maximal coordinates (centre, heading,
//! linear and angular velocity per link). Link 0 is the head. Each step solves
//! a linear saddle-point system for the new velocities with resistive drag,
//! joint springs and joint damping treated implicitly and the pin joints as
//! velocity constraints, then integrates positions and projects away the
//! remaining joint drift.
//!
//! Units: mm, kg, s. Forces are kg·mm/s², torques kg·mm²/s².
//!
//! A positive joint torque rotates the anterior link counter-clockwise
//! relative to the posterior one, so positive offsets on every joint bend the
//! head to the left and turn the swimmer left.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cpg::MAX_DT;
use crate::error::{Error, Result};
use crate::geometry::{Point2, Pose2, TankSpec};
use crate::linalg;

/// Nose-to-tail length of every body.
pub const BODY_LENGTH: f64 = 200.0;

/// Oscillation torque amplitude that gives the default body its nominal
/// cruising speed.
pub const DEFAULT_TORQUE_AMPLITUDE: f64 = 5500.0;

/// Joint drift tolerated after projection, in mm.
const CONSTRAINT_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BodySpec {
    pub n_links: usize,
    /// Full width of every link (capsule diameter), mm.
    pub link_width: f64,
    /// kg per link.
    pub link_mass: f64,
    /// Resistive coefficient per unit length for motion across the link, kg/(mm·s).
    pub drag_normal: f64,
    /// Resistive coefficient per unit length for motion along the link, kg/(mm·s).
    pub drag_tangential: f64,
    /// kg·mm²/s per rad/s of relative joint rotation.
    pub joint_damping: f64,
    /// kg·mm²/s² per rad of joint bend.
    pub joint_stiffness: f64,
    pub torque_limit: f64,
}

impl Default for BodySpec {
    fn default() -> Self {
        BodySpec {
            n_links: 6,
            link_width: 24.0,
            link_mass: 0.02,
            drag_normal: 0.03,
            drag_tangential: 0.0015,
            joint_damping: 2.0,
            joint_stiffness: 10_000.0,
            torque_limit: 1.15 * DEFAULT_TORQUE_AMPLITUDE,
        }
    }
}

impl BodySpec {
    pub fn link_length(&self) -> f64 {
        BODY_LENGTH / self.n_links as f64
    }

    pub fn joints(&self) -> usize {
        self.n_links - 1
    }

    pub fn link_inertia(&self) -> f64 {
        let l = self.link_length();
        self.link_mass * (l * l + self.link_width * self.link_width) / 12.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_links < 2 {
            return bad(format!("a body needs at least two links, got {}", self.n_links));
        }
        if !(self.link_width > 0.0 && self.link_mass > 0.0) {
            return bad("link width and mass must be positive".into());
        }
        if !(self.drag_normal > self.drag_tangential && self.drag_tangential > 0.0) {
            return bad(format!(
                "drag must satisfy normal > tangential > 0, got {} and {}",
                self.drag_normal, self.drag_tangential
            ));
        }
        if !(self.joint_damping >= 0.0 && self.joint_stiffness >= 0.0) {
            return bad("joint damping and stiffness must be non-negative".into());
        }
        if !(self.torque_limit > 0.0) {
            return bad("torque limit must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkState {
    pub center: Point2,
    /// Unwrapped heading of the link's forward axis.
    pub heading: f64,
    pub velocity: Point2,
    pub omega: f64,
}

impl LinkState {
    pub fn pose(&self) -> Pose2 {
        Pose2::new(self.center, self.heading)
    }

    pub fn tangent(&self) -> Point2 {
        Point2::from_angle(self.heading)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyState {
    pub links: Vec<LinkState>,
}

impl BodyState {
    /// Straight body at rest whose midpoint is `center`.
    pub fn straight(center: Point2, heading: f64, spec: &BodySpec) -> Self {
        let dir = Point2::from_angle(heading);
        let nose = center + dir * (0.5 * BODY_LENGTH);
        BodyState::straight_from_nose(nose, heading, spec)
    }

    /// Straight body at rest with its nose at `nose`.
    pub fn straight_from_nose(nose: Point2, heading: f64, spec: &BodySpec) -> Self {
        let dir = Point2::from_angle(heading);
        let l = spec.link_length();
        let links = (0..spec.n_links)
            .map(|i| LinkState {
                center: nose - dir * ((i as f64 + 0.5) * l),
                heading,
                velocity: Point2::ORIGIN,
                omega: 0.0,
            })
            .collect();
        BodyState { links }
    }

    pub fn front_point(&self, i: usize, spec: &BodySpec) -> Point2 {
        let link = &self.links[i];
        link.center + link.tangent() * (0.5 * spec.link_length())
    }

    pub fn rear_point(&self, i: usize, spec: &BodySpec) -> Point2 {
        let link = &self.links[i];
        link.center - link.tangent() * (0.5 * spec.link_length())
    }

    /// Anterior-minus-posterior heading at each joint.
    pub fn joint_angles(&self) -> Vec<f64> {
        self.links
            .windows(2)
            .map(|w| w[0].heading - w[1].heading)
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.links.iter().all(|l| {
            l.center.is_finite() && l.velocity.is_finite() && l.heading.is_finite() && l.omega.is_finite()
        })
    }

    /// Largest distance between coincident joint endpoints.
    pub fn constraint_residual(&self, spec: &BodySpec) -> f64 {
        (0..self.links.len() - 1)
            .map(|j| self.rear_point(j, spec).distance(self.front_point(j + 1, spec)))
            .fold(0.0, f64::max)
    }

    pub fn kinetic_energy(&self, spec: &BodySpec) -> f64 {
        let m = spec.link_mass;
        let inertia = spec.link_inertia();
        self.links
            .iter()
            .map(|l| 0.5 * m * l.velocity.norm_squared() + 0.5 * inertia * l.omega * l.omega)
            .sum()
    }

    pub fn elastic_energy(&self, spec: &BodySpec) -> f64 {
        self.joint_angles()
            .iter()
            .map(|phi| 0.5 * spec.joint_stiffness * phi * phi)
            .sum()
    }

    /// Mass-averaged velocity.
    pub fn mean_velocity(&self) -> Point2 {
        let n = self.links.len() as f64;
        self.links
            .iter()
            .fold(Point2::ORIGIN, |acc, l| acc + l.velocity)
            * (1.0 / n)
    }

    pub fn centroid(&self) -> Point2 {
        let n = self.links.len() as f64;
        self.links.iter().fold(Point2::ORIGIN, |acc, l| acc + l.center) * (1.0 / n)
    }

    pub fn head_heading(&self) -> f64 {
        self.links[0].heading
    }

    pub fn translated(&self, by: Point2) -> BodyState {
        let mut out = self.clone();
        for l in &mut out.links {
            l.center += by;
        }
        out
    }

    /// Reflection across the line y = `axis_y`.
    pub fn mirrored(&self, axis_y: f64) -> BodyState {
        BodyState {
            links: self
                .links
                .iter()
                .map(|l| LinkState {
                    center: l.center.mirror_y(axis_y),
                    heading: -l.heading,
                    velocity: Point2::new(l.velocity.x, -l.velocity.y),
                    omega: -l.omega,
                })
                .collect(),
        }
    }
}

pub fn nose_position(state: &BodyState, spec: &BodySpec) -> Point2 {
    state.front_point(0, spec)
}

pub fn tail_pose(state: &BodyState) -> Pose2 {
    state.links[state.links.len() - 1].pose()
}

/// Advances the body by `dt` under the given joint torques.
pub fn body_step(state: &BodyState, spec: &BodySpec, torques: &[f64], dt: f64) -> Result<BodyState> {
    let n = spec.n_links;
    if state.links.len() != n {
        return Err(Error::invalid(format!(
            "body state has {} links, spec has {n}",
            state.links.len()
        )));
    }
    if torques.len() != n - 1 {
        return Err(Error::invalid(format!(
            "expected {} joint torques, got {}",
            n - 1,
            torques.len()
        )));
    }
    if !(dt > 0.0 && dt <= MAX_DT) {
        return Err(Error::invalid(format!("body dt must be in (0, {MAX_DT}], got {dt}")));
    }
    if !state.is_finite() {
        return Err(Error::numeric("body_step", "non-finite body state on entry"));
    }

    let half = 0.5 * spec.link_length();
    let l = spec.link_length();
    let m = spec.link_mass;
    let inertia = spec.link_inertia();
    let nv = 3 * n;
    let nc = 2 * (n - 1);
    let size = nv + nc;
    let mut a = vec![0.0; size * size];
    let mut b = vec![0.0; size];
    let idx = |row: usize, col: usize| row * size + col;

    for (i, link) in state.links.iter().enumerate() {
        let t = link.tangent();
        let nrm = t.perp();
        let (vx, vy, w) = (3 * i, 3 * i + 1, 3 * i + 2);
        let ct = spec.drag_tangential * l * dt;
        let cn = spec.drag_normal * l * dt;
        a[idx(vx, vx)] = m + ct * t.x * t.x + cn * nrm.x * nrm.x;
        a[idx(vx, vy)] = ct * t.x * t.y + cn * nrm.x * nrm.y;
        a[idx(vy, vx)] = a[idx(vx, vy)];
        a[idx(vy, vy)] = m + ct * t.y * t.y + cn * nrm.y * nrm.y;
        a[idx(w, w)] = inertia + spec.drag_normal * l * l * l / 12.0 * dt;
        b[vx] = m * link.velocity.x;
        b[vy] = m * link.velocity.y;
        b[w] = inertia * link.omega;
    }

    let joint_k = spec.joint_damping * dt + spec.joint_stiffness * dt * dt;
    for j in 0..n - 1 {
        let (wa, wp) = (3 * j + 2, 3 * (j + 1) + 2);
        a[idx(wa, wa)] += joint_k;
        a[idx(wp, wp)] += joint_k;
        a[idx(wa, wp)] -= joint_k;
        a[idx(wp, wa)] -= joint_k;
        let phi = state.links[j].heading - state.links[j + 1].heading;
        let moment = dt * (torques[j] - spec.joint_stiffness * phi);
        b[wa] += moment;
        b[wp] -= moment;
    }

    // rear of link j == front of link j+1
    for j in 0..n - 1 {
        let na = state.links[j].tangent().perp();
        let np = state.links[j + 1].tangent().perp();
        for axis in 0..2 {
            let row = nv + 2 * j + axis;
            let (ea, ep) = if axis == 0 { (na.x, np.x) } else { (na.y, np.y) };
            let entries = [
                (3 * j + axis, 1.0),
                (3 * j + 2, -half * ea),
                (3 * (j + 1) + axis, -1.0),
                (3 * (j + 1) + 2, -half * ep),
            ];
            for (col, v) in entries {
                a[idx(row, col)] = v;
                a[idx(col, row)] = v;
            }
        }
    }

    linalg::solve_in_place(&mut a, &mut b, size).map_err(|col| {
        Error::numeric(
            "body_step",
            format!("velocity system singular at column {col} of {size}"),
        )
    })?;

    let mut next = state.clone();
    for (i, link) in next.links.iter_mut().enumerate() {
        link.velocity = Point2::new(b[3 * i], b[3 * i + 1]);
        link.omega = b[3 * i + 2];
        link.center += link.velocity * dt;
        link.heading += link.omega * dt;
    }
    project_constraints(&mut next, spec)?;
    if !next.is_finite() {
        return Err(Error::numeric("body_step", "non-finite body state after step"));
    }
    Ok(next)
}

/// Mass-weighted Gauss-Newton projection of link positions onto the joint
/// constraints. Velocities are left untouched.
fn project_constraints(state: &mut BodyState, spec: &BodySpec) -> Result<()> {
    let n = state.links.len();
    let nc = 2 * (n - 1);
    let half = 0.5 * spec.link_length();
    let inv_m = 1.0 / spec.link_mass;
    let inv_i = 1.0 / spec.link_inertia();
    let mut residual = vec![0.0; nc];
    let mut s = vec![0.0; nc * nc];

    for _ in 0..20 {
        let mut worst: f64 = 0.0;
        for j in 0..n - 1 {
            let c = state.rear_point(j, spec) - state.front_point(j + 1, spec);
            residual[2 * j] = c.x;
            residual[2 * j + 1] = c.y;
            worst = worst.max(c.norm());
        }
        if worst < CONSTRAINT_TOLERANCE {
            return Ok(());
        }
        // Jacobian rows per joint: d/d(center_j) = I, d/d(theta_j) = -half n_j,
        // d/d(center_j+1) = -I, d/d(theta_j+1) = -half n_j+1
        let normals: Vec<Point2> = state.links.iter().map(|l| l.tangent().perp()).collect();
        let jac = |j: usize, axis: usize| -> [(usize, f64); 4] {
            let pick = |p: Point2| if axis == 0 { p.x } else { p.y };
            [
                (3 * j + axis, 1.0),
                (3 * j + 2, -half * pick(normals[j])),
                (3 * (j + 1) + axis, -1.0),
                (3 * (j + 1) + 2, -half * pick(normals[j + 1])),
            ]
        };
        let weight = |col: usize| if col % 3 == 2 { inv_i } else { inv_m };
        s.iter_mut().for_each(|v| *v = 0.0);
        for r in 0..nc {
            let row_entries = jac(r / 2, r % 2);
            for c in 0..nc {
                let col_entries = jac(c / 2, c % 2);
                let mut acc = 0.0;
                for &(ci, vi) in &row_entries {
                    for &(cj, vj) in &col_entries {
                        if ci == cj {
                            acc += vi * vj * weight(ci);
                        }
                    }
                }
                s[r * nc + c] = acc;
            }
        }
        let mut lambda = residual.clone();
        linalg::solve_in_place(&mut s, &mut lambda, nc).map_err(|col| {
            Error::numeric("body_step", format!("constraint projection singular at {col}"))
        })?;
        let mut dq = vec![0.0; 3 * n];
        for (r, &lam) in lambda.iter().enumerate() {
            for (col, v) in jac(r / 2, r % 2) {
                dq[col] -= weight(col) * v * lam;
            }
        }
        for (i, link) in state.links.iter_mut().enumerate() {
            link.center += Point2::new(dq[3 * i], dq[3 * i + 1]);
            link.heading += dq[3 * i + 2];
        }
    }
    let residual = state.constraint_residual(spec);
    if residual < 1e-6 {
        Ok(())
    } else {
        Err(Error::numeric(
            "body_step",
            format!("joint projection did not converge, residual {residual:e} mm"),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactReport {
    pub contact: bool,
    /// Smallest surface-to-surface distance between the two bodies, mm.
    pub min_separation: f64,
}

fn point_segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 {
        ((p - a).dot(ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    p.distance(a + ab * t)
}

fn segments_intersect(a: Point2, b: Point2, c: Point2, d: Point2) -> bool {
    let d1 = (b - a).cross(c - a);
    let d2 = (b - a).cross(d - a);
    let d3 = (d - c).cross(a - c);
    let d4 = (d - c).cross(b - c);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

pub(crate) fn segment_distance(a: Point2, b: Point2, c: Point2, d: Point2) -> f64 {
    if segments_intersect(a, b, c, d) {
        return 0.0;
    }
    point_segment_distance(a, c, d)
        .min(point_segment_distance(b, c, d))
        .min(point_segment_distance(c, a, b))
        .min(point_segment_distance(d, a, b))
}

/// Capsule-to-capsule clearance between two bodies built from the same spec.
pub fn detect_contact(a: &BodyState, b: &BodyState, spec: &BodySpec) -> ContactReport {
    let mut best = f64::INFINITY;
    for i in 0..a.links.len() {
        let (a0, a1) = (a.rear_point(i, spec), a.front_point(i, spec));
        for j in 0..b.links.len() {
            let (b0, b1) = (b.rear_point(j, spec), b.front_point(j, spec));
            best = best.min(segment_distance(a0, a1, b0, b1));
        }
    }
    let min_separation = best - spec.link_width;
    ContactReport {
        contact: min_separation <= 0.0,
        min_separation,
    }
}

/// Pushes a body that has crossed a tank wall back inside and removes the
/// wall-ward velocity of the links that were outside.
pub fn wall_interaction(state: &BodyState, spec: &BodySpec, tank: &TankSpec) -> BodyState {
    let n = state.links.len();
    let mut shift = Point2::ORIGIN;
    // per link: which walls its endpoints crossed, as (-x, +x, -y, +y)
    let mut crossed = vec![[false; 4]; n];
    let (mut push_lo_x, mut push_hi_x, mut push_lo_y, mut push_hi_y) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (i, flags) in crossed.iter_mut().enumerate() {
        for p in [state.front_point(i, spec), state.rear_point(i, spec)] {
            if p.x < 0.0 {
                push_lo_x = push_lo_x.max(-p.x);
                flags[0] = true;
            }
            if p.x > tank.length {
                push_hi_x = push_hi_x.max(p.x - tank.length);
                flags[1] = true;
            }
            if p.y < 0.0 {
                push_lo_y = push_lo_y.max(-p.y);
                flags[2] = true;
            }
            if p.y > tank.width {
                push_hi_y = push_hi_y.max(p.y - tank.width);
                flags[3] = true;
            }
        }
    }
    if !crossed.iter().flatten().any(|&f| f) {
        return state.clone();
    }
    shift.x = push_lo_x - push_hi_x;
    shift.y = push_lo_y - push_hi_y;
    let mut out = state.translated(shift);
    for (link, flags) in out.links.iter_mut().zip(&crossed) {
        if flags[0] && link.velocity.x < 0.0 {
            link.velocity.x = 0.0;
        }
        if flags[1] && link.velocity.x > 0.0 {
            link.velocity.x = 0.0;
        }
        if flags[2] && link.velocity.y < 0.0 {
            link.velocity.y = 0.0;
        }
        if flags[3] && link.velocity.y > 0.0 {
            link.velocity.y = 0.0;
        }
    }
    out
}

/// Trajectory CSV: `t`, per-link `x_i,y_i,heading_i`, then nose and tail columns.
pub fn trajectory_csv(times: &[f64], states: &[BodyState], spec: &BodySpec) -> String {
    let n = spec.n_links;
    let mut out = String::from("t");
    for i in 0..n {
        let _ = write!(out, ",x_{i},y_{i},heading_{i}");
    }
    out.push_str(",nose_x,nose_y,tail_x,tail_y,tail_heading\n");
    for (t, s) in times.iter().zip(states) {
        let _ = write!(out, "{t}");
        for l in &s.links {
            let p = l.pose();
            let _ = write!(out, ",{},{},{}", p.position.x, p.position.y, p.heading());
        }
        let nose = nose_position(s, spec);
        let tail = tail_pose(s);
        let _ = writeln!(
            out,
            ",{},{},{},{},{}",
            nose.x,
            nose.y,
            tail.position.x,
            tail.position.y,
            tail.heading()
        );
    }
    out
}
