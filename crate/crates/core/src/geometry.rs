//! Planar geometry: points and poses, the tank, the leader's random path,
//! offset paths for the expert, and line-of-sight guidance.
//!
//! All lengths are millimetres and all angles radians. Headings are measured
//! counter-clockwise from the tank's +x axis (its length direction).

use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Control points are kept at least this far from every wall.
pub const WALL_MARGIN: f64 = 80.0;

/// Arc-length spacing of path samples.
pub const PATH_RESOLUTION: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ORIGIN: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    /// Unit vector at `angle`.
    pub fn from_angle(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Point2 { x: c, y: s }
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 3D cross product.
    pub fn cross(self, other: Point2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    /// Counter-clockwise perpendicular.
    pub fn perp(self) -> Point2 {
        Point2 {
            x: -self.y,
            y: self.x,
        }
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn lerp(self, other: Point2, t: f64) -> Point2 {
        self + (other - self) * t
    }

    /// Reflection across the line y = `axis_y`.
    pub fn mirror_y(self, axis_y: f64) -> Point2 {
        Point2 {
            x: self.x,
            y: 2.0 * axis_y - self.y,
        }
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl AddAssign for Point2 {
    fn add_assign(&mut self, rhs: Point2) {
        self.x += rhs.x;
        self.y += rhs.y;
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.x * rhs, self.y * rhs)
    }
}

impl Neg for Point2 {
    type Output = Point2;
    fn neg(self) -> Point2 {
        Point2::new(-self.x, -self.y)
    }
}

/// Wraps an angle into (-π, π].
pub fn wrap_angle(angle: f64) -> f64 {
    let r = angle.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Signed heading error `reference - current`, wrapped into (-π, π].
pub fn heading_error(reference: f64, current: f64) -> f64 {
    wrap_angle(reference - current)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub position: Point2,
    heading: f64,
}

impl Pose2 {
    pub fn new(position: Point2, heading: f64) -> Self {
        Pose2 {
            position,
            heading: wrap_angle(heading),
        }
    }

    pub fn heading(&self) -> f64 {
        self.heading
    }

    pub fn direction(&self) -> Point2 {
        Point2::from_angle(self.heading)
    }

    /// Expresses a world point in this pose's frame (x forward, y left).
    pub fn to_local(&self, p: Point2) -> Point2 {
        let d = p - self.position;
        let (s, c) = self.heading.sin_cos();
        Point2::new(c * d.x + s * d.y, -s * d.x + c * d.y)
    }

    pub fn to_world(&self, p: Point2) -> Point2 {
        let (s, c) = self.heading.sin_cos();
        self.position + Point2::new(c * p.x - s * p.y, s * p.x + c * p.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TankSpec {
    pub length: f64,
    pub width: f64,
}

impl Default for TankSpec {
    fn default() -> Self {
        TankSpec {
            length: 3050.0,
            width: 580.0,
        }
    }
}

impl TankSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0 && self.width > 0.0) {
            return Err(Error::Config(format!(
                "tank dimensions must be positive, got {} x {}",
                self.length, self.width
            )));
        }
        Ok(())
    }

    /// True when `p` is at least `margin` inside every wall.
    pub fn contains(&self, p: Point2, margin: f64) -> bool {
        p.x >= margin
            && p.x <= self.length - margin
            && p.y >= margin
            && p.y <= self.width - margin
    }

    pub fn center_y(&self) -> f64 {
        0.5 * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    /// +1 for left (counter-clockwise normal), -1 for right.
    pub fn sign(self) -> f64 {
        match self {
            Side::Left => 1.0,
            Side::Right => -1.0,
        }
    }

    pub fn opposite(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathSample {
    pub point: Point2,
    /// Cumulative arc length from the first sample.
    pub s: f64,
}

/// Polyline approximation of a smooth curve with arc-length bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSpline {
    pub control_points: Vec<Point2>,
    pub samples: Vec<PathSample>,
}

/// Result of projecting a point onto a path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub point: Point2,
    pub s: f64,
    pub distance: f64,
    pub segment: usize,
}

impl PathSpline {
    /// Builds a path from an explicit polyline, computing arc lengths.
    pub fn from_polyline(points: &[Point2]) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::invalid("a path needs at least two points"));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("path points must be finite"));
        }
        let mut samples = Vec::with_capacity(points.len());
        let mut s = 0.0;
        for (i, &p) in points.iter().enumerate() {
            if i > 0 {
                let ds = p.distance(points[i - 1]);
                if ds <= 0.0 {
                    return Err(Error::invalid("consecutive path points coincide"));
                }
                s += ds;
            }
            samples.push(PathSample { point: p, s });
        }
        Ok(PathSpline {
            control_points: vec![points[0], points[points.len() - 1]],
            samples,
        })
    }

    pub fn length(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.s)
    }

    pub fn start(&self) -> Point2 {
        self.samples[0].point
    }

    pub fn end(&self) -> Point2 {
        self.samples[self.samples.len() - 1].point
    }

    /// Unit tangent of segment `i` (clamped to the valid segment range).
    pub fn segment_direction(&self, i: usize) -> Point2 {
        let i = i.min(self.samples.len() - 2);
        let d = self.samples[i + 1].point - self.samples[i].point;
        d * (1.0 / d.norm())
    }

    /// Heading of the path at sample `i`; the last sample reuses the final segment.
    pub fn heading_at_sample(&self, i: usize) -> f64 {
        self.segment_direction(i).angle()
    }

    /// Point at arc length `s`, clamped to the path ends.
    pub fn point_at(&self, s: f64) -> Point2 {
        let n = self.samples.len();
        if s <= 0.0 {
            return self.samples[0].point;
        }
        if s >= self.samples[n - 1].s {
            return self.samples[n - 1].point;
        }
        // first sample with arc length > s
        let hi = self.samples.partition_point(|p| p.s <= s);
        let a = self.samples[hi - 1];
        let b = self.samples[hi];
        a.point.lerp(b.point, (s - a.s) / (b.s - a.s))
    }

    /// Closest point on the polyline. Ties resolve to the earliest segment.
    pub fn project(&self, p: Point2) -> Projection {
        let mut best = Projection {
            point: self.samples[0].point,
            s: 0.0,
            distance: f64::INFINITY,
            segment: 0,
        };
        for (i, w) in self.samples.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            let ab = b.point - a.point;
            let t = ((p - a.point).dot(ab) / ab.norm_squared()).clamp(0.0, 1.0);
            let q = a.point + ab * t;
            let d = p.distance(q);
            if d < best.distance {
                best = Projection {
                    point: q,
                    s: a.s + t * (b.s - a.s),
                    distance: d,
                    segment: i,
                };
            }
        }
        best
    }

    /// Minimum radius of curvature over interior samples, with the side
    /// (relative to the direction of travel) on which that centre lies.
    pub fn min_radius_of_curvature(&self) -> (f64, Option<Side>) {
        let mut best = (f64::INFINITY, None);
        for w in self.samples.windows(3) {
            let d0 = w[1].point - w[0].point;
            let d1 = w[2].point - w[1].point;
            let turn = d0.cross(d1).atan2(d0.dot(d1));
            if turn == 0.0 {
                continue;
            }
            let ds = 0.5 * (d0.norm() + d1.norm());
            let radius = ds / turn.abs();
            if radius < best.0 {
                let side = if turn > 0.0 { Side::Left } else { Side::Right };
                best = (radius, Some(side));
            }
        }
        best
    }

    /// CSV with columns `s_mm,x_mm,y_mm,heading_rad`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("s_mm,x_mm,y_mm,heading_rad\n");
        for (i, sample) in self.samples.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                sample.s,
                sample.point.x,
                sample.point.y,
                self.heading_at_sample(i)
            );
        }
        out
    }

    /// Mirror image across the line y = `axis_y`.
    pub fn mirrored(&self, axis_y: f64) -> PathSpline {
        PathSpline {
            control_points: self
                .control_points
                .iter()
                .map(|p| p.mirror_y(axis_y))
                .collect(),
            samples: self
                .samples
                .iter()
                .map(|s| PathSample {
                    point: s.point.mirror_y(axis_y),
                    s: s.s,
                })
                .collect(),
        }
    }
}

fn catmull_rom(p0: Point2, p1: Point2, p2: Point2, p3: Point2, t: f64) -> Point2 {
    let t2 = t * t;
    let t3 = t2 * t;
    (p1 * 2.0
        + (p2 - p0) * t
        + (p0 * 2.0 - p1 * 5.0 + p2 * 4.0 - p3) * t2
        + (p1 * 3.0 - p0 - p2 * 3.0 + p3) * t3)
        * 0.5
}

/// Resamples a dense polyline at `PATH_RESOLUTION` arc-length spacing,
/// always keeping the final point.
fn resample(dense: &[Point2]) -> Vec<Point2> {
    let mut cumulative = Vec::with_capacity(dense.len());
    let mut s = 0.0;
    cumulative.push(0.0);
    for w in dense.windows(2) {
        s += w[0].distance(w[1]);
        cumulative.push(s);
    }
    let total = s;
    let count = (total / PATH_RESOLUTION).floor() as usize;
    let mut out = Vec::with_capacity(count + 2);
    let mut seg = 0;
    for k in 0..=count {
        let target = k as f64 * PATH_RESOLUTION;
        while seg + 1 < dense.len() - 1 && cumulative[seg + 1] < target {
            seg += 1;
        }
        let span = cumulative[seg + 1] - cumulative[seg];
        let t = if span > 0.0 {
            ((target - cumulative[seg]) / span).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out.push(dense[seg].lerp(dense[seg + 1], t));
    }
    let last = dense[dense.len() - 1];
    if total - count as f64 * PATH_RESOLUTION > 1e-6 {
        out.push(last);
    } else {
        *out.last_mut().unwrap() = last;
    }
    out
}

fn spline_through(control: &[Point2]) -> Vec<Point2> {
    const STEPS_PER_SEGMENT: usize = 400;
    let n = control.len();
    // Phantom end points: the start tangent is along +x (the swimming
    // direction at launch), the end tangent continues the last chord.
    let first = control[0];
    let second = control[1];
    let head = Point2::new(2.0 * first.x - second.x, second.y);
    let tail = control[n - 1] * 2.0 - control[n - 2];
    let mut pts = Vec::with_capacity(n + 2);
    pts.push(head);
    pts.extend_from_slice(control);
    pts.push(tail);

    let mut dense = Vec::with_capacity((n - 1) * STEPS_PER_SEGMENT + 1);
    for seg in 0..n - 1 {
        let (p0, p1, p2, p3) = (pts[seg], pts[seg + 1], pts[seg + 2], pts[seg + 3]);
        for k in 0..STEPS_PER_SEGMENT {
            dense.push(catmull_rom(p0, p1, p2, p3, k as f64 / STEPS_PER_SEGMENT as f64));
        }
    }
    dense.push(control[n - 1]);
    dense
}

/// Random leader path: a Catmull-Rom spline through `start` and three control
/// points, one in each third of the remaining tank length.
///
/// The x-coordinate of each control point is drawn from the middle half of its
/// third, the y-coordinate uniformly across the tank width minus the wall
/// margin. Draws whose sampled curve would leave the margin band are
/// rejected; later attempts narrow the y-range toward the start's y so the
/// loop always terminates.
pub fn generate_random_path(seed: u64, tank: &TankSpec, start: Point2) -> Result<PathSpline> {
    tank.validate()?;
    if !start.is_finite() || !tank.contains(start, 0.0) {
        return Err(Error::invalid(format!(
            "path start ({}, {}) lies outside the tank",
            start.x, start.y
        )));
    }
    if !tank.contains(start, WALL_MARGIN) {
        return Err(Error::invalid(format!(
            "path start ({}, {}) lies within the {WALL_MARGIN} mm wall margin",
            start.x, start.y
        )));
    }
    let third = (tank.length - start.x) / 3.0;
    let y_lo = WALL_MARGIN;
    let y_hi = tank.width - WALL_MARGIN;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    const ATTEMPTS: usize = 32;
    for attempt in 0..=ATTEMPTS {
        let shrink = 1.0 - attempt as f64 / ATTEMPTS as f64;
        let mut control = Vec::with_capacity(4);
        control.push(start);
        for i in 0..3 {
            let lo = start.x + i as f64 * third;
            let x_min = (lo + 0.25 * third).max(WALL_MARGIN);
            let x_max = (lo + 0.75 * third).min(tank.length - WALL_MARGIN);
            let x = if x_max > x_min {
                rng.gen_range(x_min..=x_max)
            } else {
                0.5 * (lo + lo + third)
            };
            let y_raw: f64 = rng.gen_range(y_lo..=y_hi);
            let y = start.y + (y_raw - start.y) * shrink;
            control.push(Point2::new(x, y));
        }
        let samples = resample(&spline_through(&control));
        if samples.iter().all(|&p| tank.contains(p, WALL_MARGIN)) {
            let mut path = PathSpline::from_polyline(&samples)?;
            path.control_points = control;
            return Ok(path);
        }
    }
    Err(Error::invalid(
        "could not place a path inside the tank from this start",
    ))
}

/// Displaces every sample by `offset` along the local normal toward `side`.
pub fn offset_path(path: &PathSpline, offset: f64, side: Side) -> Result<PathSpline> {
    if !(offset >= 0.0) || !offset.is_finite() {
        return Err(Error::invalid(format!(
            "offset must be a finite non-negative distance, got {offset}"
        )));
    }
    if offset == 0.0 {
        return Ok(path.clone());
    }
    let (radius, centre_side) = path.min_radius_of_curvature();
    if centre_side == Some(side) && offset >= radius {
        return Err(Error::DegenerateOffset {
            offset,
            reason: format!("minimum radius of curvature on that side is {radius:.3} mm"),
        });
    }

    let n = path.samples.len();
    let normal_at = |i: usize| -> Point2 {
        let a = path.samples[i.saturating_sub(1)].point;
        let b = path.samples[(i + 1).min(n - 1)].point;
        let t = b - a;
        (t * (1.0 / t.norm())).perp()
    };
    let sign = side.sign();
    let points: Vec<Point2> = (0..n)
        .map(|i| path.samples[i].point + normal_at(i) * (sign * offset))
        .collect();

    for i in 0..n - 1 {
        let before = path.samples[i + 1].point - path.samples[i].point;
        let after = points[i + 1] - points[i];
        if before.dot(after) <= 0.0 {
            return Err(Error::DegenerateOffset {
                offset,
                reason: format!("offset samples fold back near arc length {:.1} mm", path.samples[i].s),
            });
        }
    }

    let mut out = PathSpline::from_polyline(&points)?;
    out.control_points = path
        .control_points
        .iter()
        .map(|&c| {
            let proj = path.project(c);
            let i = proj.segment;
            let t = path.segment_direction(i);
            c + t.perp() * (sign * offset)
        })
        .collect();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Distance ahead of the closest-point projection that is aimed at.
    pub lookahead: f64,
    /// Steering fraction per radian of heading error.
    pub gain: f64,
    pub clamp_fraction: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            lookahead: 100.0,
            gain: 0.3 / (PI / 4.0),
            clamp_fraction: 0.3,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lookahead > 0.0) {
            return Err(Error::Config(format!(
                "guidance lookahead must be positive, got {}",
                self.lookahead
            )));
        }
        if !(self.clamp_fraction > 0.0 && self.clamp_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "guidance clamp fraction must be in (0, 1], got {}",
                self.clamp_fraction
            )));
        }
        if !self.gain.is_finite() {
            return Err(Error::Config("guidance gain must be finite".into()));
        }
        Ok(())
    }
}

/// Line-of-sight reference heading from `pos` toward the path point
/// `lookahead` beyond the closest-point projection.
pub fn los_reference(path: &PathSpline, pos: Point2, cfg: &GuidanceConfig) -> f64 {
    let proj = path.project(pos);
    let target = path.point_at(proj.s + cfg.lookahead);
    let d = target - pos;
    if d.norm() < 1e-9 {
        return path.heading_at_sample(path.samples.len() - 1);
    }
    d.angle()
}
