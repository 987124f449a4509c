//! Invariants checked over random inputs.

use std::f64::consts::PI;

use proptest::prelude::*;

use formation::cpg::{clamp_steering, truncate_torque, STEERING_LIMIT};
use formation::eval::{d_r, reward, Quartiles, RewardConfig};
use formation::flow::port_exposure;
use formation::geometry::{heading_error, wrap_angle, Point2, Pose2};
use formation::policy::{forward_step, HiddenState, NetConfig, NetParams};
use formation::swimmer::{detect_contact, BodySpec, BodyState};

fn finite() -> impl Strategy<Value = f64> {
    -1e6..1e6f64
}

proptest! {
    #[test]
    fn steering_is_clamped(sigma in prop::num::f64::ANY) {
        let s = clamp_steering(sigma);
        prop_assert!(s.abs() <= STEERING_LIMIT);
        if sigma.abs() <= STEERING_LIMIT {
            prop_assert_eq!(s, sigma);
        }
    }

    #[test]
    fn torque_is_truncated(raw in prop::num::f64::ANY, limit in 0.0..10.0f64) {
        let t = truncate_torque(raw, limit);
        prop_assert!(t.abs() <= limit);
    }

    #[test]
    fn wrapped_angles_stay_in_half_open_interval(a in finite()) {
        let w = wrap_angle(a);
        prop_assert!(w > -PI && w <= PI);
        prop_assert!(((a - w) / (2.0 * PI) - ((a - w) / (2.0 * PI)).round()).abs() < 1e-6);
    }

    #[test]
    fn heading_error_is_antisymmetric(a in -10.0..10.0f64, b in -10.0..10.0f64) {
        let e = heading_error(a, b);
        let back = heading_error(b, a);
        // Antisymmetric except on the wrap boundary, where both are +π.
        prop_assert!((e + back).abs() < 1e-9 || (e - PI).abs() < 1e-9);
    }

    #[test]
    fn reward_is_bounded_and_non_increasing(d in 0.0..500.0f64, step in 0.0..50.0f64) {
        let cfg = RewardConfig::default();
        let r = reward(d, &cfg).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert!(reward(d + step, &cfg).unwrap() <= r + 1e-12);
    }

    #[test]
    fn d_r_is_invariant_under_rigid_motion(
        nx in -200.0..200.0f64, ny in -200.0..200.0f64,
        tx in -200.0..200.0f64, ty in -200.0..200.0f64, th in -PI..PI,
        shift_x in -500.0..500.0f64, shift_y in -500.0..500.0f64, rot in -PI..PI,
    ) {
        let cfg = RewardConfig::default();
        let nose = Point2::new(nx, ny);
        let tail = Pose2::new(Point2::new(tx, ty), th);
        let base = d_r(nose, &tail, &cfg);
        prop_assert!(base >= 0.0);
        let shift = Point2::new(shift_x, shift_y);
        let move_point = |p: Point2| Point2::from_angle(rot) * p.x + Point2::from_angle(rot).perp() * p.y + shift;
        let moved = d_r(move_point(nose), &Pose2::new(move_point(tail.position), th + rot), &cfg);
        prop_assert!((moved - base).abs() < 1e-8);
    }

    #[test]
    fn port_exposure_is_a_weight(
        px in -100.0..100.0f64, py in -100.0..100.0f64,
        sx in -100.0..100.0f64, sy in -100.0..100.0f64,
        angle in -PI..PI, k in 1.0..6.0f64,
    ) {
        let point = Point2::new(px, py);
        let source = Point2::new(sx, sy);
        let outward = Point2::from_angle(angle);
        let front = port_exposure(point, outward, source, k);
        let back = port_exposure(point, -outward, source, k);
        prop_assert!((0.0..=1.0).contains(&front));
        prop_assert_eq!(port_exposure(point, outward, source, 0.0), 1.0);
        // A source can only be fully in front of one of two opposite ports.
        if point.distance(source) > 1e-9 {
            prop_assert!(front + back <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn quartiles_are_ordered_and_within_range(values in prop::collection::vec(finite(), 1..60)) {
        let q = Quartiles::of(&values).unwrap();
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= q.q1 && q.q1 <= q.median && q.median <= q.q3 && q.q3 <= hi);
    }

    #[test]
    fn contact_is_symmetric_and_matches_separation(
        x in -400.0..400.0f64, y in -100.0..100.0f64, heading in -PI..PI,
    ) {
        let spec = BodySpec::default();
        let a = BodyState::straight(Point2::ORIGIN, 0.0, &spec);
        let b = BodyState::straight(Point2::new(x, y), heading, &spec);
        let ab = detect_contact(&a, &b, &spec);
        let ba = detect_contact(&b, &a, &spec);
        prop_assert!((ab.min_separation - ba.min_separation).abs() < 1e-9);
        prop_assert_eq!(ab.contact, ab.min_separation <= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn policy_output_is_bounded(
        seed in any::<u64>(),
        gain in 0.1..50.0f64,
        inputs in prop::collection::vec(-1e3..1e3f64, 4 * 20),
    ) {
        let cfg = NetConfig::default();
        let mut params = NetParams::init(cfg, seed);
        params.values.iter_mut().for_each(|v| *v *= gain);
        let mut state = HiddenState::zeros(&cfg);
        for x in inputs.chunks(cfg.input_dim) {
            let (sigma, next) = forward_step(&params, x, &state, None).unwrap();
            prop_assert!(sigma.is_finite() && sigma.abs() <= cfg.output_scale);
            state = next;
        }
    }
}
