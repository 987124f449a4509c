//! Minimal SVG figures: rollout trajectories, learning curves and the
//! fixed-follower grid. Output is plain, standalone SVG 1.1.

use std::fmt::Write;

use crate::eval::{FixedFollowerCell, Quartiles};
use crate::geometry::TankSpec;
use crate::imitation::Rollout;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn open(width: f64, height: f64) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n\
         <svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect x=\"0\" y=\"0\" width=\"{width:.0}\" height=\"{height:.0}\" fill=\"white\"/>\n"
    )
}

fn text(out: &mut String, x: f64, y: f64, anchor: &str, s: &str) {
    let _ = writeln!(
        out,
        "<text x=\"{x:.1}\" y=\"{y:.1}\" text-anchor=\"{anchor}\">{}</text>",
        escape(s)
    );
}

fn polyline(out: &mut String, pts: impl Iterator<Item = (f64, f64)>, color: &str, width: f64, dash: Option<&str>) {
    let mut d = String::new();
    for (x, y) in pts {
        if x.is_finite() && y.is_finite() {
            let _ = write!(d, "{x:.1},{y:.1} ");
        }
    }
    let dash = dash.map(|d| format!(" stroke-dasharray=\"{d}\"")).unwrap_or_default();
    let _ = writeln!(
        out,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\"{dash}/>",
        d.trim_end()
    );
}

/// Linear map from a data interval onto a pixel interval.
#[derive(Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    px0: f64,
    px1: f64,
}

impl Axis {
    fn new(lo: f64, hi: f64, px0: f64, px1: f64) -> Self {
        let (lo, hi) = if (hi - lo).abs() < 1e-12 { (lo - 1.0, hi + 1.0) } else { (lo, hi) };
        Axis { lo, hi, px0, px1 }
    }

    fn map(&self, v: f64) -> f64 {
        self.px0 + (v - self.lo) / (self.hi - self.lo) * (self.px1 - self.px0)
    }

    fn padded(values: impl Iterator<Item = f64>, px0: f64, px1: f64) -> Self {
        let (lo, hi) = values
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            return Axis::new(0.0, 1.0, px0, px1);
        }
        let pad = 0.05 * (hi - lo).max(1e-9);
        Axis::new(lo - pad, hi + pad, px0, px1)
    }
}

fn frame(out: &mut String, x: Axis, y: Axis, x_label: &str, y_label: &str) {
    let _ = writeln!(
        out,
        "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"black\"/>",
        x.px0,
        y.px1,
        x.px1 - x.px0,
        y.px0 - y.px1
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let xv = x.lo + f * (x.hi - x.lo);
        let yv = y.lo + f * (y.hi - y.lo);
        text(out, x.map(xv), y.px0 + 15.0, "middle", &format!("{xv:.3}"));
        text(out, x.px0 - 5.0, y.map(yv) + 4.0, "end", &format!("{yv:.3}"));
    }
    text(out, 0.5 * (x.px0 + x.px1), y.px0 + 32.0, "middle", x_label);
    let cy = 0.5 * (y.px0 + y.px1);
    let _ = writeln!(
        out,
        "<text x=\"14\" y=\"{cy:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {cy:.1})\">{}</text>",
        escape(y_label)
    );
}

/// Top-down tracks of leader and follower noses, one tank panel per rollout.
/// Tank y grows upward in the figure.
pub fn trajectory_svg(tank: &TankSpec, rollouts: &[&Rollout], title: &str) -> String {
    let scale = 0.3;
    let (margin, header) = (20.0, 40.0);
    let panel_h = tank.width * scale + 30.0;
    let width = tank.length * scale + 2.0 * margin;
    let height = header + panel_h * rollouts.len().max(1) as f64;
    let mut out = open(width, height);
    text(&mut out, width / 2.0, 22.0, "middle", title);
    for (k, r) in rollouts.iter().enumerate() {
        let top = header + k as f64 * panel_h + 15.0;
        let px = |x: f64| margin + x * scale;
        let py = |y: f64| top + (tank.width - y) * scale;
        let _ = writeln!(
            out,
            "<rect x=\"{:.1}\" y=\"{top:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"#f4f8fb\" stroke=\"black\"/>",
            margin,
            tank.length * scale,
            tank.width * scale
        );
        text(
            &mut out,
            margin,
            top - 3.0,
            "start",
            &format!(
                "rollout {} ({} side, {}, {} frames)",
                r.id,
                r.side.as_str(),
                r.termination.as_str(),
                r.frames.len()
            ),
        );
        polyline(&mut out, r.frames.iter().map(|f| (px(f.leader_nose.x), py(f.leader_nose.y))), "#555555", 1.5, Some("4 3"));
        polyline(&mut out, r.frames.iter().map(|f| (px(f.follower_nose.x), py(f.follower_nose.y))), PALETTE[0], 1.5, None);
        if let Some(f) = r.frames.first() {
            for (p, color) in [(f.leader_nose, "#555555"), (f.follower_nose, PALETTE[0])] {
                let _ = writeln!(out, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>", px(p.x), py(p.y));
            }
        }
    }
    text(&mut out, width - margin, height - 6.0, "end", "dashed: leader nose, solid: follower nose");
    out.push_str("</svg>\n");
    out
}

/// Median with interquartile bars per stage, plus horizontal reference
/// lines (e.g. expert and no-steering medians).
pub fn learning_curve_svg(stages: &[(String, Quartiles)], references: &[(String, f64)], y_label: &str) -> String {
    let (width, height) = (640.0, 400.0);
    let x = Axis::new(-0.5, stages.len().max(1) as f64 - 0.5, 70.0, width - 150.0);
    let values = stages
        .iter()
        .flat_map(|(_, q)| [q.q1, q.q3])
        .chain(references.iter().map(|r| r.1));
    let y = Axis::padded(values, height - 60.0, 30.0);
    let mut out = open(width, height);
    let _ = writeln!(
        out,
        "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"black\"/>",
        x.px0,
        y.px1,
        x.px1 - x.px0,
        y.px0 - y.px1
    );
    for k in 0..=4 {
        let yv = y.lo + k as f64 / 4.0 * (y.hi - y.lo);
        text(&mut out, x.px0 - 5.0, y.map(yv) + 4.0, "end", &format!("{yv:.3}"));
    }
    let cy = 0.5 * (y.px0 + y.px1);
    let _ = writeln!(
        out,
        "<text x=\"14\" y=\"{cy:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {cy:.1})\">{}</text>",
        escape(y_label)
    );
    for (k, (name, v)) in references.iter().enumerate() {
        let color = PALETTE[(k + 1) % PALETTE.len()];
        polyline(&mut out, [(x.px0, y.map(*v)), (x.px1, y.map(*v))].into_iter(), color, 1.0, Some("6 4"));
        text(&mut out, x.px1 + 6.0, y.map(*v) + 4.0, "start", name);
    }
    for (i, (name, q)) in stages.iter().enumerate() {
        let cx = x.map(i as f64);
        polyline(&mut out, [(cx, y.map(q.q1)), (cx, y.map(q.q3))].into_iter(), PALETTE[0], 2.0, None);
        for v in [q.q1, q.q3] {
            polyline(&mut out, [(cx - 5.0, y.map(v)), (cx + 5.0, y.map(v))].into_iter(), PALETTE[0], 2.0, None);
        }
        text(&mut out, cx, y.px0 + 15.0, "middle", name);
    }
    polyline(
        &mut out,
        stages.iter().enumerate().map(|(i, (_, q))| (x.map(i as f64), y.map(q.median))),
        PALETTE[0],
        1.5,
        None,
    );
    for (i, (_, q)) in stages.iter().enumerate() {
        let _ = writeln!(
            out,
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"4\" fill=\"{}\"/>",
            x.map(i as f64),
            y.map(q.median),
            PALETTE[0]
        );
    }
    text(&mut out, 0.5 * (x.px0 + x.px1), height - 20.0, "middle", "policy (median, interquartile range)");
    out.push_str("</svg>\n");
    out
}

/// Two panels against longitudinal offset, one line per lateral offset:
/// RMS sensed pressure and onset delay.
pub fn fixed_follower_svg(cells: &[FixedFollowerCell]) -> String {
    let (width, height) = (980.0, 420.0);
    let mut laterals: Vec<f64> = cells.iter().map(|c| c.lateral).collect();
    laterals.sort_by(f64::total_cmp);
    laterals.dedup();
    let lon = cells.iter().map(|c| c.longitudinal);
    let mut out = open(width, height);
    let panels: [(&str, Box<dyn Fn(&FixedFollowerCell) -> Option<f64>>, f64); 2] = [
        ("RMS pressure (Pa)", Box::new(|c: &FixedFollowerCell| Some(c.rms)), 70.0),
        ("onset delay (s)", Box::new(|c: &FixedFollowerCell| c.onset_delay), 540.0),
    ];
    for (label, value, left) in panels.iter() {
        let x = Axis::padded(lon.clone(), *left, left + 330.0);
        let y = Axis::padded(cells.iter().filter_map(value), height - 70.0, 30.0);
        frame(&mut out, x, y, "longitudinal offset (mm)", "");
        text(&mut out, left + 165.0, 22.0, "middle", label);
        for (k, lat) in laterals.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let mut row: Vec<&FixedFollowerCell> = cells.iter().filter(|c| c.lateral == *lat).collect();
            row.sort_by(|a, b| a.longitudinal.total_cmp(&b.longitudinal));
            let pts: Vec<(f64, f64)> = row
                .iter()
                .filter_map(|c| value(c).map(|v| (x.map(c.longitudinal), y.map(v))))
                .collect();
            polyline(&mut out, pts.iter().copied(), color, 1.5, None);
            for (px, py) in &pts {
                let _ = writeln!(out, "<circle cx=\"{px:.1}\" cy=\"{py:.1}\" r=\"3\" fill=\"{color}\"/>");
            }
        }
    }
    for (k, lat) in laterals.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let lx = 70.0 + 150.0 * k as f64;
        let _ = writeln!(
            out,
            "<rect x=\"{lx:.1}\" y=\"{:.1}\" width=\"12\" height=\"12\" fill=\"{color}\"/>",
            height - 22.0
        );
        text(&mut out, lx + 16.0, height - 12.0, "start", &format!("lateral {lat} mm"));
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn escapes_markup() {
        assert_eq!(escape("a<b & \"c\""), "a&lt;b &amp; &quot;c&quot;");
    }

    #[test]
    fn learning_curve_handles_flat_data() {
        let q = Quartiles { q1: 1.0, median: 1.0, q3: 1.0 };
        let svg = learning_curve_svg(&[("bc".into(), q)], &[], "reward");
        assert!(svg.contains("<circle"));
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn axis_maps_endpoints() {
        let a = Axis::new(0.0, 10.0, 100.0, 200.0);
        assert_eq!(a.map(0.0), 100.0);
        assert_eq!(a.map(10.0), 200.0);
    }
}
