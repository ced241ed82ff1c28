//! Minimal SVG output: polyline trajectory plots and log-scale curve
//! charts. No external plotting dependency; everything is simple paths,
//! circles, and text.

use crate::simulate::Trajectory;
use std::fmt::Write as _;

const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf", "#aec7e8", "#ffbb78",
];

struct Frame {
    width: f64,
    height: f64,
    margin: f64,
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let sx = (self.width - 2.0 * self.margin) / (self.x_max - self.x_min).max(1e-12);
        let sy = (self.height - 2.0 * self.margin) / (self.y_max - self.y_min).max(1e-12);
        (
            self.margin + (x - self.x_min) * sx,
            self.height - self.margin - (y - self.y_min) * sy,
        )
    }
}

fn polyline(frame: &Frame, pts: &[(f64, f64)], color: &str, dashed: bool) -> String {
    if pts.len() < 2 {
        return String::new();
    }
    let mut d = String::new();
    for (i, &(x, y)) in pts.iter().enumerate() {
        let (px, py) = frame.map(x, y);
        let _ = write!(d, "{}{px:.2},{py:.2} ", if i == 0 { "M" } else { "L" });
    }
    let dash = if dashed {
        " stroke-dasharray=\"4 3\""
    } else {
        ""
    };
    format!(
        "<path d=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.4\"{dash}/>\n",
        d.trim_end()
    )
}

fn star(frame: &Frame, x: f64, y: f64, color: &str) -> String {
    let (cx, cy) = frame.map(x, y);
    let r_out = 5.0;
    let r_in = 2.0;
    let mut d = String::new();
    for k in 0..10 {
        let r = if k % 2 == 0 { r_out } else { r_in };
        let a = std::f64::consts::PI * (k as f64 / 5.0 - 0.5);
        let _ = write!(
            d,
            "{}{:.2},{:.2} ",
            if k == 0 { "M" } else { "L" },
            cx + r * a.cos(),
            cy + r * a.sin()
        );
    }
    format!("<path d=\"{}Z\" fill=\"{color}\"/>\n", d.trim_end())
}

fn circle(frame: &Frame, x: f64, y: f64, color: &str) -> String {
    let (cx, cy) = frame.map(x, y);
    format!(
        "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"4.5\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n"
    )
}

/// Planar trajectory plot of a robot fleet: one colored path per node,
/// solid up to `n_train` steps and dashed after, a star at the start and a
/// circle at the target.
pub fn trajectory_plot(
    traj: &Trajectory,
    n_nodes: usize,
    targets: &[[f64; 2]],
    n_train: usize,
) -> String {
    let pos = |z: &[f64], node: usize| -> (f64, f64) { (z[4 * node + 2], z[4 * node + 3]) };
    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for z in &traj.states {
        for node in 0..n_nodes {
            let (x, y) = pos(z, node);
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    for t in targets {
        x_min = x_min.min(t[0]);
        x_max = x_max.max(t[0]);
        y_min = y_min.min(t[1]);
        y_max = y_max.max(t[1]);
    }
    let pad_x = 0.08 * (x_max - x_min).max(1e-6);
    let pad_y = 0.08 * (y_max - y_min).max(1e-6);
    let frame = Frame {
        width: 640.0,
        height: 640.0,
        margin: 30.0,
        x_min: x_min - pad_x,
        x_max: x_max + pad_x,
        y_min: y_min - pad_y,
        y_max: y_max + pad_y,
    };
    let mut body = String::new();
    let split = n_train.min(traj.states.len() - 1);
    for node in 0..n_nodes {
        let color = PALETTE[node % PALETTE.len()];
        let solid: Vec<(f64, f64)> = traj.states[..=split].iter().map(|z| pos(z, node)).collect();
        body.push_str(&polyline(&frame, &solid, color, false));
        if split + 1 < traj.states.len() {
            let dashed: Vec<(f64, f64)> =
                traj.states[split..].iter().map(|z| pos(z, node)).collect();
            body.push_str(&polyline(&frame, &dashed, color, true));
        }
        let (sx, sy) = pos(&traj.states[0], node);
        body.push_str(&star(&frame, sx, sy, color));
        if node < targets.len() {
            body.push_str(&circle(&frame, targets[node][0], targets[node][1], color));
        }
    }
    wrap_svg(frame.width, frame.height, &body)
}

/// Log-scale curve chart: one series per (label, points) pair, x linear.
pub fn log_curves_plot(series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for (_, pts) in series {
        for &(x, y) in pts {
            let ly = y.max(1e-300).log10();
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(ly);
            y_max = y_max.max(ly);
        }
    }
    if !x_min.is_finite() {
        return wrap_svg(640.0, 400.0, "");
    }
    if (y_max - y_min).abs() < 1e-9 {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let frame = Frame {
        width: 640.0,
        height: 400.0,
        margin: 46.0,
        x_min,
        x_max,
        y_min,
        y_max,
    };
    let mut body = String::new();
    // axes
    let (ax0, ay0) = frame.map(x_min, y_min);
    let (ax1, _) = frame.map(x_max, y_min);
    let (_, ay1) = frame.map(x_min, y_max);
    let _ = write!(
        body,
        "<path d=\"M{ax0:.1},{ay1:.1} L{ax0:.1},{ay0:.1} L{ax1:.1},{ay0:.1}\" fill=\"none\" stroke=\"#333\" stroke-width=\"1\"/>\n"
    );
    for dec in (y_min.floor() as i64)..=(y_max.ceil() as i64) {
        let (gx0, gy) = frame.map(x_min, dec as f64);
        let (gx1, _) = frame.map(x_max, dec as f64);
        let _ = write!(
            body,
            "<path d=\"M{gx0:.1},{gy:.1} L{gx1:.1},{gy:.1}\" stroke=\"#ddd\" stroke-width=\"0.5\"/>\n<text x=\"{:.1}\" y=\"{gy:.1}\" font-size=\"10\" text-anchor=\"end\">1e{dec}</text>\n",
            gx0 - 4.0
        );
    }
    for (idx, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        let mapped: Vec<(f64, f64)> = pts
            .iter()
            .map(|&(x, y)| (x, y.max(1e-300).log10()))
            .collect();
        body.push_str(&polyline(&frame, &mapped, color, false));
        let _ = write!(
            body,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" fill=\"{color}\">{label}</text>\n",
            frame.width - frame.margin - 150.0,
            frame.margin + 14.0 * (idx as f64 + 1.0)
        );
    }
    wrap_svg(frame.width, frame.height, &body)
}

fn wrap_svg(width: f64, height: f64, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n{body}</svg>\n"
    )
}
