//! SVG figures from an output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;

use izmpc::geometry::{BoxSet, Region};
use izmpc::impulsive::Jump;

use crate::error::{CliError, Result};
use crate::output::{read_json, read_jumps_csv, read_trajectory_csv};
use crate::pipeline::Sets;
use crate::scenario::Scenario;

const PANEL_W: f64 = 640.0;
const PANEL_H: f64 = 180.0;
const MARGIN: f64 = 50.0;

struct Frame {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    xr: (f64, f64),
    yr: (f64, f64),
}

impl Frame {
    fn new(x0: f64, y0: f64, w: f64, h: f64, xr: (f64, f64), yr: (f64, f64)) -> Self {
        let pad = |(a, b): (f64, f64)| {
            if (b - a).abs() < 1e-12 {
                (a - 0.5, b + 0.5)
            } else {
                (a, b)
            }
        };
        Frame {
            x0,
            y0,
            w,
            h,
            xr: pad(xr),
            yr: pad(yr),
        }
    }

    fn px(&self, x: f64) -> f64 {
        self.x0 + (x - self.xr.0) / (self.xr.1 - self.xr.0) * self.w
    }

    fn py(&self, y: f64) -> f64 {
        self.y0 + self.h - (y - self.yr.0) / (self.yr.1 - self.yr.0) * self.h
    }

    fn polyline(&self, svg: &mut String, pts: &[(f64, f64)], style: &str) {
        if pts.is_empty() {
            return;
        }
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", self.px(x), self.py(y)))
            .collect();
        let _ = writeln!(svg, r#"<polyline fill="none" {style} points="{}"/>"#, coords.join(" "));
    }

    fn hline(&self, svg: &mut String, y: f64, style: &str) {
        self.polyline(svg, &[(self.xr.0, y), (self.xr.1, y)], style);
    }

    fn axes(&self, svg: &mut String, label: &str) {
        let _ = writeln!(
            svg,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#444"/>"##,
            self.x0, self.y0, self.w, self.h
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="12">{label}</text>"#,
            self.x0 + 4.0,
            self.y0 + 14.0
        );
        for (v, anchor_y) in [(self.yr.0, self.y0 + self.h), (self.yr.1, self.y0 + 10.0)] {
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{}</text>"#,
                self.x0 - 4.0,
                anchor_y,
                fmt_num(v)
            );
        }
        for (v, anchor) in [(self.xr.0, "start"), (self.xr.1, "end")] {
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="{anchor}">{}</text>"#,
                self.px(v),
                self.y0 + self.h + 12.0,
                fmt_num(v)
            );
        }
    }
}

fn fmt_num(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn open_svg(w: f64, h: f64) -> String {
    format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#) + "\n"
}

/// One panel per state with the target bounds dashed, plus a panel with
/// the impulse amplitudes drawn as stairs.
pub fn states_svg(samples: &[(f64, DVector<f64>)], jumps: &[Jump], xstar: &BoxSet) -> String {
    let n = samples.first().map_or(0, |s| s.1.len());
    let m = jumps.first().map_or(0, |j| j.u.len());
    let panels = n + usize::from(m > 0);
    let height = panels as f64 * (PANEL_H + MARGIN) + MARGIN;
    let width = PANEL_W + 2.0 * MARGIN;
    let mut svg = open_svg(width, height);
    let tr = range(samples.iter().map(|s| s.0));
    for i in 0..n {
        let (lo, hi) = range(
            samples
                .iter()
                .map(|s| s.1[i])
                .chain([xstar.lower()[i], xstar.upper()[i]]),
        );
        let f = Frame::new(MARGIN, MARGIN + i as f64 * (PANEL_H + MARGIN), PANEL_W, PANEL_H, tr, (lo, hi));
        f.axes(&mut svg, &format!("x{}", i + 1));
        let dash = r##"stroke="#c33" stroke-dasharray="5,4""##;
        f.hline(&mut svg, xstar.lower()[i], dash);
        f.hline(&mut svg, xstar.upper()[i], dash);
        // break the line at the jumps so that arcs are drawn right-open
        let mut arc: Vec<(f64, f64)> = Vec::new();
        let mut last_t = f64::NEG_INFINITY;
        for (t, x) in samples {
            if *t <= last_t && !arc.is_empty() {
                f.polyline(&mut svg, &arc, r##"stroke="#226""##);
                arc.clear();
            }
            if jumps.iter().any(|j| (j.t - t).abs() < 1e-12) && !arc.is_empty() {
                f.polyline(&mut svg, &arc, r##"stroke="#226""##);
                arc.clear();
            }
            arc.push((*t, x[i]));
            last_t = *t;
        }
        f.polyline(&mut svg, &arc, r##"stroke="#226""##);
    }
    if m > 0 {
        let (lo, hi) = range(jumps.iter().flat_map(|j| j.u.iter().copied()).chain([0.0]));
        let f = Frame::new(MARGIN, MARGIN + n as f64 * (PANEL_H + MARGIN), PANEL_W, PANEL_H, tr, (lo, hi));
        f.axes(&mut svg, "u");
        let t_end = tr.1;
        for c in 0..m {
            let mut pts = Vec::new();
            for (i, j) in jumps.iter().enumerate() {
                let next = jumps.get(i + 1).map_or(t_end, |nj| nj.t);
                pts.push((j.t, j.u[c]));
                pts.push((next, j.u[c]));
            }
            f.polyline(&mut svg, &pts, r##"stroke="#363""##);
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// 2-D convex hull of projected points, counter-clockwise.
fn hull_2d(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn box_outline(b: &BoxSet, i: usize, j: usize) -> Vec<(f64, f64)> {
    let (l, u) = (b.lower(), b.upper());
    vec![(l[i], l[j]), (u[i], l[j]), (u[i], u[j]), (l[i], u[j]), (l[i], l[j])]
}

fn region_outline(region: &Region, i: usize, j: usize) -> Vec<(f64, f64)> {
    let mut outline = match region {
        Region::Box(b) => return box_outline(b, i, j),
        Region::Hull(h) => hull_2d(h.vertices().iter().map(|v| (v[i], v[j])).collect()),
        Region::Ball(b) => circle(&b.center, b.radius, i, j),
        Region::BallInBox { ball, bounds } => circle(&ball.center, ball.radius, i, j)
            .into_iter()
            .map(|(x, y)| (x.clamp(bounds.lower()[i], bounds.upper()[i]), y.clamp(bounds.lower()[j], bounds.upper()[j])))
            .collect(),
    };
    if let Some(&first) = outline.first() {
        outline.push(first);
    }
    outline
}

fn circle(c: &DVector<f64>, r: f64, i: usize, j: usize) -> Vec<(f64, f64)> {
    (0..64)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / 64.0;
            (c[i] + r * a.cos(), c[j] + r * a.sin())
        })
        .collect()
}

/// Projection onto `(x_i, x_j)` with `X`, `X*`, the outline of `X_d`, the
/// stored orbits and the trajectory.
pub fn phase_svg(samples: &[(f64, DVector<f64>)], scenario_x: &BoxSet, xstar: &BoxSet, sets: &Sets, i: usize, j: usize) -> String {
    let side = 480.0;
    let mut svg = open_svg(side + 2.0 * MARGIN, side + 2.0 * MARGIN);
    let f = Frame::new(
        MARGIN,
        MARGIN,
        side,
        side,
        (scenario_x.lower()[i], scenario_x.upper()[i]),
        (scenario_x.lower()[j], scenario_x.upper()[j]),
    );
    f.axes(&mut svg, &format!("x{} vs x{}", i + 1, j + 1));
    f.polyline(&mut svg, &region_outline(&sets.xd.region, i, j), r##"stroke="#888" stroke-dasharray="2,3""##);
    f.polyline(&mut svg, &box_outline(xstar, i, j), r##"stroke="#c33" stroke-dasharray="5,4""##);
    for orbit in &sets.target.orbits {
        let pts: Vec<(f64, f64)> = orbit.iter().map(|p| (p[i], p[j])).collect();
        f.polyline(&mut svg, &pts, r##"stroke="#e90" stroke-width="0.6""##);
    }
    let pts: Vec<(f64, f64)> = samples.iter().map(|(_, x)| (x[i], x[j])).collect();
    f.polyline(&mut svg, &pts, r##"stroke="#226" stroke-width="0.8""##);
    svg.push_str("</svg>\n");
    svg
}

/// Writes `states.svg` and, for `n ≥ 2`, `phase.svg` into every run
/// directory of `out`. Returns the files written.
pub fn plot_dir(out: &Path) -> Result<Vec<PathBuf>> {
    let scenario_path = out.join("scenario.toml");
    let text = fs::read_to_string(&scenario_path).map_err(|e| CliError::io(&scenario_path, e))?;
    let scenario = Scenario::from_toml(&text)?;
    let built = scenario.build()?;
    let sets: Sets = read_json(&out.join("sets.json"))?;
    let mut written = Vec::new();
    for i in 0.. {
        let dir = crate::output::run_dir(out, i);
        if !dir.is_dir() {
            break;
        }
        let samples = read_trajectory_csv(&dir.join("trajectory.csv"))?;
        let jumps = read_jumps_csv(&dir.join("jumps.csv"))?;
        let p = dir.join("states.svg");
        fs::write(&p, states_svg(&samples, &jumps, &built.xstar)).map_err(|e| CliError::io(&p, e))?;
        written.push(p);
        if built.sys.dim() >= 2 {
            let p = dir.join("phase.svg");
            let svg = phase_svg(&samples, built.sys.state_bounds(), &built.xstar, &sets, 0, 1);
            fs::write(&p, svg).map_err(|e| CliError::io(&p, e))?;
            written.push(p);
        }
    }
    if written.is_empty() {
        return Err(CliError::Run(format!("no run directories under {}", out.display())));
    }
    Ok(written)
}
