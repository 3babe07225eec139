//! Plot-ready layers and small SVG renderings of phase portraits and time series.

use std::fmt::Write as _;
use std::io::{self, Write};

use crate::dynamics::Trajectory;
use crate::geometry::{Region, SafetyGeometry};

const PALETTE: [&str; 6] = ["#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"];
/// Polylines are thinned to at most this many vertices.
const MAX_VERTICES: usize = 1500;

/// Indices of a thinned trajectory, always keeping the last sample.
pub fn decimate(len: usize, max: usize) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let stride = len.div_ceil(max.max(2) - 1).max(1);
    let mut idx: Vec<usize> = (0..len).step_by(stride).collect();
    if *idx.last().unwrap() != len - 1 {
        idx.push(len - 1);
    }
    idx
}

pub fn write_boundary_layer<W: Write>(mut w: W, region: &Region, per_disk: usize) -> io::Result<()> {
    writeln!(w, "x1,x2")?;
    if region.dim() != 2 {
        return Ok(());
    }
    let pts = region
        .boundary_samples(per_disk)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
    for p in pts {
        writeln!(w, "{},{}", p[0], p[1])?;
    }
    Ok(())
}

pub fn write_trajectory_layer<W: Write>(mut w: W, trajs: &[Trajectory]) -> io::Result<()> {
    let n = trajs.first().and_then(|t| t.states.first()).map_or(0, Vec::len);
    let mut header = vec!["trajectory".to_string(), "t".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    writeln!(w, "{}", header.join(","))?;
    for (k, tr) in trajs.iter().enumerate() {
        for i in decimate(tr.len(), MAX_VERTICES) {
            write!(w, "{k},{}", tr.times[i])?;
            for v in &tr.states[i] {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
    left: f64,
    top: f64,
    width: f64,
    height: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        self.left + (x - self.x.0) / (self.x.1 - self.x.0) * self.width
    }

    fn py(&self, y: f64) -> f64 {
        self.top + self.height - (y - self.y.0) / (self.y.1 - self.y.0) * self.height
    }

    fn axes(&self, s: &mut String, xlabel: &str, ylabel: &str) {
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
            self.left, self.top, self.width, self.height
        );
        let b = self.top + self.height;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="12">{:.3}</text><text x="{:.2}" y="{:.2}" font-size="12" text-anchor="end">{:.3}</text>"#,
            self.left,
            b + 14.0,
            self.x.0,
            self.left + self.width,
            b + 14.0,
            self.x.1
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="end">{:.3}</text><text x="{:.2}" y="{:.2}" font-size="12" text-anchor="end">{:.3}</text>"#,
            self.left - 4.0,
            b,
            self.y.0,
            self.left - 4.0,
            self.top + 10.0,
            self.y.1
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle">{xlabel}</text>"#,
            self.left + self.width / 2.0,
            b + 28.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle" transform="rotate(-90 {:.2} {:.2})">{ylabel}</text>"#,
            self.left - 30.0,
            self.top + self.height / 2.0,
            self.left - 30.0,
            self.top + self.height / 2.0
        );
    }

    fn polyline(&self, s: &mut String, pts: impl Iterator<Item = (f64, f64)>, color: &str) {
        let coords: Vec<String> = pts.map(|(x, y)| format!("{:.2},{:.2}", self.px(x), self.py(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
    }
}

fn circles(region: &Region) -> Vec<([f64; 2], f64)> {
    region
        .balls()
        .into_iter()
        .filter(|b| b.center.len() == 2)
        .map(|b| ([b.center[0], b.center[1]], b.radius))
        .collect()
}

/// Planar portrait: unsafe set filled, locality dashed, one polyline per trajectory.
pub fn portrait_svg(geom: &SafetyGeometry, trajs: &[Trajectory], window: [(f64, f64); 2]) -> String {
    let f = Frame {
        x: window[0],
        y: window[1],
        left: 60.0,
        top: 20.0,
        width: 520.0,
        height: 520.0,
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="620" height="600" viewBox="0 0 620 600">"#
    );
    let _ = writeln!(s, r#"<rect width="620" height="600" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<clipPath id="frame"><rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}"/></clipPath><g clip-path="url(#frame)">"#,
        f.left, f.top, f.width, f.height
    );
    let sx = f.width / (f.x.1 - f.x.0);
    let sy = f.height / (f.y.1 - f.y.0);
    for (c, r) in circles(&geom.unsafe_set) {
        let _ = writeln!(
            s,
            r##"<ellipse cx="{:.2}" cy="{:.2}" rx="{:.2}" ry="{:.2}" fill="#d62728" fill-opacity="0.45" stroke="#d62728"/>"##,
            f.px(c[0]),
            f.py(c[1]),
            r * sx,
            r * sy
        );
    }
    for (c, r) in circles(&geom.locality) {
        let _ = writeln!(
            s,
            r#"<ellipse cx="{:.2}" cy="{:.2}" rx="{:.2}" ry="{:.2}" fill="none" stroke="black" stroke-dasharray="6,4"/>"#,
            f.px(c[0]),
            f.py(c[1]),
            r * sx,
            r * sy
        );
    }
    for (k, tr) in trajs.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let idx = decimate(tr.len(), MAX_VERTICES);
        f.polyline(&mut s, idx.iter().map(|&i| (tr.states[i][0], tr.states[i][1])), color);
        if let Some(x0) = tr.states.first() {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}"/>"#,
                f.px(x0[0]),
                f.py(x0[1])
            );
        }
    }
    let _ = writeln!(s, "</g>");
    f.axes(&mut s, "x1", "x2");
    let _ = writeln!(s, "</svg>");
    s
}

fn range_of(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

/// Three stacked panels: `‖x(t)‖`, `|x(t)|_D` and the input components.
pub fn timeseries_svg(tr: &Trajectory) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="700" height="660" viewBox="0 0 700 660">"#
    );
    let _ = writeln!(s, r#"<rect width="700" height="660" fill="white"/>"#);
    let idx = decimate(tr.len(), MAX_VERTICES);
    let t_range = (
        tr.times.first().copied().unwrap_or(0.0),
        tr.times.last().copied().unwrap_or(1.0).max(1e-12),
    );
    let panels: [(&str, Vec<Vec<f64>>); 3] = [
        ("|x(t)|", vec![tr.norm_x.clone()]),
        ("dist to D", vec![tr.dist_to_d.clone()]),
        (
            "u(t)",
            (0..tr.inputs.first().map_or(0, Vec::len))
                .map(|j| tr.inputs.iter().map(|u| u[j]).collect())
                .collect(),
        ),
    ];
    for (p, (label, series)) in panels.iter().enumerate() {
        let y = range_of(series.iter().flat_map(|v| idx.iter().map(move |&i| v[i])));
        let f = Frame {
            x: t_range,
            y,
            left: 70.0,
            top: 20.0 + p as f64 * 215.0,
            width: 600.0,
            height: 165.0,
        };
        for (k, v) in series.iter().enumerate() {
            f.polyline(&mut s, idx.iter().map(|&i| (tr.times[i], v[i])), PALETTE[k % PALETTE.len()]);
        }
        f.axes(&mut s, "t", label);
    }
    let _ = writeln!(s, "</svg>");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decimation_keeps_ends() {
        let idx = decimate(10_001, 1500);
        assert_eq!(idx[0], 0);
        assert_eq!(*idx.last().unwrap(), 10_000);
        assert!(idx.len() <= 1500);
        assert_eq!(decimate(3, 1500), vec![0, 1, 2]);
        assert!(decimate(0, 10).is_empty());
    }

    #[test]
    fn geometry_only_portrait() {
        let g = SafetyGeometry::new(Region::disk([4.0, 6.0], 2.0), Region::disk([4.0, 6.0], 3.0)).unwrap();
        let svg = portrait_svg(&g, &[], [(-10.0, 12.0), (-10.0, 12.0)]);
        assert!(svg.contains("<ellipse") && !svg.contains("<polyline"));
    }
}
