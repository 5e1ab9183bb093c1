//! Trace exports: per-step CSV tables and a top-down SVG of the vehicle paths.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use brrace_core::sim::TraceRow;
use brrace_core::TrackMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Plot {
    Xy,
    Speed,
    Costs,
}

impl Plot {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "xy" => Some(Plot::Xy),
            "speed" => Some(Plot::Speed),
            "costs" => Some(Plot::Costs),
            _ => None,
        }
    }
}

pub const SPEED_HEADER: [&str; 8] = ["step", "t", "id", "v_x", "v_y", "speed", "progress", "laps"];
pub const COSTS_HEADER: [&str; 5] = ["step", "t", "id", "cost", "plan_cost"];

/// One line per vehicle per step. Floats use the shortest round-trip form.
pub fn write_speed_csv<W: Write>(rows: &[TraceRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SPEED_HEADER)?;
    for row in rows {
        for v in &row.vehicles {
            let s = &v.state;
            w.write_record([
                row.step.to_string(),
                row.t.to_string(),
                v.id.to_string(),
                s.v_x.to_string(),
                s.v_y.to_string(),
                s.v_x.hypot(s.v_y).to_string(),
                v.progress.to_string(),
                v.laps.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `plan_cost` is empty on steps without a replan.
pub fn write_costs_csv<W: Write>(rows: &[TraceRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COSTS_HEADER)?;
    for row in rows {
        for v in &row.vehicles {
            w.write_record([
                row.step.to_string(),
                row.t.to_string(),
                v.id.to_string(),
                v.cost.to_string(),
                v.plan_cost.map(|c| c.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

const PALETTE: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Vehicle paths keyed by id, in world coordinates.
pub fn paths(rows: &[TraceRow]) -> BTreeMap<u8, Vec<[f64; 2]>> {
    let mut out: BTreeMap<u8, Vec<[f64; 2]>> = BTreeMap::new();
    for row in rows {
        for v in &row.vehicles {
            out.entry(v.id).or_default().push([v.state.x, v.state.y]);
        }
    }
    out
}

fn points(pts: &[[f64; 2]]) -> String {
    let mut s = String::with_capacity(pts.len() * 16);
    for (i, p) in pts.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{:.4},{:.4}", p[0], p[1]);
    }
    s
}

/// Track boundary at `lateral` metres from the centerline, one point per
/// centerline vertex.
fn edge(track: &TrackMap, lateral: f64) -> Vec<[f64; 2]> {
    let len = track.length();
    track
        .arc_table()
        .iter()
        .map(|&s| {
            let (x, y, _) = track.pose_at(s / len, lateral);
            [x, y]
        })
        .collect()
}

/// Top-down plot: track outline, centerline, and one polyline per vehicle.
///
/// Every coordinate in the document is a world coordinate in metres; the
/// outer group flips the y axis so north is up.
pub fn render_xy(rows: &[TraceRow], track: &TrackMap) -> String {
    let left = edge(track, track.half_width());
    let right = edge(track, -track.half_width());
    let paths = paths(rows);

    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in left.iter().chain(&right).chain(paths.values().flatten()) {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let margin = 2.0;
    let (w, h) = (hi[0] - lo[0] + 2.0 * margin, hi[1] - lo[1] + 2.0 * margin);
    let scale = 20.0;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" viewBox="{:.4} {:.4} {:.4} {:.4}">"#,
        w * scale,
        h * scale,
        lo[0] - margin,
        -(hi[1] + margin),
        w,
        h
    );
    svg.push_str(r#"<rect class="background" x="-100000" y="-100000" width="200000" height="200000" fill="white"/>"#);
    svg.push('\n');
    svg.push_str("<g transform=\"scale(1,-1)\">\n");
    for (class, pts, style) in [
        ("edge", &left, r#"stroke="black" stroke-width="0.08""#),
        ("edge", &right, r#"stroke="black" stroke-width="0.08""#),
        ("centerline", &track.centerline().to_vec(), r##"stroke="#999999" stroke-width="0.04" stroke-dasharray="0.4 0.4""##),
    ] {
        let _ = writeln!(
            svg,
            r#"<polygon class="{class}" fill="none" {style} points="{}"/>"#,
            points(pts)
        );
    }
    for (i, (id, pts)) in paths.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            svg,
            r#"<polyline class="path" data-vehicle="{id}" fill="none" stroke="{color}" stroke-width="0.1" points="{}"/>"#,
            points(pts)
        );
        if let Some(p) = pts.first() {
            let _ = writeln!(
                svg,
                r#"<circle class="start" data-vehicle="{id}" cx="{:.4}" cy="{:.4}" r="0.25" fill="{color}"/>"#,
                p[0], p[1]
            );
        }
    }
    svg.push_str("</g>\n");
    // Legend in screen space (text would be mirrored inside the flipped group).
    for (i, id) in paths.keys().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            svg,
            r#"<text x="{:.4}" y="{:.4}" font-size="1" fill="{color}">vehicle {id}</text>"#,
            lo[0] - margin + 0.5,
            -(hi[1] + margin) + 1.5 + i as f64 * 1.2
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Reads back the vehicle polylines of an SVG written by [`render_xy`].
pub fn svg_paths(svg: &str) -> BTreeMap<u8, Vec<[f64; 2]>> {
    let mut out = BTreeMap::new();
    for line in svg.lines().filter(|l| l.starts_with("<polyline class=\"path\"")) {
        let attr = |name: &str| {
            let key = format!("{name}=\"");
            let start = line.find(&key)? + key.len();
            let end = line[start..].find('"')? + start;
            Some(&line[start..end])
        };
        let (Some(id), Some(pts)) = (attr("data-vehicle"), attr("points")) else {
            continue;
        };
        let Ok(id) = id.parse::<u8>() else { continue };
        let parsed = pts
            .split_whitespace()
            .filter_map(|p| {
                let (x, y) = p.split_once(',')?;
                Some([x.parse().ok()?, y.parse().ok()?])
            })
            .collect();
        out.insert(id, parsed);
    }
    out
}
