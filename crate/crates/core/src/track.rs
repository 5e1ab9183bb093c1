//! Closed-course track geometry.
//!
//! Nearest-segment queries are answered through a uniform grid whose cells
//! list every segment that can be nearest to any point inside the cell, so
//! the accelerated lookup returns exactly what a linear scan would.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const GRID_CELL: f64 = 0.5;
const GRID_MARGIN: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub segment: usize,
    /// Position along the segment in `[0, 1]`.
    pub t: f64,
    /// Signed distance from the centerline, positive to the left of travel.
    pub lateral: f64,
    /// Arc length of the projected point from the start line.
    pub arc: f64,
}

#[derive(Debug, Clone)]
struct Segment {
    start: [f64; 2],
    dir: [f64; 2],
    len: f64,
}

impl Segment {
    /// `(t, squared distance, signed lateral)` of `p` against this segment.
    #[inline]
    fn project(&self, p: [f64; 2]) -> (f64, f64, f64) {
        let dx = p[0] - self.start[0];
        let dy = p[1] - self.start[1];
        let along = (dx * self.dir[0] + dy * self.dir[1]).clamp(0.0, self.len);
        let ex = dx - along * self.dir[0];
        let ey = dy - along * self.dir[1];
        let dist2 = ex * ex + ey * ey;
        let cross = self.dir[0] * dy - self.dir[1] * dx;
        let lateral = dist2.sqrt().copysign(cross);
        (along / self.len, dist2, lateral)
    }
}

#[derive(Debug, Clone)]
struct Grid {
    origin: [f64; 2],
    nx: usize,
    ny: usize,
    offsets: Vec<u32>,
    items: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct TrackMap {
    centerline: Vec<[f64; 2]>,
    half_width: f64,
    /// Arc length at each centerline point; last entry is the loop length.
    arc_table: Vec<f64>,
    segments: Vec<Segment>,
    grid: Grid,
}

#[derive(Serialize, Deserialize)]
struct TrackFile {
    half_width: f64,
    centerline: Vec<[f64; 2]>,
}

impl TrackMap {
    pub fn new(centerline: Vec<[f64; 2]>, half_width: f64) -> Result<Self> {
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(Error::invalid("track.half_width", "must be positive"));
        }
        if centerline.len() < 8 {
            return Err(Error::invalid(
                "track.centerline",
                format!("needs at least 8 points, got {}", centerline.len()),
            ));
        }
        if centerline.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::invalid("track.centerline", "contains non-finite points"));
        }
        let n = centerline.len();
        let mut segments = Vec::with_capacity(n);
        let mut arc_table = Vec::with_capacity(n + 1);
        arc_table.push(0.0);
        for i in 0..n {
            let a = centerline[i];
            let b = centerline[(i + 1) % n];
            let len = (b[0] - a[0]).hypot(b[1] - a[1]);
            if len <= 0.0 {
                return Err(Error::invalid(
                    "track.centerline",
                    format!("points {i} and {} coincide", (i + 1) % n),
                ));
            }
            segments.push(Segment {
                start: a,
                dir: [(b[0] - a[0]) / len, (b[1] - a[1]) / len],
                len,
            });
            arc_table.push(arc_table[i] + len);
        }
        let grid = build_grid(&centerline, &segments);
        Ok(Self {
            centerline,
            half_width,
            arc_table,
            segments,
            grid,
        })
    }

    /// Stadium oval: two straights joined by semicircular turns, driven
    /// counter-clockwise starting at the left end of the lower straight.
    pub fn stadium(straight: f64, radius: f64, half_width: f64, spacing: f64) -> Result<Self> {
        if !(straight > 0.0 && radius > 0.0 && spacing > 0.0) {
            return Err(Error::invalid(
                "track",
                "stadium dimensions must be positive",
            ));
        }
        let turn = PI * radius;
        let length = 2.0 * straight + 2.0 * turn;
        let n = (length / spacing).round().max(8.0) as usize;
        let half = straight / 2.0;
        let points = (0..n)
            .map(|i| {
                let s = length * i as f64 / n as f64;
                if s < straight {
                    [-half + s, -radius]
                } else if s < straight + turn {
                    let th = -PI / 2.0 + (s - straight) / radius;
                    [half + radius * th.cos(), radius * th.sin()]
                } else if s < 2.0 * straight + turn {
                    [half - (s - straight - turn), radius]
                } else {
                    let th = PI / 2.0 + (s - 2.0 * straight - turn) / radius;
                    [-half + radius * th.cos(), radius * th.sin()]
                }
            })
            .collect();
        Self::new(points, half_width)
    }

    /// The default course: 30 m straights, 10 m turn radius, 3 m wide.
    pub fn default_oval() -> Self {
        Self::stadium(30.0, 10.0, 1.5, 0.5).expect("default oval is valid")
    }

    /// Circle of `n` points centered on the origin, counter-clockwise from `(r, 0)`.
    pub fn circle(radius: f64, n: usize, half_width: f64) -> Result<Self> {
        let points = (0..n)
            .map(|i| {
                let th = 2.0 * PI * i as f64 / n as f64;
                [radius * th.cos(), radius * th.sin()]
            })
            .collect();
        Self::new(points, half_width)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: TrackFile = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        Self::new(file.centerline, file.half_width)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&TrackFile {
            half_width: self.half_width,
            centerline: self.centerline.clone(),
        })
        .expect("track serializes")
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn centerline(&self) -> &[[f64; 2]] {
        &self.centerline
    }

    pub fn arc_table(&self) -> &[f64] {
        &self.arc_table
    }

    pub fn length(&self) -> f64 {
        self.arc_table[self.arc_table.len() - 1]
    }

    pub fn project(&self, x: f64, y: f64) -> Projection {
        let p = [x, y];
        let (best, t, lateral) = match self.grid.cell(p) {
            Some(range) => self.nearest(p, self.grid.items[range].iter().map(|&i| i as usize)),
            None => self.nearest(p, 0..self.segments.len()),
        };
        Projection {
            segment: best,
            t,
            lateral,
            arc: self.arc_table[best] + t * self.segments[best].len,
        }
    }

    /// Linear scan over every segment; the reference the grid must agree with.
    pub fn project_brute_force(&self, x: f64, y: f64) -> Projection {
        let (best, t, lateral) = self.nearest([x, y], 0..self.segments.len());
        Projection {
            segment: best,
            t,
            lateral,
            arc: self.arc_table[best] + t * self.segments[best].len,
        }
    }

    #[inline]
    fn nearest(&self, p: [f64; 2], candidates: impl Iterator<Item = usize>) -> (usize, f64, f64) {
        let mut best = (usize::MAX, 0.0, 0.0);
        let mut best_d2 = f64::INFINITY;
        for i in candidates {
            let (t, d2, lat) = self.segments[i].project(p);
            if d2 < best_d2 || (d2 == best_d2 && i < best.0) {
                best_d2 = d2;
                best = (i, t, lat);
            }
        }
        best
    }

    pub fn lateral_offset(&self, x: f64, y: f64) -> f64 {
        self.project(x, y).lateral
    }

    /// Fraction of the loop covered at the nearest centerline point, in `[0, 1)`.
    pub fn progress(&self, x: f64, y: f64) -> f64 {
        let frac = self.project(x, y).arc / self.length();
        if frac >= 1.0 {
            frac - 1.0
        } else {
            frac
        }
    }

    /// World pose at a given progress fraction and lateral offset (left positive).
    pub fn pose_at(&self, progress: f64, lateral: f64) -> (f64, f64, f64) {
        let s = progress.rem_euclid(1.0) * self.length();
        let i = match self
            .arc_table
            .binary_search_by(|a| a.partial_cmp(&s).expect("finite arc table"))
        {
            Ok(i) => i.min(self.segments.len() - 1),
            Err(i) => i - 1,
        };
        let seg = &self.segments[i];
        let along = s - self.arc_table[i];
        let x = seg.start[0] + along * seg.dir[0] - lateral * seg.dir[1];
        let y = seg.start[1] + along * seg.dir[1] + lateral * seg.dir[0];
        (x, y, seg.dir[1].atan2(seg.dir[0]))
    }
}

impl Grid {
    #[inline]
    fn cell(&self, p: [f64; 2]) -> Option<std::ops::Range<usize>> {
        let fx = (p[0] - self.origin[0]) / GRID_CELL;
        let fy = (p[1] - self.origin[1]) / GRID_CELL;
        if !(fx >= 0.0 && fy >= 0.0) {
            return None;
        }
        let (cx, cy) = (fx as usize, fy as usize);
        if cx >= self.nx || cy >= self.ny {
            return None;
        }
        let c = cy * self.nx + cx;
        Some(self.offsets[c] as usize..self.offsets[c + 1] as usize)
    }
}

fn build_grid(points: &[[f64; 2]], segments: &[Segment]) -> Grid {
    let min_x = points.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min) - GRID_MARGIN;
    let min_y = points.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min) - GRID_MARGIN;
    let max_x = points.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max) + GRID_MARGIN;
    let max_y = points.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max) + GRID_MARGIN;
    let nx = ((max_x - min_x) / GRID_CELL).ceil() as usize;
    let ny = ((max_y - min_y) / GRID_CELL).ceil() as usize;
    // Any point in a cell lies within half a diagonal of its center, so the
    // nearest segment of such a point is within one diagonal of the center's
    // own nearest distance.
    let reach = GRID_CELL * std::f64::consts::SQRT_2 * (1.0 + 1e-9);

    let mut offsets = Vec::with_capacity(nx * ny + 1);
    let mut items = Vec::new();
    let mut dists = vec![0.0; segments.len()];
    offsets.push(0u32);
    for cy in 0..ny {
        for cx in 0..nx {
            let c = [
                min_x + (cx as f64 + 0.5) * GRID_CELL,
                min_y + (cy as f64 + 0.5) * GRID_CELL,
            ];
            let mut d_min = f64::INFINITY;
            for (d, seg) in dists.iter_mut().zip(segments) {
                *d = seg.project(c).1.sqrt();
                d_min = d_min.min(*d);
            }
            for (i, d) in dists.iter().enumerate() {
                if *d <= d_min + reach {
                    items.push(i as u32);
                }
            }
            offsets.push(items.len() as u32);
        }
    }
    Grid {
        origin: [min_x, min_y],
        nx,
        ny,
        offsets,
        items,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_lookup_matches_linear_scan() {
        let track = TrackMap::default_oval();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20_000 {
            let x = rng.gen_range(-35.0..35.0);
            let y = rng.gen_range(-20.0..20.0);
            let fast = track.project(x, y);
            let slow = track.project_brute_force(x, y);
            assert_eq!(fast.lateral.abs(), slow.lateral.abs(), "at ({x}, {y})");
            assert_eq!(fast.segment, slow.segment, "at ({x}, {y})");
        }
    }

    #[test]
    fn points_outside_grid_still_project() {
        let track = TrackMap::default_oval();
        let p = track.project(100.0, 0.0);
        assert!(p.lateral.abs() > 70.0);
    }

    #[test]
    fn stadium_geometry() {
        let track = TrackMap::default_oval();
        let expected = 60.0 + 2.0 * PI * 10.0;
        assert!((track.length() - expected).abs() / expected < 1e-3);
        assert_eq!(track.half_width(), 1.5);
        assert_eq!(track.progress(-15.0, -10.0), 0.0);
        // Lower straight: left of travel (+x) is +y, towards the infield.
        assert!((track.lateral_offset(0.0, -9.0) - 1.0).abs() < 1e-12);
        assert!((track.lateral_offset(0.0, -11.0) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pose_at_round_trips_through_projection() {
        let track = TrackMap::default_oval();
        for i in 0..50 {
            let prog = i as f64 / 50.0;
            let (x, y, _) = track.pose_at(prog, 0.4);
            let p = track.project(x, y);
            // On the polygonal turns an inward offset at a vertex lands
            // slightly closer to the previous segment.
            assert!((p.lateral - 0.4).abs() < 1e-3, "{prog}: {}", p.lateral);
            let back = track.progress(x, y);
            let gap = (back - prog).abs().min(1.0 - (back - prog).abs());
            assert!(gap < 1e-3, "{prog} -> {back}");
        }
    }

    #[test]
    fn validation() {
        let pts: Vec<[f64; 2]> = (0..8).map(|i| [i as f64, (i % 2) as f64]).collect();
        assert!(TrackMap::new(pts.clone(), 0.0).is_err());
        assert!(TrackMap::new(pts[..7].to_vec(), 1.0).is_err());
        let mut dup = pts.clone();
        dup[3] = dup[2];
        assert!(TrackMap::new(dup, 1.0).is_err());
        let mut closed = pts.clone();
        closed.push(pts[0]);
        assert!(TrackMap::new(closed, 1.0).is_err());
        assert!(TrackMap::new(pts, 1.0).is_ok());
    }

    #[test]
    fn json_round_trip() {
        let track = TrackMap::circle(5.0, 32, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        std::fs::write(&path, track.to_json()).unwrap();
        let back = TrackMap::load(&path).unwrap();
        assert_eq!(back.centerline(), track.centerline());
        assert!(TrackMap::load(&dir.path().join("missing.json")).is_err());
    }
}
