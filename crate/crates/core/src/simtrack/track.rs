use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, SimError};

/// Track file contents: a closed centerline in meters, traversed in list
/// order, and the distance from centerline to road edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackDefinition {
    pub name: String,
    pub half_width: f64,
    pub centerline: Vec<[f64; 2]>,
}

impl TrackDefinition {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| SimError::InvalidTrack(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }

    /// Stadium: two 50 m straights joined by 15 m half circles.
    pub fn oval() -> Self {
        let (straight, radius) = (50.0, 15.0);
        let mut pts = Vec::new();
        let n_straight = 50;
        let n_arc = 48;
        for i in 0..n_straight {
            pts.push([
                -straight / 2.0 + straight * i as f64 / n_straight as f64,
                -radius,
            ]);
        }
        for i in 0..n_arc {
            let a = -PI / 2.0 + PI * i as f64 / n_arc as f64;
            pts.push([straight / 2.0 + radius * a.cos(), radius * a.sin()]);
        }
        for i in 0..n_straight {
            pts.push([
                straight / 2.0 - straight * i as f64 / n_straight as f64,
                radius,
            ]);
        }
        for i in 0..n_arc {
            let a = PI / 2.0 + PI * i as f64 / n_arc as f64;
            pts.push([-straight / 2.0 + radius * a.cos(), radius * a.sin()]);
        }
        Self::rounded("oval", 4.0, pts)
    }

    /// Peanut-shaped loop whose waist bends the other way: curvature changes
    /// sign four times per lap, tightest radius ≈ 15 m.
    pub fn s_curve() -> Self {
        let n = 240;
        let pts = (0..n)
            .map(|i| {
                let phi = 2.0 * PI * i as f64 / n as f64;
                let r = 36.0 + 12.0 * (2.0 * phi).cos();
                [r * phi.cos(), 0.8 * r * phi.sin()]
            })
            .collect();
        Self::rounded("s-curve", 4.0, pts)
    }

    pub fn bundled(name: &str) -> Option<Self> {
        match name {
            "oval" => Some(Self::oval()),
            "s-curve" | "s_curve" | "scurve" => Some(Self::s_curve()),
            _ => None,
        }
    }

    /// Bundled name or path to a JSON track file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match Self::bundled(name_or_path) {
            Some(t) => Ok(t),
            None => Self::load(Path::new(name_or_path)),
        }
    }

    fn rounded(name: &str, half_width: f64, pts: Vec<[f64; 2]>) -> Self {
        let r = |v: f64| (v * 1000.0).round() / 1000.0;
        Self {
            name: name.into(),
            half_width,
            centerline: pts.into_iter().map(|[x, y]| [r(x), r(y)]).collect(),
        }
    }

    /// Same loop driven the other way round.
    pub fn reversed(&self) -> Self {
        let mut centerline = self.centerline.clone();
        centerline.reverse();
        Self {
            name: format!("{}-reversed", self.name),
            centerline,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pts = &self.centerline;
        let n = pts.len();
        if n < 8 {
            return Err(SimError::InvalidTrack(format!(
                "centerline needs at least 8 points, got {n}"
            )));
        }
        if !(self.half_width > 0.0 && self.half_width.is_finite()) {
            return Err(SimError::InvalidTrack(format!(
                "half width must be positive, got {}",
                self.half_width
            )));
        }
        if pts.iter().flatten().any(|v| !v.is_finite()) {
            return Err(SimError::InvalidTrack("non-finite coordinate".into()));
        }
        for i in 0..n {
            if pts[i] == pts[(i + 1) % n] {
                return Err(SimError::InvalidTrack(format!(
                    "points {i} and {} coincide",
                    (i + 1) % n
                )));
            }
        }
        for i in 0..n {
            for j in i + 2..n {
                if i == 0 && j == n - 1 {
                    continue;
                }
                let (a, b) = (pts[i], pts[(i + 1) % n]);
                let (c, d) = (pts[j], pts[(j + 1) % n]);
                if segments_cross(a, b, c, d) {
                    return Err(SimError::InvalidTrack(format!(
                        "centerline crosses itself (segments {i} and {j})"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn segments_cross(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let (o1, o2) = (orient(a, b, c), orient(a, b, d));
    let (o3, o4) = (orient(c, d, a), orient(c, d, b));
    if o1 * o2 < 0.0 && o3 * o4 < 0.0 {
        return true;
    }
    let on = |p: [f64; 2], q: [f64; 2], r: [f64; 2], o: f64| {
        o == 0.0
            && r[0] >= p[0].min(q[0])
            && r[0] <= p[0].max(q[0])
            && r[1] >= p[1].min(q[1])
            && r[1] <= p[1].max(q[1])
    };
    on(a, b, c, o1) || on(a, b, d, o2) || on(c, d, a, o3) || on(c, d, b, o4)
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    start: [f64; 2],
    dir: [f64; 2],
    len: f64,
    s0: f64,
}

/// Nearest centerline point to a query position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub segment: usize,
    /// Arc length of the nearest point from the first centerline point.
    pub s: f64,
    pub point: [f64; 2],
    /// Signed distance, positive to the right of the travel direction.
    pub offset: f64,
    pub distance: f64,
}

/// A validated track with precomputed segment geometry.
#[derive(Debug, Clone)]
pub struct Track {
    def: TrackDefinition,
    segments: Vec<Segment>,
    length: f64,
}

impl Track {
    pub fn new(def: TrackDefinition) -> Result<Self> {
        def.validate()?;
        let pts = &def.centerline;
        let n = pts.len();
        let mut segments = Vec::with_capacity(n);
        let mut s0 = 0.0;
        for i in 0..n {
            let (a, b) = (pts[i], pts[(i + 1) % n]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len = dx.hypot(dy);
            segments.push(Segment {
                start: a,
                dir: [dx / len, dy / len],
                len,
                s0,
            });
            s0 += len;
        }
        Ok(Self {
            def,
            segments,
            length: s0,
        })
    }

    pub fn definition(&self) -> &TrackDefinition {
        &self.def
    }

    pub fn name(&self) -> &str {
        &self.def.name
    }

    pub fn half_width(&self) -> f64 {
        self.def.half_width
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    fn project_on(&self, i: usize, p: [f64; 2]) -> Projection {
        let seg = &self.segments[i];
        let (rx, ry) = (p[0] - seg.start[0], p[1] - seg.start[1]);
        let t = (rx * seg.dir[0] + ry * seg.dir[1]).clamp(0.0, seg.len);
        let q = [seg.start[0] + t * seg.dir[0], seg.start[1] + t * seg.dir[1]];
        let (ex, ey) = (p[0] - q[0], p[1] - q[1]);
        let distance = ex.hypot(ey);
        // Right-hand normal of direction (c, s) is (-s, c).
        let side = -ex * seg.dir[1] + ey * seg.dir[0];
        Projection {
            segment: i,
            s: seg.s0 + t,
            point: q,
            offset: if side < 0.0 { -distance } else { distance },
            distance,
        }
    }

    /// Exhaustive nearest-segment search.
    pub fn project(&self, p: [f64; 2]) -> Projection {
        (0..self.segments.len())
            .map(|i| self.project_on(i, p))
            .reduce(|best, c| if c.distance < best.distance { c } else { best })
            .expect("validated track has segments")
    }

    /// Local descent from segment `hint`; agrees with [`Track::project`] for
    /// points near the road close to the hint.
    pub fn project_near(&self, p: [f64; 2], hint: usize) -> Projection {
        let n = self.segments.len();
        let mut best = self.project_on(hint % n, p);
        loop {
            let fwd = self.project_on((best.segment + 1) % n, p);
            if fwd.distance < best.distance {
                best = fwd;
                continue;
            }
            let back = self.project_on((best.segment + n - 1) % n, p);
            if back.distance < best.distance {
                best = back;
                continue;
            }
            return best;
        }
    }

    /// Centerline point and unit travel direction at arc length `s` (wrapped).
    pub fn point_at(&self, s: f64) -> ([f64; 2], [f64; 2]) {
        let s = s.rem_euclid(self.length);
        let i = self
            .segments
            .partition_point(|seg| seg.s0 <= s)
            .saturating_sub(1);
        let seg = &self.segments[i];
        let t = (s - seg.s0).min(seg.len);
        (
            [seg.start[0] + t * seg.dir[0], seg.start[1] + t * seg.dir[1]],
            seg.dir,
        )
    }

    /// Heading (this crate's convention) of the travel direction at `s`.
    pub fn heading_at(&self, s: f64) -> f64 {
        let (_, d) = self.point_at(s);
        d[1].atan2(d[0])
    }
}
