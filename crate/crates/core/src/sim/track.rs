//! Procedural tracks: arc-length-parameterized centerlines built by
//! integrating curvature profiles, with optional forks.

use crate::geometry::Polyline;

/// Sample spacing along the centerline, meters.
pub const TRACK_DS: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackPoint {
    /// Arc length from the start, meters.
    pub s: f64,
    pub pos: [f64; 2],
    pub heading: f64,
    /// 1/m, signed (positive turns left).
    pub curvature: f64,
}

/// An alternative branch diverging from the route; the designated route
/// never takes it, but it is part of the road network and frames near
/// it are tagged as turn frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Fork {
    /// Arc length on the main line where the branch diverges.
    pub s: f64,
    pub branch: Vec<TrackPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub points: Vec<TrackPoint>,
    /// Lane half-width, meters.
    pub half_width: f64,
    /// Closed loop (arc length wraps).
    pub closed: bool,
    pub fork: Option<Fork>,
}

/// Integrate a curvature profile into a centerline with midpoint
/// heading updates.
fn integrate(
    kappa: impl Fn(f64) -> f64,
    length: f64,
    start: [f64; 2],
    start_heading: f64,
) -> Vec<TrackPoint> {
    let n = (length / TRACK_DS).round() as usize;
    let ds = length / n as f64;
    let mut points = Vec::with_capacity(n + 1);
    let (mut pos, mut heading) = (start, start_heading);
    for i in 0..=n {
        let s = i as f64 * ds;
        points.push(TrackPoint {
            s,
            pos,
            heading,
            curvature: kappa(s),
        });
        if i < n {
            let k = kappa(s + 0.5 * ds);
            let h_mid = heading + 0.5 * k * ds;
            pos[0] += ds * h_mid.cos();
            pos[1] += ds * h_mid.sin();
            heading += k * ds;
        }
    }
    points
}

impl Track {
    pub fn straight(length: f64, half_width: f64) -> Self {
        Self {
            points: integrate(|_| 0.0, length, [0.0, 0.0], 0.0),
            half_width,
            closed: false,
            fork: None,
        }
    }

    pub fn circle(radius: f64, half_width: f64) -> Self {
        let length = 2.0 * std::f64::consts::PI * radius;
        Self {
            points: integrate(|_| 1.0 / radius, length, [0.0, 0.0], 0.0),
            half_width,
            closed: true,
            fork: None,
        }
    }

    /// Sinusoidal curvature: alternating left/right sweeps.
    pub fn wavy(length: f64, kappa_amp: f64, wavelength: f64, half_width: f64) -> Self {
        let profile =
            move |s: f64| kappa_amp * (2.0 * std::f64::consts::PI * s / wavelength).sin();
        Self {
            points: integrate(profile, length, [0.0, 0.0], 0.0),
            half_width,
            closed: false,
            fork: None,
        }
    }

    /// Straight route with a constant-curvature branch peeling off at
    /// `fork_s`.
    pub fn forked(length: f64, fork_s: f64, half_width: f64) -> Self {
        let main = integrate(|_| 0.0, length, [0.0, 0.0], 0.0);
        let at = sample_points(&main, fork_s, false);
        let branch = integrate(|_| -0.02, 40.0, at.pos, at.heading);
        Self {
            points: main,
            half_width,
            closed: false,
            fork: Some(Fork { s: fork_s, branch }),
        }
    }

    pub fn total_length(&self) -> f64 {
        self.points.last().map(|p| p.s).unwrap_or(0.0)
    }

    fn wrap(&self, s: f64) -> f64 {
        let len = self.total_length();
        if self.closed {
            s.rem_euclid(len)
        } else {
            s.clamp(0.0, len)
        }
    }

    /// Interpolated centerline sample at arc length `s` (wrapped or
    /// clamped per track topology).
    pub fn sample(&self, s: f64) -> TrackPoint {
        sample_points(&self.points, self.wrap(s), self.closed)
    }

    /// Project a position onto the centerline near `s_hint`, returning
    /// (arc length, signed cross-track error). Positive error is left
    /// of the track direction.
    pub fn project(&self, pos: [f64; 2], s_hint: f64) -> (f64, f64) {
        let len = self.total_length();
        let lo = s_hint - 10.0;
        let hi = s_hint + 10.0;
        let mut best = (self.wrap(s_hint), f64::INFINITY);
        let steps = ((hi - lo) / (TRACK_DS * 0.5)).ceil() as usize;
        for i in 0..=steps {
            let s = lo + (hi - lo) * i as f64 / steps as f64;
            if !self.closed && !(0.0..=len).contains(&s) {
                continue;
            }
            let p = self.sample(s);
            let dx = pos[0] - p.pos[0];
            let dy = pos[1] - p.pos[1];
            let d2 = dx * dx + dy * dy;
            if d2 < best.1 {
                best = (self.wrap(s), d2);
            }
        }
        let p = self.sample(best.0);
        let dx = pos[0] - p.pos[0];
        let dy = pos[1] - p.pos[1];
        // Signed lateral offset: project onto the left normal.
        let left = [-p.heading.sin(), p.heading.cos()];
        (best.0, dx * left[0] + dy * left[1])
    }

    /// Left and right boundary polylines at the lane half-width.
    pub fn boundaries(&self) -> (Polyline, Polyline) {
        let offset = |sign: f64, pts: &[TrackPoint]| -> Polyline {
            pts.iter()
                .map(|p| {
                    let left = [-p.heading.sin(), p.heading.cos()];
                    [
                        p.pos[0] + sign * self.half_width * left[0],
                        p.pos[1] + sign * self.half_width * left[1],
                    ]
                })
                .collect()
        };
        let mut lefts = offset(1.0, &self.points);
        let mut rights = offset(-1.0, &self.points);
        if let Some(f) = &self.fork {
            lefts.extend(offset(1.0, &f.branch));
            rights.extend(offset(-1.0, &f.branch));
        }
        if self.closed {
            let (l0, r0) = (lefts[0], rights[0]);
            lefts.push(l0);
            rights.push(r0);
        }
        (lefts, rights)
    }

    /// Centerline as a plain polyline (for map rendering).
    pub fn centerline(&self) -> Polyline {
        self.points.iter().map(|p| p.pos).collect()
    }

    /// Road polylines for the routed map: the route plus any fork
    /// branch.
    pub fn roads(&self) -> Vec<Polyline> {
        let mut roads = vec![self.centerline()];
        if let Some(f) = &self.fork {
            roads.push(f.branch.iter().map(|p| p.pos).collect());
        }
        roads
    }

    /// Arc distance to the nearest fork divergence point, or infinity.
    pub fn fork_distance(&self, s: f64) -> f64 {
        match &self.fork {
            Some(f) => (self.wrap(s) - f.s).abs(),
            None => f64::INFINITY,
        }
    }
}

fn sample_points(points: &[TrackPoint], s: f64, closed: bool) -> TrackPoint {
    debug_assert!(!points.is_empty());
    let idx = points.partition_point(|p| p.s <= s);
    if idx == 0 {
        return points[0];
    }
    if idx >= points.len() {
        return *points.last().unwrap();
    }
    let (a, b) = (&points[idx - 1], &points[idx]);
    let t = (s - a.s) / (b.s - a.s);
    let lerp_angle = |x: f64, y: f64| {
        let mut d = y - x;
        if closed {
            d = (d + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI)
                - std::f64::consts::PI;
        }
        x + t * d
    };
    TrackPoint {
        s,
        pos: [
            a.pos[0] + t * (b.pos[0] - a.pos[0]),
            a.pos[1] + t * (b.pos[1] - a.pos[1]),
        ],
        heading: lerp_angle(a.heading, b.heading),
        curvature: a.curvature + t * (b.curvature - a.curvature),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn arc_length_strictly_increasing() {
        for t in [
            Track::straight(100.0, 4.0),
            Track::circle(30.0, 4.0),
            Track::wavy(200.0, 0.02, 80.0, 4.0),
            Track::forked(120.0, 60.0, 4.0),
        ] {
            for w in t.points.windows(2) {
                assert!(w[1].s > w[0].s);
            }
        }
    }

    #[test]
    fn circle_closes_on_itself() {
        let t = Track::circle(20.0, 4.0);
        let first = t.points.first().unwrap();
        let last = t.points.last().unwrap();
        let gap = ((first.pos[0] - last.pos[0]).powi(2) + (first.pos[1] - last.pos[1]).powi(2))
            .sqrt();
        assert!(gap < 0.05, "closure gap {gap}");
    }

    #[test]
    fn sample_interpolates_straight() {
        let t = Track::straight(100.0, 4.0);
        let p = t.sample(12.3);
        assert_relative_eq!(p.pos[0], 12.3, epsilon = 1e-9);
        assert_relative_eq!(p.pos[1], 0.0, epsilon = 1e-9);
        assert_relative_eq!(p.heading, 0.0);
    }

    #[test]
    fn project_recovers_arc_length_and_sign() {
        let t = Track::straight(100.0, 4.0);
        let (s, cte) = t.project([40.0, 0.7], 39.0);
        assert_relative_eq!(s, 40.0, epsilon = 0.3);
        assert_relative_eq!(cte, 0.7, epsilon = 1e-6);
        let (_, cte_r) = t.project([40.0, -1.2], 41.0);
        assert_relative_eq!(cte_r, -1.2, epsilon = 1e-6);
    }

    #[test]
    fn closed_track_wraps() {
        let t = Track::circle(20.0, 4.0);
        let len = t.total_length();
        let a = t.sample(5.0);
        let b = t.sample(5.0 + len);
        assert_relative_eq!(a.pos[0], b.pos[0], epsilon = 1e-9);
        assert_relative_eq!(a.pos[1], b.pos[1], epsilon = 1e-9);
    }

    #[test]
    fn wavy_curvature_bounded() {
        let t = Track::wavy(300.0, 0.05, 60.0, 4.0);
        assert!(t.points.iter().all(|p| p.curvature.abs() <= 0.05 + 1e-12));
        // Both directions appear.
        assert!(t.points.iter().any(|p| p.curvature > 0.03));
        assert!(t.points.iter().any(|p| p.curvature < -0.03));
    }

    #[test]
    fn boundaries_offset_by_half_width() {
        let t = Track::straight(50.0, 3.0);
        let (l, r) = t.boundaries();
        assert_relative_eq!(l[10][1], 3.0, epsilon = 1e-9);
        assert_relative_eq!(r[10][1], -3.0, epsilon = 1e-9);
    }

    #[test]
    fn fork_distance_and_roads() {
        let t = Track::forked(120.0, 60.0, 4.0);
        assert_relative_eq!(t.fork_distance(60.0), 0.0);
        assert_relative_eq!(t.fork_distance(50.0), 10.0);
        assert_eq!(t.roads().len(), 2);
        assert_eq!(Track::straight(50.0, 4.0).fork_distance(10.0), f64::INFINITY);
    }
}
