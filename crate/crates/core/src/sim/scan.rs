//! Synthetic 360-degree LiDAR: ray-cast lane boundary walls plus ground
//! returns, with Gaussian range noise and injectable sensor failures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{Point, PointCloud, Pose2};

use super::track::Track;

/// Azimuth steps over 360 degrees (0.5 degree resolution).
pub const NUM_RAYS: usize = 720;
/// Max usable range, meters.
pub const MAX_RANGE: f64 = 50.0;
/// Boundary segments farther than this from the sensor are skipped
/// before intersection testing.
const PRUNE_RANGE: f64 = 55.0;
/// Range noise sigma, meters.
const RANGE_SIGMA: f64 = 0.03;
/// Sensor height above the road surface, meters.
const SENSOR_HEIGHT: f64 = 0.3;
/// Boundary walls are sampled at these heights above the road.
const WALL_HEIGHTS: [f64; 3] = [0.1, 0.3, 0.5];
const WALL_INTENSITY: f64 = 1.0;
const GROUND_INTENSITY: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    EmptyCloud,
    FrozenCloud,
}

impl FailureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureKind::EmptyCloud => "empty_cloud",
            FailureKind::FrozenCloud => "frozen_cloud",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "empty_cloud" => Some(FailureKind::EmptyCloud),
            "frozen_cloud" => Some(FailureKind::FrozenCloud),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FailureSchedule {
    /// Meters between failure onsets.
    pub period: f64,
    /// Meters each failure lasts.
    pub duration: f64,
    pub kind: FailureKind,
}

impl FailureSchedule {
    pub fn new(period: f64, duration: f64, kind: FailureKind) -> Self {
        assert!(period > duration && duration > 0.0);
        Self {
            period,
            duration,
            kind,
        }
    }

    /// Failures cover travelled distances with d mod period in
    /// [0, duration).
    pub fn active(&self, d: f64) -> bool {
        d.rem_euclid(self.period) < self.duration
    }
}

/// Gaussian draw via Box-Muller; fixed two-uniform cost keeps the
/// per-ray draw count constant.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn ray_segment_hit(origin: [f64; 2], dir: [f64; 2], a: [f64; 2], b: [f64; 2]) -> Option<f64> {
    let sx = b[0] - a[0];
    let sy = b[1] - a[1];
    let denom = dir[0] * sy - dir[1] * sx;
    if denom.abs() < 1e-12 {
        return None;
    }
    let qx = a[0] - origin[0];
    let qy = a[1] - origin[1];
    let t = (qx * sy - qy * sx) / denom;
    let u = (qx * dir[1] - qy * dir[0]) / -denom;
    if t > 0.0 && (0.0..=1.0).contains(&u) {
        Some(t)
    } else {
        None
    }
}

/// One clean (failure-free) scan in the ego frame: x forward, y left,
/// z up from the sensor.
pub fn scan_clean(track: &Track, pose: &Pose2, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin = [pose.x, pose.y];
    let (lefts, rights) = track.boundaries();
    let mut segments: Vec<([f64; 2], [f64; 2])> = Vec::new();
    for line in [&lefts, &rights] {
        for seg in line.windows(2) {
            let near = |p: [f64; 2]| {
                let dx = p[0] - origin[0];
                let dy = p[1] - origin[1];
                dx * dx + dy * dy <= PRUNE_RANGE * PRUNE_RANGE
            };
            if near(seg[0]) || near(seg[1]) {
                segments.push((seg[0], seg[1]));
            }
        }
    }

    let (sin_h, cos_h) = pose.heading.sin_cos();
    let mut points = Vec::new();
    for ray in 0..NUM_RAYS {
        let az = 2.0 * std::f64::consts::PI * ray as f64 / NUM_RAYS as f64;
        let (sin_a, cos_a) = az.sin_cos();
        // Ego azimuth 0 points forward.
        let dir = [
            cos_h * cos_a - sin_h * sin_a,
            sin_h * cos_a + cos_h * sin_a,
        ];
        let mut hit = f64::INFINITY;
        for &(a, b) in &segments {
            if let Some(t) = ray_segment_hit(origin, dir, a, b) {
                hit = hit.min(t);
            }
        }
        // Fixed draw schedule per ray: wall noise x3, ground u, ground noise.
        let wall_noise = [gauss(&mut rng), gauss(&mut rng), gauss(&mut rng)];
        let ground_u: f64 = rng.random_range(0.0..1.0);
        let ground_noise = gauss(&mut rng);

        if hit <= MAX_RANGE {
            for (h, n) in WALL_HEIGHTS.iter().zip(wall_noise) {
                let r = (hit + RANGE_SIGMA * n).max(0.1);
                points.push(Point {
                    x: r * cos_a,
                    y: r * sin_a,
                    z: h - SENSOR_HEIGHT,
                    intensity: WALL_INTENSITY,
                });
            }
        }
        let ground_max = hit.min(MAX_RANGE);
        if ground_max > 4.0 {
            let r = (4.0 + ground_u * (ground_max - 4.0) + RANGE_SIGMA * ground_noise).max(0.1);
            points.push(Point {
                x: r * cos_a,
                y: r * sin_a,
                z: -SENSOR_HEIGHT,
                intensity: GROUND_INTENSITY,
            });
        }
    }
    PointCloud::new(points)
}

/// Stateful scanner: applies the failure schedule and remembers the
/// last healthy cloud for frozen-sensor failures.
#[derive(Debug, Clone, Default)]
pub struct Scanner {
    last_healthy: Option<PointCloud>,
}

impl Scanner {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scan at `pose` with travelled distance `d` governing the failure
    /// schedule. Returns the cloud and whether a failure was active.
    pub fn scan(
        &mut self,
        track: &Track,
        pose: &Pose2,
        d: f64,
        schedule: Option<&FailureSchedule>,
        seed: u64,
    ) -> (PointCloud, bool) {
        if let Some(sched) = schedule {
            if sched.active(d) {
                let cloud = match sched.kind {
                    FailureKind::EmptyCloud => PointCloud::default(),
                    FailureKind::FrozenCloud => self.last_healthy.clone().unwrap_or_default(),
                };
                return (cloud, true);
            }
        }
        let cloud = scan_clean(track, pose, seed);
        self.last_healthy = Some(cloud.clone());
        (cloud, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centered_pose(track: &Track, s: f64) -> Pose2 {
        let p = track.sample(s);
        Pose2 {
            x: p.pos[0],
            y: p.pos[1],
            heading: p.heading,
        }
    }

    #[test]
    fn same_seed_same_cloud() {
        let t = Track::straight(200.0, 4.0);
        let pose = centered_pose(&t, 100.0);
        let a = scan_clean(&t, &pose, 9);
        let b = scan_clean(&t, &pose, 9);
        assert_eq!(a, b);
        let c = scan_clean(&t, &pose, 10);
        assert_ne!(a, c);
    }

    #[test]
    fn boundary_returns_have_wall_intensity_and_range_limit() {
        let t = Track::straight(200.0, 4.0);
        let pose = centered_pose(&t, 100.0);
        let cloud = scan_clean(&t, &pose, 3);
        assert!(!cloud.is_empty());
        for p in &cloud.points {
            let r = (p.x * p.x + p.y * p.y).sqrt();
            assert!(r <= MAX_RANGE + 0.2, "range {r}");
            assert!(p.intensity == WALL_INTENSITY || p.intensity == GROUND_INTENSITY);
        }
        assert!(cloud.points.iter().any(|p| p.intensity == WALL_INTENSITY));
        assert!(cloud.points.iter().any(|p| p.intensity == GROUND_INTENSITY));
    }

    /// Monte Carlo: on a straight road with a centered pose, the wall
    /// returns are laterally symmetric on average.
    #[test]
    fn straight_road_symmetry_monte_carlo() {
        let t = Track::straight(400.0, 4.0);
        let pose = centered_pose(&t, 200.0);
        let mut mean_y = 0.0;
        let mut count = 0usize;
        for seed in 0..1000 {
            let cloud = scan_clean(&t, &pose, seed);
            for p in cloud.points.iter().filter(|p| p.intensity == WALL_INTENSITY) {
                mean_y += p.y;
                count += 1;
            }
        }
        mean_y /= count as f64;
        assert!(mean_y.abs() < 0.05, "mean lateral offset {mean_y}");
    }

    #[test]
    fn failure_windows_follow_schedule() {
        let sched = FailureSchedule::new(50.0, 5.0, FailureKind::EmptyCloud);
        assert!(sched.active(0.0));
        assert!(sched.active(4.9));
        assert!(!sched.active(5.0));
        assert!(sched.active(50.0));
        assert!(sched.active(54.9));
        assert!(!sched.active(55.0));
        assert!(sched.active(100.0));
    }

    #[test]
    fn empty_cloud_failure_yields_zero_points() {
        let t = Track::straight(300.0, 4.0);
        let sched = FailureSchedule::new(50.0, 5.0, FailureKind::EmptyCloud);
        let mut scanner = Scanner::new();
        let (healthy, f0) = scanner.scan(&t, &centered_pose(&t, 20.0), 20.0, Some(&sched), 1);
        assert!(!f0 && !healthy.is_empty());
        let (cloud, failed) = scanner.scan(&t, &centered_pose(&t, 52.0), 52.0, Some(&sched), 2);
        assert!(failed);
        assert!(cloud.is_empty());
    }

    #[test]
    fn frozen_cloud_repeats_last_healthy() {
        let t = Track::straight(300.0, 4.0);
        let sched = FailureSchedule::new(50.0, 5.0, FailureKind::FrozenCloud);
        let mut scanner = Scanner::new();
        let (healthy, _) = scanner.scan(&t, &centered_pose(&t, 49.0), 49.0, Some(&sched), 1);
        let (frozen, failed) = scanner.scan(&t, &centered_pose(&t, 51.0), 51.0, Some(&sched), 2);
        assert!(failed);
        assert_eq!(frozen, healthy);
    }
}
