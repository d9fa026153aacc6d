//! Point-cloud preparation, training-time augmentation with label
//! correction, curvature label generation, and routed-map rasterization.

mod map;
pub mod sevf;

pub use map::{render_map, MapFlags, Polyline, Pose2, RoutedMapRaster};

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("trajectory distances must be strictly increasing")]
    NonMonotonicTrajectory,
    #[error("trajectory contains speed {0} below the 1 m/s low-speed cutoff")]
    LowSpeed(f64),
    #[error("lookahead {lookahead} m extends beyond trajectory end at {end} m")]
    LookaheadBeyondTrajectory { lookahead: f64, end: f64 },
    #[error("label vector has {got} entries, expected {expected}")]
    LabelLength { got: usize, expected: usize },
}

/// One LiDAR return. Sensor frame: x forward, y left, z up, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Unitless, in [0, 1].
    pub intensity: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Per-voxel feature channels: occupancy (always 1.0), mean normalized
/// height, mean intensity.
pub const VOXEL_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelizedCloud {
    pub coords: Vec<[i32; 3]>,
    pub features: Vec<[f64; VOXEL_CHANNELS]>,
    pub voxel_size: f64,
}

impl VoxelizedCloud {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// K curvature labels (1/m) at integer-meter lookaheads 0..K-1.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlLabels {
    pub values: Vec<f64>,
}

impl ControlLabels {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GeometryConfig {
    /// Height normalization: feature = (z - z_min) / z_range.
    pub z_min: f64,
    pub z_range: f64,
    /// Physical curvature bound, 1/m.
    pub kappa_max: f64,
    /// Distance over which a rotation-augmented frame is steered back to
    /// the centerline.
    pub recover_dist: f64,
    pub scale_range: (f64, f64),
    /// Yaw augmentation bound, radians.
    pub max_yaw: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            z_min: -2.0,
            z_range: 4.0,
            kappa_max: 0.3,
            recover_dist: 20.0,
            scale_range: (0.95, 1.05),
            max_yaw: 10.0_f64.to_radians(),
        }
    }
}

/// Drop all points with horizontal distance below `radius`; order preserved.
pub fn filter_near(cloud: &PointCloud, radius: f64) -> PointCloud {
    assert!(radius >= 0.0, "radius must be non-negative");
    PointCloud::new(
        cloud
            .points
            .iter()
            .copied()
            .filter(|p| (p.x * p.x + p.y * p.y).sqrt() >= radius)
            .collect(),
    )
}

/// Quantize to integer voxel coordinates with floor(p / voxel_size) and
/// merge points sharing a voxel. Output order is first occurrence.
pub fn quantize(cloud: &PointCloud, voxel_size: f64, cfg: &GeometryConfig) -> VoxelizedCloud {
    assert!(voxel_size > 0.0, "voxel size must be positive");
    let mut index: HashMap<[i32; 3], usize> = HashMap::new();
    let mut coords = Vec::new();
    // (sum normalized height, sum intensity, count)
    let mut accum: Vec<(f64, f64, usize)> = Vec::new();
    for p in &cloud.points {
        let c = [
            (p.x / voxel_size).floor() as i32,
            (p.y / voxel_size).floor() as i32,
            (p.z / voxel_size).floor() as i32,
        ];
        let h = (p.z - cfg.z_min) / cfg.z_range;
        match index.get(&c) {
            Some(&i) => {
                accum[i].0 += h;
                accum[i].1 += p.intensity;
                accum[i].2 += 1;
            }
            None => {
                index.insert(c, coords.len());
                coords.push(c);
                accum.push((h, p.intensity, 1));
            }
        }
    }
    let features = accum
        .into_iter()
        .map(|(h, i, n)| [1.0, h / n as f64, i / n as f64])
        .collect();
    VoxelizedCloud {
        coords,
        features,
        voxel_size,
    }
}

/// Scale then yaw-rotate a cloud (rotation about z, counterclockwise
/// positive). Exposed separately from [`augment`] so tests can force
/// exact transform parameters.
pub fn apply_scale_rotation(cloud: &PointCloud, scale: f64, theta: f64) -> PointCloud {
    let (sin_t, cos_t) = theta.sin_cos();
    PointCloud::new(
        cloud
            .points
            .iter()
            .map(|p| {
                let (x, y, z) = (p.x * scale, p.y * scale, p.z * scale);
                Point {
                    x: x * cos_t - y * sin_t,
                    y: x * sin_t + y * cos_t,
                    z,
                    intensity: p.intensity,
                }
            })
            .collect(),
    )
}

/// Correct lookahead curvature labels for a yaw rotation of `theta`,
/// steering back to the centerline over `recover_dist` meters. The
/// correction is a small-angle return arc -2θ/D decaying linearly to
/// zero at lookahead D.
pub fn correct_labels(
    labels: &ControlLabels,
    theta: f64,
    recover_dist: f64,
    kappa_max: f64,
) -> ControlLabels {
    assert!(recover_dist > 0.0, "recover distance must be positive");
    let base = -2.0 * theta / recover_dist;
    let values = labels
        .values
        .iter()
        .enumerate()
        .map(|(k, &y)| {
            let decay = (1.0 - k as f64 / recover_dist).max(0.0);
            (y + base * decay).clamp(-kappa_max, kappa_max)
        })
        .collect();
    ControlLabels::new(values)
}

/// Random scale in `scale_range` and yaw in ±`max_yaw`, with labels
/// corrected for the rotation. Pure function of (inputs, seed).
pub fn augment(
    cloud: &PointCloud,
    labels: &ControlLabels,
    cfg: &GeometryConfig,
    seed: u64,
) -> (PointCloud, ControlLabels, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = rng.random_range(cfg.scale_range.0..=cfg.scale_range.1);
    let theta = rng.random_range(-cfg.max_yaw..=cfg.max_yaw);
    // theta is the simulated extra vehicle yaw (counterclockwise positive).
    // In the ego frame (x forward, y left) yawing the vehicle by +theta
    // rotates the perceived scene by -theta, hence the negated cloud
    // rotation paired with the -2*theta/D label correction.
    let out_cloud = apply_scale_rotation(cloud, scale, -theta);
    let out_labels = correct_labels(labels, theta, cfg.recover_dist, cfg.kappa_max);
    (out_cloud, out_labels, theta)
}

/// One odometry sample used for label generation.
#[derive(Debug, Clone, Copy)]
pub struct TrajectorySample {
    /// Travelled distance, m. Strictly increasing along the trajectory.
    pub distance: f64,
    /// rad/s.
    pub yaw_rate: f64,
    /// m/s. Frames below 1 m/s are rejected upstream.
    pub speed: f64,
}

/// Curvature labels y_k = (yaw_rate / speed) linearly interpolated at
/// `current_distance + k` for k in 0..k_lookaheads.
pub fn curvature_labels(
    trajectory: &[TrajectorySample],
    current_distance: f64,
    k_lookaheads: usize,
) -> Result<ControlLabels, GeometryError> {
    for w in trajectory.windows(2) {
        if w[1].distance <= w[0].distance {
            return Err(GeometryError::NonMonotonicTrajectory);
        }
    }
    for s in trajectory {
        if s.speed < 1.0 {
            return Err(GeometryError::LowSpeed(s.speed));
        }
    }
    let end = trajectory.last().map(|s| s.distance).unwrap_or(f64::NEG_INFINITY);
    let mut values = Vec::with_capacity(k_lookaheads);
    for k in 0..k_lookaheads {
        let d = current_distance + k as f64;
        if d > end || trajectory.is_empty() || d < trajectory[0].distance {
            return Err(GeometryError::LookaheadBeyondTrajectory { lookahead: d, end });
        }
        values.push(interp_curvature(trajectory, d));
    }
    Ok(ControlLabels::new(values))
}

fn interp_curvature(trajectory: &[TrajectorySample], d: f64) -> f64 {
    let i = trajectory.partition_point(|s| s.distance < d);
    if i == 0 {
        let s = &trajectory[0];
        return s.yaw_rate / s.speed;
    }
    if i == trajectory.len() {
        let s = trajectory.last().unwrap();
        return s.yaw_rate / s.speed;
    }
    let (a, b) = (&trajectory[i - 1], &trajectory[i]);
    let t = (d - a.distance) / (b.distance - a.distance);
    let ya = a.yaw_rate / a.speed;
    let yb = b.yaw_rate / b.speed;
    ya + t * (yb - ya)
}

/// Map-perturbation draws for one training frame: translation offsets
/// N(0, 3 m) per axis, rotation N(0, pi/20), blackout and route-drop
/// each Bernoulli(0.25). Route-drop only fires on lane-stable frames so
/// turn frames keep their navigational signal.
pub fn augment_map(pose: &Pose2, lane_stable: bool, seed: u64) -> (Pose2, MapFlags) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trans = Normal::new(0.0, 3.0).unwrap();
    let rot = Normal::new(0.0, std::f64::consts::PI / 20.0).unwrap();
    let dx = trans.sample(&mut rng);
    let dy = trans.sample(&mut rng);
    let dtheta = rot.sample(&mut rng);
    let blackout = rng.random_range(0.0..1.0) < 0.25;
    let route_drop = rng.random_range(0.0..1.0) < 0.25 && lane_stable;
    (
        Pose2 {
            x: pose.x + dx,
            y: pose.y + dy,
            heading: pose.heading + dtheta,
        },
        MapFlags {
            blackout,
            route_drop,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pt(x: f64, y: f64, z: f64) -> Point {
        Point {
            x,
            y,
            z,
            intensity: 0.5,
        }
    }

    #[test]
    fn filter_near_drops_close_points() {
        let cloud = PointCloud::new(vec![pt(1.0, 0.0, 0.0)]);
        assert!(filter_near(&cloud, 3.0).is_empty());
    }

    #[test]
    fn filter_near_keeps_boundary() {
        let cloud = PointCloud::new(vec![pt(3.0, 0.0, 0.0)]);
        assert_eq!(filter_near(&cloud, 3.0), cloud);
    }

    #[test]
    fn filter_near_zero_radius_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cloud = PointCloud::new(
            (0..100)
                .map(|_| {
                    pt(
                        rng.random_range(-10.0..10.0),
                        rng.random_range(-10.0..10.0),
                        rng.random_range(-2.0..2.0),
                    )
                })
                .collect(),
        );
        assert_eq!(filter_near(&cloud, 0.0), cloud);
    }

    #[test]
    fn quantize_floor_coordinates() {
        let cloud = PointCloud::new(vec![pt(3.05, -0.41, 1.99)]);
        let v = quantize(&cloud, 0.2, &GeometryConfig::default());
        assert_eq!(v.coords, vec![[15, -3, 9]]);
    }

    #[test]
    fn quantize_merges_with_mean_intensity() {
        let mut a = pt(0.05, 0.05, 0.05);
        a.intensity = 0.2;
        let mut b = pt(0.15, 0.15, 0.15);
        b.intensity = 0.4;
        let v = quantize(&PointCloud::new(vec![a, b]), 0.2, &GeometryConfig::default());
        assert_eq!(v.len(), 1);
        assert_relative_eq!(v.features[0][2], 0.3, epsilon = 1e-12);
        assert_eq!(v.features[0][0], 1.0);
    }

    #[test]
    fn quantize_pigeonhole_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud = PointCloud::new(
            (0..10_000)
                .map(|_| {
                    pt(
                        rng.random_range(0.0..2.0),
                        rng.random_range(0.0..2.0),
                        rng.random_range(0.0..2.0),
                    )
                })
                .collect(),
        );
        let v = quantize(&cloud, 0.2, &GeometryConfig::default());
        assert!(v.len() <= 1000);
    }

    #[test]
    fn quantize_empty_is_empty() {
        let v = quantize(&PointCloud::default(), 0.2, &GeometryConfig::default());
        assert!(v.is_empty());
    }

    #[test]
    fn rotation_quarter_turn() {
        let cloud = PointCloud::new(vec![pt(1.0, 0.0, 0.0)]);
        let out = apply_scale_rotation(&cloud, 1.0, std::f64::consts::FRAC_PI_2);
        assert_relative_eq!(out.points[0].x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(out.points[0].y, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn identity_transform_is_identity() {
        let cloud = PointCloud::new(vec![pt(1.0, 2.0, 3.0)]);
        assert_eq!(apply_scale_rotation(&cloud, 1.0, 0.0), cloud);
    }

    #[test]
    fn augment_deterministic_per_seed() {
        let cloud = PointCloud::new(vec![pt(1.0, 2.0, 3.0), pt(-4.0, 0.5, 0.0)]);
        let labels = ControlLabels::new(vec![0.01; 10]);
        let cfg = GeometryConfig::default();
        let a = augment(&cloud, &labels, &cfg, 42);
        let b = augment(&cloud, &labels, &cfg, 42);
        assert_eq!(a, b);
    }

    #[test]
    fn augment_rotation_and_label_signs_agree() {
        // Yawing the vehicle left (theta > 0) must swing a dead-ahead
        // feature to the right of the ego x-axis (negative azimuth) and
        // must correct labels toward steering right (negative curvature).
        let cloud = PointCloud::new(vec![pt(10.0, 0.0, 0.0)]);
        let labels = ControlLabels::new(vec![0.0; 10]);
        let cfg = GeometryConfig {
            scale_range: (1.0, 1.0),
            ..GeometryConfig::default()
        };
        for seed in 0..50 {
            let (out_cloud, out_labels, theta) = augment(&cloud, &labels, &cfg, seed);
            if theta.abs() < 1e-3 {
                continue;
            }
            let azimuth = out_cloud.points[0].y.atan2(out_cloud.points[0].x);
            assert_relative_eq!(azimuth, -theta, epsilon = 1e-9);
            assert!(out_labels.values[0] * theta < 0.0);
        }
    }

    #[test]
    fn correct_labels_zero_theta_identity() {
        let labels = ControlLabels::new(vec![0.01, -0.02, 0.0]);
        let out = correct_labels(&labels, 0.0, 20.0, 0.3);
        assert_eq!(out, labels);
    }

    #[test]
    fn correct_labels_formula_at_zero_lookahead() {
        let labels = ControlLabels::new(vec![0.0]);
        let out = correct_labels(&labels, 0.1, 20.0, 0.3);
        assert_relative_eq!(out.values[0], -0.01, epsilon = 1e-12);
    }

    #[test]
    fn correct_labels_decays_to_zero_at_recover_dist() {
        let labels = ControlLabels::new(vec![0.05; 21]);
        let out = correct_labels(&labels, 0.1, 20.0, 0.3);
        assert_eq!(out.values[20], 0.05);
    }

    #[test]
    fn curvature_labels_constant_rate() {
        let traj: Vec<_> = (0..30)
            .map(|i| TrajectorySample {
                distance: i as f64,
                yaw_rate: 0.1,
                speed: 10.0,
            })
            .collect();
        let labels = curvature_labels(&traj, 0.0, 10).unwrap();
        for &y in &labels.values {
            assert_relative_eq!(y, 0.01, epsilon = 1e-12);
        }
    }

    #[test]
    fn curvature_labels_circle_radius_50() {
        // v = 5 m/s on a radius-50 circle: yaw rate = v/R = 0.1 rad/s.
        let traj: Vec<_> = (0..30)
            .map(|i| TrajectorySample {
                distance: i as f64,
                yaw_rate: 0.1,
                speed: 5.0,
            })
            .collect();
        let labels = curvature_labels(&traj, 0.0, 10).unwrap();
        for &y in &labels.values {
            assert_relative_eq!(y, 0.02, epsilon = 1e-12);
        }
    }

    #[test]
    fn curvature_labels_midpoint_interpolation() {
        let traj = vec![
            TrajectorySample {
                distance: 0.0,
                yaw_rate: 0.0,
                speed: 2.0,
            },
            TrajectorySample {
                distance: 2.0,
                yaw_rate: 0.04,
                speed: 2.0,
            },
        ];
        let labels = curvature_labels(&traj, 0.0, 2).unwrap();
        assert_relative_eq!(labels.values[1], 0.01, epsilon = 1e-12);
    }

    #[test]
    fn curvature_labels_rejects_short_trajectory() {
        let traj: Vec<_> = (0..5)
            .map(|i| TrajectorySample {
                distance: i as f64,
                yaw_rate: 0.0,
                speed: 5.0,
            })
            .collect();
        assert!(matches!(
            curvature_labels(&traj, 0.0, 10),
            Err(GeometryError::LookaheadBeyondTrajectory { .. })
        ));
    }

    #[test]
    fn curvature_labels_rejects_low_speed() {
        let traj = vec![TrajectorySample {
            distance: 0.0,
            yaw_rate: 0.0,
            speed: 0.5,
        }];
        assert!(matches!(
            curvature_labels(&traj, 0.0, 1),
            Err(GeometryError::LowSpeed(_))
        ));
    }

    #[test]
    fn augment_map_blackout_rate() {
        let pose = Pose2::default();
        let n = 100_000;
        let hits = (0..n)
            .filter(|&s| augment_map(&pose, true, s).1.blackout)
            .count();
        let rate = hits as f64 / n as f64;
        assert!((rate - 0.25).abs() < 0.01, "blackout rate {rate}");
    }

    #[test]
    fn augment_map_no_route_drop_on_turn_frames() {
        let pose = Pose2::default();
        for s in 0..10_000 {
            assert!(!augment_map(&pose, false, s).1.route_drop);
        }
    }
}
