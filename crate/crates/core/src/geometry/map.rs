//! Routed-map rasterization: binary road / route masks rendered in the
//! ego frame.

/// 2D pose in world coordinates; heading in radians, counterclockwise
/// from +x.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

pub type Polyline = Vec<[f64; 2]>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MapFlags {
    /// Entire map dropped (both channels zero).
    pub blackout: bool,
    /// Route channel dropped, road channel kept.
    pub route_drop: bool,
}

/// Ego-centered, ego-aligned binary raster. Row 0 is farthest forward;
/// the ego sits at (h/2, w/2); +x ego (forward) points up, +y ego
/// (left) points toward column 0.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutedMapRaster {
    pub h: usize,
    pub w: usize,
    /// Meters per pixel.
    pub resolution: f64,
    pub pose: PoseBits,
    pub road: Vec<u8>,
    pub route: Vec<u8>,
}

/// Pose stored bit-exactly so rasters compare and hash deterministically.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoseBits {
    pub x: u64,
    pub y: u64,
    pub heading: u64,
}

impl From<Pose2> for PoseBits {
    fn from(p: Pose2) -> Self {
        Self {
            x: p.x.to_bits(),
            y: p.y.to_bits(),
            heading: p.heading.to_bits(),
        }
    }
}

impl RoutedMapRaster {
    pub fn zeros(h: usize, w: usize, resolution: f64, pose: Pose2) -> Self {
        Self {
            h,
            w,
            resolution,
            pose: pose.into(),
            road: vec![0; h * w],
            route: vec![0; h * w],
        }
    }

    pub fn road_at(&self, row: usize, col: usize) -> u8 {
        self.road[row * self.w + col]
    }

    pub fn route_at(&self, row: usize, col: usize) -> u8 {
        self.route[row * self.w + col]
    }
}

/// Render road polylines and the designated route into an ego-aligned
/// raster. `road_half_width` is the stamped half-width in meters for the
/// road channel; the route channel uses `route_half_width` (must not
/// exceed the road half-width so the subset invariant holds).
#[allow(clippy::too_many_arguments)]
pub fn render_map(
    roads: &[Polyline],
    route: &Polyline,
    pose: &Pose2,
    h: usize,
    w: usize,
    resolution: f64,
    road_half_width: f64,
    route_half_width: f64,
    flags: MapFlags,
) -> RoutedMapRaster {
    assert!(resolution > 0.0, "resolution must be positive");
    let mut raster = RoutedMapRaster::zeros(h, w, resolution, *pose);
    if flags.blackout {
        return raster;
    }
    // Map unavailable when the ego is nowhere near the road network.
    let raster_radius = resolution * (h.max(w) as f64) * std::f64::consts::SQRT_2;
    if !pose_near_roads(roads, pose, raster_radius + road_half_width) {
        return raster;
    }
    for line in roads {
        stamp_polyline(&mut raster.road, line, pose, h, w, resolution, road_half_width);
    }
    if !flags.route_drop {
        let rw = route_half_width.min(road_half_width);
        stamp_polyline(&mut raster.route, route, pose, h, w, resolution, rw);
    }
    raster
}

fn pose_near_roads(roads: &[Polyline], pose: &Pose2, max_dist: f64) -> bool {
    let p = [pose.x, pose.y];
    roads.iter().any(|line| {
        line.windows(2)
            .any(|seg| point_segment_dist_sq(p, seg[0], seg[1]) <= max_dist * max_dist)
    })
}

fn point_segment_dist_sq(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len_sq = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len_sq > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len_sq).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let dx = ap[0] - t * ab[0];
    let dy = ap[1] - t * ab[1];
    dx * dx + dy * dy
}

fn stamp_polyline(
    grid: &mut [u8],
    line: &Polyline,
    pose: &Pose2,
    h: usize,
    w: usize,
    resolution: f64,
    half_width: f64,
) {
    let (sin_h, cos_h) = pose.heading.sin_cos();
    let step = resolution * 0.5;
    for seg in line.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        let n = (len / step).ceil().max(1.0) as usize;
        for i in 0..=n {
            let t = i as f64 / n as f64;
            let wx = a[0] + t * (b[0] - a[0]);
            let wy = a[1] + t * (b[1] - a[1]);
            // World -> ego.
            let dx = wx - pose.x;
            let dy = wy - pose.y;
            let ex = cos_h * dx + sin_h * dy;
            let ey = -sin_h * dx + cos_h * dy;
            stamp_disc(grid, h, w, resolution, ex, ey, half_width);
        }
    }
}

fn stamp_disc(grid: &mut [u8], h: usize, w: usize, resolution: f64, ex: f64, ey: f64, radius: f64) {
    let row_c = h as f64 / 2.0 - ex / resolution;
    let col_c = w as f64 / 2.0 - ey / resolution;
    let r_pix = radius / resolution;
    let row_lo = (row_c - r_pix).floor().max(0.0) as usize;
    let row_hi = ((row_c + r_pix).ceil() as isize).min(h as isize - 1).max(-1);
    let col_lo = (col_c - r_pix).floor().max(0.0) as usize;
    let col_hi = ((col_c + r_pix).ceil() as isize).min(w as isize - 1).max(-1);
    if row_hi < 0 || col_hi < 0 {
        return;
    }
    for row in row_lo..=row_hi as usize {
        for col in col_lo..=col_hi as usize {
            let dr = row as f64 + 0.5 - row_c;
            let dc = col as f64 + 0.5 - col_c;
            if dr * dr + dc * dc <= r_pix * r_pix {
                grid[row * w + col] = 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight_road() -> Vec<Polyline> {
        vec![vec![[-100.0, 0.0], [100.0, 0.0]]]
    }

    #[test]
    fn straight_road_renders_vertical_band() {
        let roads = straight_road();
        let pose = Pose2::default();
        let r = render_map(&roads, &roads[0], &pose, 64, 64, 1.0, 3.0, 1.0, MapFlags::default());
        // Band through the center column for every row.
        for row in 0..64 {
            assert_eq!(r.road_at(row, 32), 1, "row {row}");
        }
        // Far lateral columns stay empty.
        for row in 0..64 {
            assert_eq!(r.road_at(row, 0), 0);
            assert_eq!(r.road_at(row, 63), 0);
        }
    }

    #[test]
    fn route_drop_zeroes_route_only() {
        let roads = straight_road();
        let pose = Pose2::default();
        let flags = MapFlags {
            blackout: false,
            route_drop: true,
        };
        let r = render_map(&roads, &roads[0], &pose, 64, 64, 1.0, 3.0, 1.0, flags);
        assert!(r.route.iter().all(|&v| v == 0));
        assert!(r.road.iter().any(|&v| v == 1));
    }

    #[test]
    fn blackout_zeroes_both() {
        let roads = straight_road();
        let pose = Pose2::default();
        let flags = MapFlags {
            blackout: true,
            route_drop: false,
        };
        let r = render_map(&roads, &roads[0], &pose, 64, 64, 1.0, 3.0, 1.0, flags);
        assert!(r.road.iter().all(|&v| v == 0));
        assert!(r.route.iter().all(|&v| v == 0));
    }

    #[test]
    fn pose_off_map_renders_zeros() {
        let roads = straight_road();
        let pose = Pose2 {
            x: 0.0,
            y: 10_000.0,
            heading: 0.0,
        };
        let r = render_map(&roads, &roads[0], &pose, 64, 64, 1.0, 3.0, 1.0, MapFlags::default());
        assert!(r.road.iter().all(|&v| v == 0));
    }

    #[test]
    fn route_subset_of_road() {
        let roads = vec![
            vec![[-100.0, 0.0], [100.0, 0.0]],
            vec![[0.0, -100.0], [0.0, 100.0]],
        ];
        let pose = Pose2 {
            x: 5.0,
            y: 2.0,
            heading: 0.3,
        };
        let r = render_map(&roads, &roads[1], &pose, 64, 64, 1.0, 3.0, 1.0, MapFlags::default());
        for i in 0..r.road.len() {
            assert!(r.route[i] <= r.road[i]);
        }
    }
}
