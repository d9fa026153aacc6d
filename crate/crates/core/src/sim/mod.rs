//! Deterministic closed-loop harness: kinematic vehicle, oracle driver,
//! failure-injecting episodes, recovery trials, and dataset recording.

pub mod scan;
pub mod track;

pub use scan::{scan_clean, FailureKind, FailureSchedule, Scanner};
pub use track::{Track, TrackPoint};

use std::io::{self, BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::evidential::{constrain, epistemic_variance};
use crate::fusion::{
    DistanceEstimator, FusionConfig, FusionMode, KalmanConfig, PredictionBuffer,
};
use crate::geometry::{
    curvature_labels, filter_near, quantize, render_map, GeometryConfig, MapFlags, Pose2,
    TrajectorySample,
};
use crate::nn::{FastLidarNet, NnError};
use crate::trainer::{Dataset, DataError, Frame, FrameTag, MapGeom};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("vehicle off track at s={s:.1} (cross-track {cte:.2} m)")]
    OffTrack { s: f64, cte: f64 },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Label(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    /// Travelled distance, meters.
    pub distance: f64,
}

impl VehicleState {
    pub fn at_track_start(track: &Track, speed: f64) -> Self {
        let p = track.sample(0.0);
        Self {
            x: p.pos[0],
            y: p.pos[1],
            heading: p.heading,
            speed,
            distance: 0.0,
        }
    }

    pub fn pose(&self) -> Pose2 {
        Pose2 {
            x: self.x,
            y: self.y,
            heading: self.heading,
        }
    }
}

/// Advance one tick with midpoint integration. Returns the new state
/// and whether the command was clamped to the curvature bound.
pub fn step(s: &VehicleState, kappa_cmd: f64, dt: f64, kappa_max: f64) -> (VehicleState, bool) {
    assert!(dt > 0.0, "dt must be positive");
    let clamped = kappa_cmd.abs() > kappa_max;
    let kappa = kappa_cmd.clamp(-kappa_max, kappa_max);
    let dpsi = s.speed * kappa * dt;
    let h_mid = s.heading + 0.5 * dpsi;
    (
        VehicleState {
            x: s.x + s.speed * dt * h_mid.cos(),
            y: s.y + s.speed * dt * h_mid.sin(),
            heading: s.heading + dpsi,
            speed: s.speed,
            distance: s.distance + s.speed * dt,
        },
        clamped,
    )
}

/// Pure pursuit on the designated route with an 8 m lookahead.
pub const PURSUIT_LOOKAHEAD: f64 = 8.0;

pub fn oracle_driver(track: &Track, s: &VehicleState) -> Result<f64, SimError> {
    oracle_driver_hinted(track, s, s.distance)
}

fn oracle_driver_hinted(track: &Track, s: &VehicleState, hint: f64) -> Result<f64, SimError> {
    let (s_proj, cte) = track.project([s.x, s.y], hint);
    if cte.abs() > track.half_width + 2.0 {
        return Err(SimError::OffTrack { s: s_proj, cte });
    }
    let target = track.sample(s_proj + PURSUIT_LOOKAHEAD);
    let dx = target.pos[0] - s.x;
    let dy = target.pos[1] - s.y;
    let (sin_h, cos_h) = s.heading.sin_cos();
    let ty = -sin_h * dx + cos_h * dy;
    let l2 = dx * dx + dy * dy;
    Ok(2.0 * ty / l2.max(1e-9))
}

#[derive(Debug, Clone, Copy)]
pub struct SimConfig {
    pub dt: f64,
    pub speed: f64,
    pub kappa_max: f64,
    /// Intervention thresholds.
    pub cte_limit: f64,
    pub heading_limit: f64,
    /// Ticks an empty prediction bin may be bridged by holding the last
    /// command.
    pub hold_limit: usize,
    pub voxel_size: f64,
    pub filter_radius: f64,
    pub map_resolution: f64,
    pub road_half_width: f64,
    pub route_half_width: f64,
    /// Demonstration segments start offset up to this far from the
    /// centerline (meters); zero records pure centerline driving.
    pub start_offset_jitter: f64,
    /// Heading jitter at segment starts, radians.
    pub start_heading_jitter: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            speed: 5.0,
            kappa_max: 0.3,
            cte_limit: 1.5,
            heading_limit: 60.0_f64.to_radians(),
            hold_limit: 3,
            voxel_size: 0.2,
            filter_radius: 3.0,
            map_resolution: 1.0,
            road_half_width: 4.0,
            route_half_width: 1.5,
            start_offset_jitter: 1.3,
            start_heading_jitter: 0.2,
        }
    }
}

pub enum Policy<'a> {
    /// Pure pursuit on ground truth (data collection / sanity).
    Oracle,
    /// Fixed curvature command.
    Constant(f64),
    /// Trained network through the fusion runtime.
    Net {
        net: &'a FastLidarNet,
        mode: FusionMode,
        fusion: FusionConfig,
    },
}

/// One trace line: tick plus 12 fixed fields (see docs/formats.md).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TickRecord {
    pub tick: u64,
    pub d: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub cte: f64,
    pub heading_err: f64,
    /// Lookahead-0 prediction made this tick (NaN when none).
    pub raw_pred: f64,
    /// Command actually applied.
    pub fused: f64,
    /// Entries in the fused bin (0 when fusion failed).
    pub bin_count: usize,
    pub failure: bool,
    pub intervention: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub ticks: Vec<TickRecord>,
    pub interventions: usize,
    pub distance: f64,
    pub completed: bool,
}

fn wrap_angle(a: f64) -> f64 {
    (a + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn tick_seed(seed: u64, tick: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tick))
}

/// Per-episode state of a network policy.
struct NetRuntime<'a> {
    net: &'a FastLidarNet,
    mode: FusionMode,
    est: DistanceEstimator,
    buffer: PredictionBuffer,
    scanner: Scanner,
    hold: usize,
}

struct NetCommand {
    /// None when the bin was empty and the hold budget ran out.
    command: Option<f64>,
    raw_pred: f64,
    bin_count: usize,
    failure: bool,
}

impl<'a> NetRuntime<'a> {
    fn new(net: &'a FastLidarNet, mode: FusionMode, fusion: FusionConfig) -> Self {
        Self {
            net,
            mode,
            est: DistanceEstimator::new(KalmanConfig::default()),
            buffer: PredictionBuffer::new(net.cfg.k, fusion),
            scanner: Scanner::new(),
            hold: 0,
        }
    }

    fn tick(
        &mut self,
        track: &Track,
        state: &VehicleState,
        schedule: Option<&FailureSchedule>,
        cfg: &SimConfig,
        seed: u64,
        last_cmd: f64,
    ) -> Result<NetCommand, SimError> {
        self.est.kf_update(state.speed, cfg.dt);
        let d = self.est.distance;
        let (cloud, failure) =
            self.scanner
                .scan(track, &state.pose(), state.distance, schedule, seed);
        let mut raw_pred = f64::NAN;
        let filtered = filter_near(&cloud, cfg.filter_radius);
        let vox = quantize(&filtered, cfg.voxel_size, &GeometryConfig::default());
        if !vox.is_empty() {
            let raster = if self.net.cfg.navigation {
                Some(render_map(
                    &track.roads(),
                    &track.centerline(),
                    &state.pose(),
                    self.net.cfg.map_h,
                    self.net.cfg.map_w,
                    cfg.map_resolution,
                    cfg.road_half_width,
                    cfg.route_half_width,
                    MapFlags::default(),
                ))
            } else {
                None
            };
            let (out, _) = self.net.forward_infer(&vox, raster.as_ref())?;
            raw_pred = out.x[0];
            if out.e_raw.is_empty() {
                self.buffer.record(d, &out.x, None);
            } else {
                let vars: Vec<f64> = out
                    .e_raw
                    .chunks_exact(4)
                    .map(|c| epistemic_variance(&constrain(c.try_into().unwrap())))
                    .collect();
                self.buffer.record(d, &out.x, Some(&vars));
            }
        }
        match self.buffer.fuse(d, self.mode) {
            Ok(fused) => {
                self.hold = 0;
                Ok(NetCommand {
                    command: Some(fused.output),
                    raw_pred,
                    bin_count: fused.entries.len(),
                    failure,
                })
            }
            Err(_) => {
                self.hold += 1;
                if self.hold > cfg.hold_limit {
                    self.hold = 0;
                    Ok(NetCommand {
                        command: None,
                        raw_pred,
                        bin_count: 0,
                        failure,
                    })
                } else {
                    Ok(NetCommand {
                        command: Some(last_cmd),
                        raw_pred,
                        bin_count: 0,
                        failure,
                    })
                }
            }
        }
    }
}

/// Closed-loop run at 10 Hz: scan, predict, fuse, step. Interventions
/// reset the vehicle onto the centerline at its current arc length.
pub fn run_episode(
    policy: &mut Policy,
    track: &Track,
    schedule: Option<&FailureSchedule>,
    cfg: &SimConfig,
    seed: u64,
) -> Result<EpisodeTrace, SimError> {
    let start = VehicleState::at_track_start(track, cfg.speed);
    run_episode_from(policy, track, schedule, cfg, seed, start)
}

/// [`run_episode`] from an explicit initial state, for perturbed-start
/// evaluation.
pub fn run_episode_from(
    policy: &mut Policy,
    track: &Track,
    schedule: Option<&FailureSchedule>,
    cfg: &SimConfig,
    seed: u64,
    start: VehicleState,
) -> Result<EpisodeTrace, SimError> {
    let total_len = track.total_length();
    let mut state = start;
    let mut runtime = match policy {
        Policy::Net { net, mode, fusion } => Some(NetRuntime::new(net, *mode, *fusion)),
        _ => None,
    };
    let mut ticks = Vec::new();
    let mut interventions = 0usize;
    let mut last_cmd = 0.0;
    let max_ticks = ((total_len / (cfg.speed * cfg.dt)) * 3.0) as u64 + 100;
    let mut tick = 0u64;
    while state.distance < total_len - 1e-9 && tick < max_ticks {
        let (s_proj, cte) = track.project([state.x, state.y], state.distance);
        let heading_err = wrap_angle(state.heading - track.sample(s_proj).heading);

        let mut intervention = cte.abs() > cfg.cte_limit || heading_err.abs() > cfg.heading_limit;
        let (mut cmd, mut raw_pred, mut bin_count, mut failure) = (0.0, f64::NAN, 0usize, false);
        if !intervention {
            match (runtime.as_mut(), &mut *policy) {
                (Some(rt), _) => {
                    let out = rt.tick(track, &state, schedule, cfg, tick_seed(seed, tick), last_cmd)?;
                    raw_pred = out.raw_pred;
                    bin_count = out.bin_count;
                    failure = out.failure;
                    match out.command {
                        Some(c) => cmd = c,
                        None => intervention = true,
                    }
                }
                (None, Policy::Oracle) => cmd = oracle_driver(track, &state)?,
                (None, Policy::Constant(c)) => cmd = *c,
                (None, Policy::Net { .. }) => unreachable!(),
            }
        }

        if intervention {
            interventions += 1;
            let p = track.sample(s_proj);
            state.x = p.pos[0];
            state.y = p.pos[1];
            state.heading = p.heading;
            cmd = 0.0;
            last_cmd = 0.0;
        }

        ticks.push(TickRecord {
            tick,
            d: state.distance,
            x: state.x,
            y: state.y,
            heading: state.heading,
            speed: state.speed,
            cte,
            heading_err,
            raw_pred,
            fused: cmd,
            bin_count,
            failure,
            intervention,
        });

        let (next, _) = step(&state, cmd, cfg.dt, cfg.kappa_max);
        state = next;
        if !intervention {
            last_cmd = cmd;
        }
        tick += 1;
    }
    Ok(EpisodeTrace {
        interventions,
        distance: state.distance,
        completed: state.distance >= total_len - 1e-9,
        ticks,
    })
}

/// Start with a heading offset and report whether the policy settles
/// back onto the lane (|cte| < 0.3 m and |heading error| < 5 degrees)
/// within 10 simulated seconds. No interventions are granted.
pub fn recovery_trial(
    policy: &mut Policy,
    track: &Track,
    perturbation: f64,
    cfg: &SimConfig,
    seed: u64,
) -> Result<bool, SimError> {
    assert!(
        perturbation.abs() <= 45.0_f64.to_radians() + 1e-12,
        "perturbation limited to 45 degrees"
    );
    let start = track.sample(20.0_f64.min(track.total_length() / 4.0));
    let mut state = VehicleState {
        x: start.pos[0],
        y: start.pos[1],
        heading: start.heading + perturbation,
        speed: cfg.speed,
        distance: 0.0,
    };
    let mut runtime = match policy {
        Policy::Net { net, mode, fusion } => Some(NetRuntime::new(net, *mode, *fusion)),
        _ => None,
    };
    let mut last_cmd = 0.0;
    let ticks = (10.0 / cfg.dt).round() as u64;
    let mut s_hint = start.s;
    for tick in 0..ticks {
        let (s_proj, cte) = track.project([state.x, state.y], s_hint);
        s_hint = s_proj;
        let heading_err = wrap_angle(state.heading - track.sample(s_proj).heading);
        if cte.abs() < 0.3 && heading_err.abs() < 5.0_f64.to_radians() {
            return Ok(true);
        }
        let cmd = match (runtime.as_mut(), &mut *policy) {
            (Some(rt), _) => rt
                .tick(track, &state, None, cfg, tick_seed(seed, tick), last_cmd)?
                .command
                .unwrap_or(last_cmd),
            (None, Policy::Oracle) => oracle_driver(track, &state)?,
            (None, Policy::Constant(c)) => *c,
            (None, Policy::Net { .. }) => unreachable!(),
        };
        let (next, _) = step(&state, cmd, cfg.dt, cfg.kappa_max);
        state = next;
        last_cmd = cmd;
    }
    Ok(false)
}

/// Meters of frames recorded per demonstration segment. Kept short so a
/// frame budget spans many distinct jittered start states instead of
/// long stretches of settled centerline driving: on the settled recovery
/// path cross-track error and heading error are tightly correlated, which
/// leaves the learned feedback gains unidentifiable.
const SEGMENT_RECORD_M: f64 = 6.0;

/// Ticks between recorded frames within a segment.
const RECORD_EVERY: u64 = 2;

/// Drive the oracle over the given tracks in short demonstration
/// segments and record frames with K future-curvature labels. Segment
/// starts are jittered off the centerline (`SimConfig::start_offset_jitter`,
/// `start_heading_jitter`) so the recorded demonstrations cover the
/// off-center states a closed-loop learner will visit; the labels are
/// the oracle's own recovery steering. Frames within 15 m of a fork are
/// tagged as turn frames.
pub fn gen_dataset(
    tracks: &[Track],
    n_frames: usize,
    k: usize,
    cfg: &SimConfig,
    seed: u64,
) -> Result<Dataset, SimError> {
    assert!(n_frames > 0 && !tracks.is_empty());
    let mut frames = Vec::with_capacity(n_frames);
    let geoms: Vec<MapGeom> = tracks
        .iter()
        .map(|t| MapGeom {
            roads: t.roads(),
            route: t.centerline(),
        })
        .collect();
    let quota = n_frames.div_ceil(tracks.len());
    let seg_m = SEGMENT_RECORD_M + k as f64 + 2.0;
    let seg_ticks = (seg_m / (cfg.speed * cfg.dt)).ceil() as u64;
    for (ti, track) in tracks.iter().enumerate() {
        let want = quota.min(n_frames - frames.len());
        if want == 0 {
            break;
        }
        let usable = if track.closed {
            track.total_length()
        } else {
            (track.total_length() - seg_m - PURSUIT_LOOKAHEAD - 2.0).max(1.0)
        };
        let mut seg = 0u64;
        while frames.len() < (ti + 1) * quota && frames.len() < n_frames {
            // Golden-ratio stride spreads segment starts over the track.
            let s0 = (seg as f64 * 0.618_033_988_749_895 * usable) % usable;
            let seg_seed = splitmix64(seed ^ ((ti as u64) << 48) ^ (seg << 24));
            let mut jitter_rng = ChaCha8Rng::seed_from_u64(seg_seed);
            let offset = jitter_rng.random_range(-1.0..1.0) * cfg.start_offset_jitter;
            let dpsi = jitter_rng.random_range(-1.0..1.0) * cfg.start_heading_jitter;
            let p = track.sample(s0);
            let left = [-p.heading.sin(), p.heading.cos()];
            let mut state = VehicleState {
                x: p.pos[0] + offset * left[0],
                y: p.pos[1] + offset * left[1],
                heading: p.heading + dpsi,
                speed: cfg.speed,
                distance: 0.0,
            };
            let mut s_hint = s0;
            let mut trajectory = Vec::with_capacity(seg_ticks as usize);
            let mut recorded = Vec::with_capacity(seg_ticks as usize);
            for tick in 0..seg_ticks {
                let kappa = oracle_driver_hinted(track, &state, s_hint)?;
                let clamped = kappa.clamp(-cfg.kappa_max, cfg.kappa_max);
                trajectory.push(TrajectorySample {
                    distance: state.distance,
                    yaw_rate: state.speed * clamped,
                    speed: state.speed,
                });
                if tick % RECORD_EVERY == 0 && state.distance <= SEGMENT_RECORD_M {
                    recorded.push((state, tick_seed(seg_seed, tick)));
                }
                let (next, _) = step(&state, kappa, cfg.dt, cfg.kappa_max);
                state = next;
                s_hint = track.project([state.x, state.y], s_hint).0;
            }
            let mut hint = s0;
            for (s, scan_seed) in recorded {
                if frames.len() >= n_frames || frames.len() >= (ti + 1) * quota {
                    break;
                }
                let labels = match curvature_labels(&trajectory, s.distance, k) {
                    Ok(l) => l,
                    Err(crate::geometry::GeometryError::LookaheadBeyondTrajectory {
                        ..
                    }) => break,
                    Err(e) => return Err(e.into()),
                };
                let cloud = scan_clean(track, &s.pose(), scan_seed);
                let (s_proj, _) = track.project([s.x, s.y], hint);
                hint = s_proj;
                let tag = if track.fork_distance(s_proj) < 15.0 {
                    FrameTag::Turn
                } else {
                    FrameTag::LaneStable
                };
                frames.push(Frame {
                    cloud,
                    labels,
                    tag,
                    pose: s.pose(),
                    track: ti,
                });
            }
            seg += 1;
        }
    }
    Ok(Dataset::new(frames, geoms)?)
}

fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

/// Line-delimited trace: one line per tick (tick number plus 12 fields,
/// tab-separated), then a summary block.
pub fn write_trace<W: Write>(mut w: W, trace: &EpisodeTrace) -> io::Result<()> {
    for t in &trace.ticks {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            t.tick,
            fmt_f(t.d),
            fmt_f(t.x),
            fmt_f(t.y),
            fmt_f(t.heading),
            fmt_f(t.speed),
            fmt_f(t.cte),
            fmt_f(t.heading_err),
            fmt_f(t.raw_pred),
            fmt_f(t.fused),
            t.bin_count,
            t.failure as u8,
            t.intervention as u8,
        )?;
    }
    writeln!(w, "summary")?;
    writeln!(w, "interventions\t{}", trace.interventions)?;
    writeln!(w, "distance\t{}", fmt_f(trace.distance))?;
    writeln!(w, "completed\t{}", trace.completed as u8)?;
    Ok(())
}

pub fn read_trace<R: BufRead>(r: R) -> io::Result<EpisodeTrace> {
    let bad = |msg: &str| io::Error::new(io::ErrorKind::InvalidData, msg.to_string());
    let mut ticks = Vec::new();
    let mut interventions = None;
    let mut distance = None;
    let mut completed = None;
    let mut in_summary = false;
    for line in r.lines() {
        let line = line?;
        if line == "summary" {
            in_summary = true;
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if in_summary {
            match cols.as_slice() {
                ["interventions", v] => interventions = Some(v.parse().map_err(|_| bad("interventions"))?),
                ["distance", v] => distance = Some(v.parse().map_err(|_| bad("distance"))?),
                ["completed", v] => completed = Some(*v == "1"),
                _ => return Err(bad("unknown summary row")),
            }
            continue;
        }
        if cols.len() != 13 {
            return Err(bad("tick line must have 13 columns"));
        }
        let f = |i: usize| -> io::Result<f64> { cols[i].parse().map_err(|_| bad("bad float")) };
        ticks.push(TickRecord {
            tick: cols[0].parse().map_err(|_| bad("bad tick"))?,
            d: f(1)?,
            x: f(2)?,
            y: f(3)?,
            heading: f(4)?,
            speed: f(5)?,
            cte: f(6)?,
            heading_err: f(7)?,
            raw_pred: f(8)?,
            fused: f(9)?,
            bin_count: cols[10].parse().map_err(|_| bad("bad bin count"))?,
            failure: cols[11] == "1",
            intervention: cols[12] == "1",
        });
    }
    Ok(EpisodeTrace {
        ticks,
        interventions: interventions.ok_or_else(|| bad("missing summary"))?,
        distance: distance.ok_or_else(|| bad("missing summary"))?,
        completed: completed.ok_or_else(|| bad("missing summary"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn straight_step_advances_half_meter() {
        let s = VehicleState {
            x: 0.0,
            y: 0.0,
            heading: 0.0,
            speed: 5.0,
            distance: 0.0,
        };
        let (n, clamped) = step(&s, 0.0, 0.1, 0.3);
        assert!(!clamped);
        assert_relative_eq!(n.x, 0.5, epsilon = 1e-12);
        assert_eq!(n.heading, 0.0);
        assert_relative_eq!(n.distance, 0.5);
    }

    #[test]
    fn yaw_rate_matches_v_kappa_dt() {
        let s = VehicleState {
            x: 0.0,
            y: 0.0,
            heading: 0.0,
            speed: 5.0,
            distance: 0.0,
        };
        let (n, _) = step(&s, 0.1, 0.1, 0.3);
        assert_relative_eq!(n.heading, 0.05, epsilon = 1e-12);
    }

    #[test]
    fn overlarge_command_clamped_and_flagged() {
        let s = VehicleState {
            x: 0.0,
            y: 0.0,
            heading: 0.0,
            speed: 5.0,
            distance: 0.0,
        };
        let (n, clamped) = step(&s, 1.0, 0.1, 0.3);
        assert!(clamped);
        assert_relative_eq!(n.heading, 5.0 * 0.3 * 0.1, epsilon = 1e-12);
    }

    #[test]
    fn full_circle_returns_to_start() {
        let mut s = VehicleState {
            x: 0.0,
            y: 0.0,
            heading: 0.0,
            speed: 5.0,
            distance: 0.0,
        };
        // 250 ticks of 0.5 m close the loop exactly at this curvature.
        let kappa = 2.0 * std::f64::consts::PI / 125.0;
        for _ in 0..250 {
            s = step(&s, kappa, 0.1, 0.3).0;
        }
        let err = (s.x * s.x + s.y * s.y).sqrt();
        assert!(err < 0.1, "closure error {err}");
    }

    #[test]
    fn oracle_near_zero_on_straight() {
        let t = Track::straight(200.0, 4.0);
        let s = VehicleState {
            x: 50.0,
            y: 0.0,
            heading: 0.0,
            speed: 5.0,
            distance: 50.0,
        };
        assert!(oracle_driver(&t, &s).unwrap().abs() < 1e-3);
    }

    #[test]
    fn oracle_matches_circle_curvature() {
        let t = Track::circle(50.0, 4.0);
        let p = t.sample(30.0);
        let s = VehicleState {
            x: p.pos[0],
            y: p.pos[1],
            heading: p.heading,
            speed: 5.0,
            distance: 30.0,
        };
        let kappa = oracle_driver(&t, &s).unwrap();
        assert_relative_eq!(kappa, 0.02, max_relative = 0.05);
    }

    #[test]
    fn oracle_steers_back_toward_center() {
        let t = Track::straight(200.0, 4.0);
        let s = VehicleState {
            x: 50.0,
            y: 0.5,
            heading: 0.0,
            speed: 5.0,
            distance: 50.0,
        };
        assert!(oracle_driver(&t, &s).unwrap() < 0.0);
    }

    #[test]
    fn oracle_off_track_is_an_error() {
        let t = Track::straight(200.0, 4.0);
        let s = VehicleState {
            x: 50.0,
            y: 9.0,
            heading: 0.0,
            speed: 5.0,
            distance: 50.0,
        };
        assert!(matches!(
            oracle_driver(&t, &s),
            Err(SimError::OffTrack { .. })
        ));
    }

    #[test]
    fn oracle_completes_stock_tracks_without_intervention() {
        let cfg = SimConfig::default();
        for track in [
            Track::straight(150.0, 4.0),
            Track::circle(40.0, 4.0),
            Track::wavy(200.0, 0.03, 70.0, 4.0),
            Track::forked(150.0, 80.0, 4.0),
        ] {
            let trace = run_episode(&mut Policy::Oracle, &track, None, &cfg, 0).unwrap();
            assert_eq!(trace.interventions, 0, "track failed");
            assert!(trace.completed);
        }
    }

    #[test]
    fn constant_zero_fails_on_circle() {
        let cfg = SimConfig::default();
        let track = Track::circle(40.0, 4.0);
        let trace = run_episode(&mut Policy::Constant(0.0), &track, None, &cfg, 0).unwrap();
        assert!(trace.interventions >= 1);
    }

    #[test]
    fn intervention_resets_to_centerline() {
        let cfg = SimConfig::default();
        let track = Track::circle(40.0, 4.0);
        let trace = run_episode(&mut Policy::Constant(0.0), &track, None, &cfg, 0).unwrap();
        let idx = trace.ticks.iter().position(|t| t.intervention).unwrap();
        // Tick after a reset sits on the centerline.
        let after = &trace.ticks[idx + 1];
        assert!(after.cte.abs() < 0.6, "cte after reset {}", after.cte);
    }

    #[test]
    fn oracle_recovers_from_twenty_degree_offsets() {
        let cfg = SimConfig::default();
        let track = Track::straight(200.0, 4.0);
        for sign in [-1.0, 1.0] {
            let ok = recovery_trial(
                &mut Policy::Oracle,
                &track,
                sign * 20.0_f64.to_radians(),
                &cfg,
                0,
            )
            .unwrap();
            assert!(ok, "failed for sign {sign}");
        }
    }

    #[test]
    fn zero_perturbation_recovery_is_immediate() {
        let cfg = SimConfig::default();
        let track = Track::straight(200.0, 4.0);
        assert!(recovery_trial(&mut Policy::Oracle, &track, 0.0, &cfg, 0).unwrap());
    }

    #[test]
    fn episodes_are_deterministic() {
        let cfg = SimConfig::default();
        let track = Track::wavy(120.0, 0.03, 60.0, 4.0);
        let a = run_episode(&mut Policy::Oracle, &track, None, &cfg, 7).unwrap();
        let b = run_episode(&mut Policy::Oracle, &track, None, &cfg, 7).unwrap();
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        write_trace(&mut buf_a, &a).unwrap();
        write_trace(&mut buf_b, &b).unwrap();
        assert_eq!(buf_a, buf_b);
    }

    #[test]
    fn trace_round_trips() {
        let cfg = SimConfig::default();
        let track = Track::straight(60.0, 4.0);
        let trace = run_episode(&mut Policy::Oracle, &track, None, &cfg, 3).unwrap();
        let mut buf = Vec::new();
        write_trace(&mut buf, &trace).unwrap();
        let back = read_trace(buf.as_slice()).unwrap();
        // NaN fields defeat direct equality; compare serialized form.
        let mut buf2 = Vec::new();
        write_trace(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
        assert_eq!(back.interventions, trace.interventions);
        assert_eq!(back.completed, trace.completed);
    }

    fn no_jitter() -> SimConfig {
        SimConfig {
            start_offset_jitter: 0.0,
            start_heading_jitter: 0.0,
            ..SimConfig::default()
        }
    }

    #[test]
    fn straight_dataset_all_lane_stable_near_zero_labels() {
        let cfg = no_jitter();
        let tracks = vec![Track::straight(300.0, 4.0)];
        let ds = gen_dataset(&tracks, 20, 5, &cfg, 1).unwrap();
        assert_eq!(ds.frames.len(), 20);
        assert!(ds.frames.iter().all(|f| f.tag == FrameTag::LaneStable));
        for f in &ds.frames {
            for &v in &f.labels.values {
                assert!(v.abs() < 1e-3, "label {v}");
            }
        }
    }

    #[test]
    fn forked_dataset_tags_turn_frames() {
        let cfg = SimConfig::default();
        let tracks = vec![Track::forked(260.0, 100.0, 4.0)];
        let ds = gen_dataset(&tracks, 250, 5, &cfg, 1).unwrap();
        assert!(ds.frames.iter().any(|f| f.tag == FrameTag::Turn));
        assert!(ds.frames.iter().any(|f| f.tag == FrameTag::LaneStable));
    }

    #[test]
    fn dataset_regeneration_identical() {
        let cfg = SimConfig::default();
        let tracks = vec![Track::wavy(200.0, 0.03, 60.0, 4.0)];
        let a = gen_dataset(&tracks, 15, 4, &cfg, 9).unwrap();
        let b = gen_dataset(&tracks, 15, 4, &cfg, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn curved_dataset_labels_match_track_curvature() {
        let cfg = no_jitter();
        let tracks = vec![Track::circle(40.0, 4.0)];
        let ds = gen_dataset(&tracks, 30, 5, &cfg, 2).unwrap();
        // Steady-state circle driving: labels approximate 1/R.
        let f = &ds.frames[25];
        for &v in &f.labels.values {
            assert_relative_eq!(v, 0.025, max_relative = 0.2);
        }
    }

    #[test]
    fn jittered_segments_cover_recovery_steering() {
        let cfg = SimConfig::default();
        let tracks = vec![Track::straight(300.0, 4.0)];
        let ds = gen_dataset(&tracks, 200, 5, &cfg, 1).unwrap();
        // Off-center starts force nonzero corrective labels somewhere.
        let max_label = ds
            .frames
            .iter()
            .flat_map(|f| f.labels.values.iter())
            .fold(0.0_f64, |m, &v| m.max(v.abs()));
        assert!(max_label > 5e-3, "max |label| {max_label}");
        // Poses actually leave the centerline.
        let max_off = ds
            .frames
            .iter()
            .map(|f| f.pose.y.abs())
            .fold(0.0_f64, f64::max);
        assert!(max_off > 0.3, "max offset {max_off}");
    }
}
