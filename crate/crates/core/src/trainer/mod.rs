//! Minibatch training: seeded shuffling, per-frame augmentation, ADAM
//! with decoupled weight decay, a cosine learning-rate schedule, and
//! per-epoch metrics logging.

pub mod data;

pub use data::{load_dataset, save_dataset, DataError, Dataset, Frame, FrameTag, MapGeom};

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::evidential::{frame_loss, EvidentialError, LossTerms};
use crate::geometry::{augment, augment_map, filter_near, quantize, render_map, GeometryConfig};
use crate::nn::{BnStats, FastLidarNet, NetConfig, NnError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient; step rejected")]
    NonFiniteGrad,
    #[error("non-finite loss at epoch {0}")]
    NonFiniteLoss(usize),
    #[error("no trainable frames after tag filtering")]
    NoFrames,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Loss(#[from] EvidentialError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("metrics log: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelMode {
    Deterministic,
    Hybrid,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub seed: u64,
    pub k: usize,
    pub mode: ModelMode,
    pub navigation: bool,
    /// Random scale/rotation augmentation with label correction.
    pub augment: bool,
    pub voxel_size: f64,
    pub filter_radius: f64,
    /// Map raster rendering.
    pub map_resolution: f64,
    pub road_half_width: f64,
    pub route_half_width: f64,
    /// Architecture template; k/hybrid/navigation are overridden from
    /// the fields above.
    pub base_arch: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            batch_size: 64,
            lr0: 3e-3,
            betas: (0.9, 0.999),
            weight_decay: 1e-4,
            seed: 0,
            k: 10,
            mode: ModelMode::Hybrid,
            navigation: true,
            augment: true,
            voxel_size: 0.2,
            filter_radius: 3.0,
            map_resolution: 1.0,
            road_half_width: 4.0,
            route_half_width: 1.5,
            base_arch: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            k: self.k,
            hybrid: self.mode == ModelMode::Hybrid,
            navigation: self.navigation,
            ..self.base_arch.clone()
        }
    }
}

/// lr = 0.5 * lr0 * (1 + cos(pi * epoch / epochs)), floored at 0.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> f64 {
    let phase = std::f64::consts::PI * epoch as f64 / cfg.epochs as f64;
    (0.5 * cfg.lr0 * (1.0 + phase.cos())).max(0.0)
}

const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: FastLidarNet,
    pub v: FastLidarNet,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(net: &FastLidarNet) -> Self {
        Self {
            m: net.zeros_like(),
            v: net.zeros_like(),
            step: 0,
        }
    }
}

/// Bias-corrected ADAM update on one tensor, with decoupled weight
/// decay applied alongside the gradient step.
pub fn adam_update_tensor(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    betas: (f64, f64),
    weight_decay: f64,
) {
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * p[i]);
    }
}

/// One optimizer step over every trainable tensor. Rejects the whole
/// step, leaving parameters and state untouched, if any gradient entry
/// is non-finite.
pub fn adam_step(
    net: &mut FastLidarNet,
    grads: &FastLidarNet,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let g_tensors = grads.tensors(true);
    if g_tensors
        .iter()
        .any(|t| t.iter().any(|v| !v.is_finite()))
    {
        return Err(TrainError::NonFiniteGrad);
    }
    state.step += 1;
    let step = state.step;
    let mut p_tensors = net.tensors_mut(true);
    let mut m_tensors = state.m.tensors_mut(true);
    let mut v_tensors = state.v.tensors_mut(true);
    for i in 0..p_tensors.len() {
        adam_update_tensor(
            p_tensors[i],
            g_tensors[i],
            m_tensors[i],
            v_tensors[i],
            step,
            lr,
            cfg.betas,
            cfg.weight_decay,
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Scale-weighted loss terms, averaged per frame.
    pub terms: LossTerms,
    /// Unweighted mean absolute curvature error (1/m) of the
    /// deterministic head over the epoch.
    pub mae: f64,
}

#[derive(Debug)]
pub struct TrainResult {
    pub net: FastLidarNet,
    pub metrics: Vec<EpochMetrics>,
    /// Frames remaining after the navigation tag filter.
    pub frames_used: usize,
}

pub const METRICS_HEADER: &str = "epoch\tlr\tloss_total\tloss_mae\tloss_nll\tloss_r";

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn frame_seed(seed: u64, epoch: usize, frame: usize) -> u64 {
    splitmix64(seed ^ splitmix64((epoch as u64) << 32 | frame as u64))
}

struct FrameResult {
    grads: FastLidarNet,
    terms: LossTerms,
    bn: BnStats,
    abs_err: f64,
}

fn process_frame(
    net: &FastLidarNet,
    frame: &Frame,
    ds: &Dataset,
    cfg: &TrainConfig,
    geom: &GeometryConfig,
    seed: u64,
) -> Result<FrameResult, TrainError> {
    let (cloud, labels) = if cfg.augment {
        let (c, l, _) = augment(&frame.cloud, &frame.labels, geom, seed);
        (c, l)
    } else {
        (frame.cloud.clone(), frame.labels.clone())
    };
    let filtered = filter_near(&cloud, cfg.filter_radius);
    let vox = quantize(&filtered, cfg.voxel_size, geom);
    let raster = if cfg.navigation {
        let geo = &ds.tracks[frame.track];
        let (pose, flags) = augment_map(
            &frame.pose,
            frame.tag == FrameTag::LaneStable,
            splitmix64(seed ^ 0x6d61705f73616c74),
        );
        Some(render_map(
            &geo.roads,
            &geo.route,
            &pose,
            net.cfg.map_h,
            net.cfg.map_w,
            cfg.map_resolution,
            cfg.road_half_width,
            cfg.route_half_width,
            flags,
        ))
    } else {
        None
    };
    let (out, tape) = net.forward_train(&vox, raster.as_ref())?;
    let (terms, gx, ge) = frame_loss(&out.x, &out.e_raw, &labels.values)?;
    let grads = net.backward(&tape, &gx, &ge);
    let abs_err: f64 = out
        .x
        .iter()
        .zip(&labels.values)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / labels.values.len() as f64;
    Ok(FrameResult {
        grads,
        terms,
        bn: tape.bn_stats(),
        abs_err,
    })
}

/// Full training run. Deterministic in (dataset, config): the returned
/// network serializes to identical bytes across repeat runs.
pub fn train(
    ds: &Dataset,
    cfg: &TrainConfig,
    metrics_out: &mut dyn Write,
) -> Result<TrainResult, TrainError> {
    // LiDAR-only models train on lane-stable frames only; navigation
    // models use both tags.
    let frames: Vec<&Frame> = ds
        .frames
        .iter()
        .filter(|f| cfg.navigation || f.tag == FrameTag::LaneStable)
        .collect();
    if frames.is_empty() {
        return Err(TrainError::NoFrames);
    }
    let geom = GeometryConfig::default();
    let mut net = FastLidarNet::new(cfg.net_config(), cfg.seed);
    let mut opt = OptimizerState::new(&net);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed));

    writeln!(metrics_out, "{METRICS_HEADER}")?;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg);
        let mut order: Vec<usize> = (0..frames.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut epoch_terms = LossTerms::default();
        let mut epoch_abs = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<FrameResult, TrainError>> = batch
                .par_iter()
                .map(|&idx| {
                    process_frame(
                        &net,
                        frames[idx],
                        ds,
                        cfg,
                        &geom,
                        frame_seed(cfg.seed, epoch, idx),
                    )
                })
                .collect();
            let mut batch_grads = net.zeros_like();
            for r in results {
                let fr = r?;
                batch_grads.add_assign(&fr.grads);
                net.apply_bn_stats(&fr.bn);
                epoch_terms.add_assign(&fr.terms);
                epoch_abs += fr.abs_err;
            }
            batch_grads.scale(1.0 / batch.len() as f64);
            adam_step(&mut net, &batch_grads, &mut opt, lr, cfg)?;
        }
        let n = frames.len() as f64;
        epoch_terms.scale(1.0 / n);
        let mae = epoch_abs / n;
        if !epoch_terms.total.is_finite() {
            return Err(TrainError::NonFiniteLoss(epoch));
        }
        writeln!(
            metrics_out,
            "{epoch}\t{lr:e}\t{:e}\t{:e}\t{:e}\t{:e}",
            epoch_terms.total, epoch_terms.mae, epoch_terms.nll, epoch_terms.reg
        )?;
        metrics.push(EpochMetrics {
            epoch,
            lr,
            terms: epoch_terms,
            mae,
        });
    }
    Ok(TrainResult {
        net,
        metrics,
        frames_used: frames.len(),
    })
}
