//! Subcommand implementations and shared plumbing.

pub mod bench_kernel;
pub mod gen_data;
pub mod gradcheck;
pub mod run;
pub mod train;

use anyhow::{bail, Result};
use sevnav_core::sim::{SimConfig, Track};
use sevnav_core::nn::NetConfig;
use sevnav_core::trainer::TrainConfig;

use crate::config::RunConfig;

/// Stock track family; parameters are fixed so datasets and evaluation
/// episodes are reproducible from names alone.
pub fn make_track(name: &str) -> Result<Track> {
    Ok(match name {
        "straight" => Track::straight(300.0, 4.0),
        "circle" => Track::circle(40.0, 4.0),
        "wavy" => Track::wavy(240.0, 0.035, 90.0, 4.0),
        "forked" => Track::forked(260.0, 140.0, 4.0),
        _ => bail!("unknown track {name:?} (straight|circle|wavy|forked)"),
    })
}

pub fn sim_config(cfg: &RunConfig) -> SimConfig {
    SimConfig {
        dt: cfg.sim.dt,
        speed: cfg.sim.speed,
        kappa_max: cfg.sim.kappa_max,
        cte_limit: cfg.sim.cte_limit,
        heading_limit: cfg.sim.heading_limit_deg.to_radians(),
        hold_limit: cfg.sim.hold_limit,
        voxel_size: cfg.train.voxel_size,
        filter_radius: cfg.train.filter_radius,
        ..SimConfig::default()
    }
}

pub fn train_config(cfg: &RunConfig, seed: u64, k: usize) -> TrainConfig {
    TrainConfig {
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        lr0: cfg.train.lr0,
        weight_decay: cfg.train.weight_decay,
        seed,
        k,
        mode: cfg.train.mode,
        navigation: cfg.train.navigation,
        augment: cfg.train.augment,
        voxel_size: cfg.train.voxel_size,
        filter_radius: cfg.train.filter_radius,
        base_arch: NetConfig {
            widths: cfg.train.widths,
            map_widths: cfg.train.map_widths,
            trunk_feat: cfg.train.trunk_feat,
            map_feat: cfg.train.map_feat,
            ..NetConfig::default()
        },
        ..TrainConfig::default()
    }
}
