use anyhow::{Context, Result};
use sevnav_core::sim::gen_dataset;
use sevnav_core::trainer::{save_dataset, FrameTag};

use crate::config::RunConfig;

use super::{make_track, sim_config};

pub fn cmd_gen_data(cfg: &RunConfig, seed: u64) -> Result<()> {
    let tracks = cfg
        .data
        .tracks
        .iter()
        .map(|n| make_track(n))
        .collect::<Result<Vec<_>>>()?;
    let sim_cfg = sim_config(cfg);
    let ds = gen_dataset(&tracks, cfg.data.frames, cfg.data.k, &sim_cfg, seed)
        .context("generating dataset")?;
    save_dataset(&cfg.paths.data, &ds)
        .with_context(|| format!("writing dataset to {}", cfg.paths.data.display()))?;
    let lane_stable = ds
        .frames
        .iter()
        .filter(|f| f.tag == FrameTag::LaneStable)
        .count();
    println!(
        "wrote {} frames to {} (lane_stable: {}, turn: {})",
        ds.frames.len(),
        cfg.paths.data.display(),
        lane_stable,
        ds.frames.len() - lane_stable
    );
    Ok(())
}
