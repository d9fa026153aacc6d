use std::fs;
use std::io::Write as _;

use anyhow::{Context, Result};
use sevnav_core::nn::save_checkpoint;
use sevnav_core::trainer::{load_dataset, train};

use crate::config::RunConfig;

use super::train_config;

pub fn cmd_train(cfg: &RunConfig, seed: u64) -> Result<()> {
    let ds = load_dataset(&cfg.paths.data)
        .with_context(|| format!("loading dataset from {}", cfg.paths.data.display()))?;
    let tc = train_config(cfg, seed, ds.k);
    fs::create_dir_all(&cfg.paths.out)?;
    let metrics_path = cfg.paths.out.join("metrics.tsv");
    let mut metrics = fs::File::create(&metrics_path)?;
    let result = train(&ds, &tc, &mut metrics).context("training")?;
    metrics.flush()?;
    let ckpt = cfg.checkpoint_path();
    save_checkpoint(&ckpt, &result.net).context("writing checkpoint")?;
    let last = result.metrics.last().expect("at least one epoch");
    println!(
        "trained {} epochs on {} frames; final loss {:.4}, mae {:.6} 1/m",
        result.metrics.len(),
        result.frames_used,
        last.terms.total,
        last.mae
    );
    println!("checkpoint: {}", ckpt.display());
    println!("metrics: {}", metrics_path.display());
    Ok(())
}
