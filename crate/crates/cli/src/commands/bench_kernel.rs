use std::fs;

use anyhow::{Context, Result};
use sevnav_core::nn::bench::{run_bench, BENCH_REPS, BENCH_WARMUPS};

use crate::config::RunConfig;

pub const BENCH_SIZES: [usize; 4] = [10_000, 40_000, 100_000, 200_000];

pub fn cmd_bench_kernel(cfg: &RunConfig, seed: u64) -> Result<()> {
    let report =
        run_bench(&BENCH_SIZES, BENCH_WARMUPS, BENCH_REPS, seed).context("benchmarking")?;
    println!(
        "{:>8} {:>10} {:>12} {:>12} {:>8}",
        "voxels", "pairs", "naive_ms", "gemm_ms", "speedup"
    );
    for c in &report.cases {
        println!(
            "{:>8} {:>10} {:>12.3} {:>12.3} {:>8.2}",
            c.voxels, c.pairs, c.naive_median_ms, c.gemm_median_ms, c.speedup
        );
    }
    fs::create_dir_all(&cfg.paths.out)?;
    let path = cfg.paths.out.join("bench.json");
    fs::write(&path, serde_json::to_vec_pretty(&report)?)?;
    println!("report: {}", path.display());
    Ok(())
}
