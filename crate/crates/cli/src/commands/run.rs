use std::fs;
use std::io::{BufWriter, Write as _};

use anyhow::{Context, Result};
use rayon::prelude::*;
use sevnav_core::fusion::{FusionConfig, FusionMode};
use sevnav_core::nn::load_checkpoint;
use sevnav_core::sim::{run_episode, write_trace, FailureSchedule, Policy};

use crate::config::RunConfig;

use super::{make_track, sim_config};

pub const SUMMARY_HEADER: &str = "mode\tseed\tinterventions\tdistance\tcompleted";

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn cmd_run(cfg: &RunConfig, seed: u64, mode_override: Option<FusionMode>) -> Result<()> {
    let ckpt = cfg.checkpoint_path();
    let net = load_checkpoint(&ckpt)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let track = make_track(&cfg.run.track)?;
    let sim_cfg = sim_config(cfg);
    let schedule = cfg
        .failures
        .enabled
        .then(|| FailureSchedule::new(cfg.failures.period, cfg.failures.duration, cfg.failures.kind));
    let fusion = FusionConfig {
        literal_double_norm: cfg.fusion.literal_double_norm,
    };
    let modes = match mode_override {
        Some(m) => vec![m],
        None => vec![FusionMode::None, FusionMode::Uniform, FusionMode::Evidential],
    };
    let jobs: Vec<(FusionMode, u64)> = modes
        .iter()
        .flat_map(|&m| (0..cfg.run.seeds as u64).map(move |s| (m, seed + s)))
        .collect();
    let traces = jobs
        .par_iter()
        .map(|&(mode, ep_seed)| {
            let mut policy = Policy::Net {
                net: &net,
                mode,
                fusion,
            };
            run_episode(&mut policy, &track, schedule.as_ref(), &sim_cfg, ep_seed)
                .map(|t| (mode, ep_seed, t))
        })
        .collect::<Result<Vec<_>, _>>()
        .context("running episodes")?;

    fs::create_dir_all(&cfg.paths.out)?;
    let mut summary = String::from(SUMMARY_HEADER);
    summary.push('\n');
    for (mode, ep_seed, trace) in &traces {
        let path = cfg
            .paths
            .out
            .join(format!("trace_{}_{}.tsv", mode.as_str(), ep_seed));
        let mut w = BufWriter::new(fs::File::create(&path)?);
        write_trace(&mut w, trace)?;
        w.flush()?;
        summary.push_str(&format!(
            "{}\t{}\t{}\t{:?}\t{}\n",
            mode.as_str(),
            ep_seed,
            trace.interventions,
            trace.distance,
            trace.completed as u8
        ));
    }
    fs::write(cfg.paths.out.join("summary.tsv"), &summary)?;

    println!("{:<12} {:>8} {:>10} {:>10}", "mode", "episodes", "median_iv", "completed");
    for &mode in &modes {
        let ivs: Vec<f64> = traces
            .iter()
            .filter(|(m, _, _)| *m == mode)
            .map(|(_, _, t)| t.interventions as f64)
            .collect();
        let completed = traces
            .iter()
            .filter(|(m, _, t)| *m == mode && t.completed)
            .count();
        println!(
            "{:<12} {:>8} {:>10.1} {:>10}",
            mode.as_str(),
            ivs.len(),
            median(ivs),
            completed
        );
    }
    println!("traces and summary.tsv written to {}", cfg.paths.out.display());
    Ok(())
}
