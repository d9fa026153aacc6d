//! Kernel benchmark: naive per-pair sparse convolution against the
//! gather-GEMM-scatter path on synthetic voxel sets, with a correctness
//! gate before any timing.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sparse::{build_kernel_map, KernelMap, KernelMapError};

use super::mat::Mat;
use super::sparse_conv::{conv_forward, conv_naive, ConvParams, ShapeError};

pub const BENCH_WARMUPS: usize = 10;
pub const BENCH_REPS: usize = 30;
pub const BENCH_TOL: f64 = 1e-6;
pub const BENCH_CHANNELS: usize = 16;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    KernelMap(#[from] KernelMapError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("naive and gather-GEMM outputs diverge at {voxels} voxels: max relative error {err:e}")]
    Mismatch { voxels: usize, err: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BenchCase {
    pub voxels: usize,
    pub pairs: usize,
    pub naive_median_ms: f64,
    pub gemm_median_ms: f64,
    pub speedup: f64,
    /// Max relative difference between the two paths (gate: <= 1e-6).
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BenchReport {
    pub channels: usize,
    pub warmups: usize,
    pub reps: usize,
    pub tolerance: f64,
    pub cases: Vec<BenchCase>,
}

/// Random voxel occupancy at roughly 10% density, sized to the voxel
/// count, plus random weights.
pub fn random_instance(voxels: usize, channels: usize, seed: u64) -> (Vec<[i32; 3]>, Mat, ConvParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = ((voxels as f64 * 10.0).cbrt().ceil() as i32).max(2);
    let mut coords = Vec::with_capacity(voxels);
    let mut seen = std::collections::HashSet::with_capacity(voxels * 2);
    while coords.len() < voxels {
        let c = [
            rng.random_range(0..side),
            rng.random_range(0..side),
            rng.random_range(0..side),
        ];
        if seen.insert(c) {
            coords.push(c);
        }
    }
    let mut features = Mat::zeros(voxels, channels);
    for v in features.data.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let mut params = ConvParams::zeros(27, channels, channels);
    for w in params.weights.iter_mut() {
        for v in w.data.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    for b in params.bias.iter_mut() {
        *b = rng.random_range(-0.1..0.1);
    }
    (coords, features, params)
}

fn max_rel_err(a: &Mat, b: &Mat) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs() / (1.0 + x.abs().max(y.abs())))
        .fold(0.0, f64::max)
}

fn median_ms(mut times: Vec<f64>) -> f64 {
    times.sort_by(f64::total_cmp);
    let n = times.len();
    if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    }
}

fn time_reps<F: FnMut()>(mut f: F, warmups: usize, reps: usize) -> f64 {
    for _ in 0..warmups {
        f();
    }
    let times: Vec<f64> = (0..reps)
        .map(|_| {
            let t0 = Instant::now();
            f();
            t0.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    median_ms(times)
}

pub fn bench_case(
    voxels: usize,
    warmups: usize,
    reps: usize,
    seed: u64,
) -> Result<BenchCase, BenchError> {
    let (coords, features, params) = random_instance(voxels, BENCH_CHANNELS, seed);
    let km: KernelMap = build_kernel_map(&coords, 3, 1)?;
    let n_out = km.out_coords.len();
    let gemm = conv_forward(&features, &km.offsets, &params, n_out)?;
    let naive = conv_naive(&features, &km.offsets, &params, n_out)?;
    let err = max_rel_err(&gemm, &naive);
    if err > BENCH_TOL {
        return Err(BenchError::Mismatch { voxels, err });
    }
    let pairs: usize = km.offsets.iter().map(|o| o.pairs.len()).sum();
    let naive_median_ms = time_reps(
        || {
            std::hint::black_box(conv_naive(&features, &km.offsets, &params, n_out).unwrap());
        },
        warmups,
        reps,
    );
    let gemm_median_ms = time_reps(
        || {
            std::hint::black_box(conv_forward(&features, &km.offsets, &params, n_out).unwrap());
        },
        warmups,
        reps,
    );
    Ok(BenchCase {
        voxels,
        pairs,
        naive_median_ms,
        gemm_median_ms,
        speedup: naive_median_ms / gemm_median_ms,
        max_rel_err: err,
    })
}

/// Benchmark the two execution paths over the given voxel counts.
pub fn run_bench(
    sizes: &[usize],
    warmups: usize,
    reps: usize,
    seed: u64,
) -> Result<BenchReport, BenchError> {
    let cases = sizes
        .iter()
        .enumerate()
        .map(|(i, &v)| bench_case(v, warmups, reps, seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BenchReport {
        channels: BENCH_CHANNELS,
        warmups,
        reps,
        tolerance: BENCH_TOL,
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_bench_passes_gate_and_reports_speedup() {
        let report = run_bench(&[2000, 5000], 1, 3, 7).unwrap();
        assert_eq!(report.cases.len(), 2);
        for c in &report.cases {
            assert!(c.max_rel_err <= BENCH_TOL);
            assert!(c.speedup > 0.0);
            assert!(c.naive_median_ms > 0.0 && c.gemm_median_ms > 0.0);
        }
    }

    #[test]
    fn report_round_trips_through_json() {
        let report = run_bench(&[1500], 0, 1, 1).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: BenchReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn median_of_even_and_odd_sets() {
        assert_eq!(median_ms(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median_ms(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
