//! Deployment-time fusion runtime: a 1-D Kalman travelled-distance
//! estimator, a distance-indexed prediction buffer, and the three
//! fusion policies (instantaneous, uniform, evidential).

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("no predictions buffered for distance bin {0}")]
    EmptyBin(i64),
    #[error("no instantaneous (lookahead-0) prediction in bin {0}")]
    NoInstantaneous(i64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Use only the current frame's lookahead-0 prediction.
    None,
    /// Arithmetic mean over the bin.
    Uniform,
    /// Confidence-weighted mean over the bin.
    Evidential,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::None => "none",
            FusionMode::Uniform => "uniform",
            FusionMode::Evidential => "evidential",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(FusionMode::None),
            "uniform" => Some(FusionMode::Uniform),
            "evidential" => Some(FusionMode::Evidential),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KalmanConfig {
    /// Speed random-walk intensity, (m/s)^2 per second.
    pub process_noise: f64,
    /// Speed measurement variance, (m/s)^2.
    pub measurement_noise: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self {
            process_noise: 0.05,
            measurement_noise: 0.01,
        }
    }
}

/// Scalar Kalman filter over speed, integrated into travelled distance.
/// Distance is monotone non-decreasing by construction.
#[derive(Debug, Clone, Copy)]
pub struct DistanceEstimator {
    pub distance: f64,
    /// Accumulated distance variance.
    pub variance: f64,
    speed: f64,
    speed_var: f64,
    cfg: KalmanConfig,
}

impl DistanceEstimator {
    pub fn new(cfg: KalmanConfig) -> Self {
        Self {
            distance: 0.0,
            variance: 1e-6,
            // Diffuse prior: the first measurement dominates.
            speed: 0.0,
            speed_var: 1e12,
            cfg,
        }
    }

    /// Predict-then-correct on the speed state, then integrate distance.
    /// Negative measured speeds clamp to 0.
    pub fn kf_update(&mut self, measured_speed: f64, dt: f64) {
        assert!(dt > 0.0, "dt must be positive");
        let z = measured_speed.max(0.0);
        self.speed_var += self.cfg.process_noise * dt;
        let gain = self.speed_var / (self.speed_var + self.cfg.measurement_noise);
        self.speed += gain * (z - self.speed);
        self.speed_var *= 1.0 - gain;
        let v = self.speed.max(0.0);
        self.distance += v * dt;
        self.variance += self.speed_var * dt * dt;
    }

    pub fn speed(&self) -> f64 {
        self.speed.max(0.0)
    }
}

/// One buffered prediction: control, confidence, and the lookahead it
/// was predicted at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub x: f64,
    pub lambda: f64,
    pub lookahead: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FusionConfig {
    /// Divide the evidential weighted mean by the entry count as well,
    /// reproducing the double normalization written in the source
    /// algorithm. Off by default (plain weighted mean).
    pub literal_double_norm: bool,
}

/// Distance-indexed bins of future-control predictions (1 m wide,
/// matching the integer-meter lookahead grid). Within a bin, the latest
/// prediction per lookahead index wins, so a bin never exceeds K
/// entries.
#[derive(Debug, Clone)]
pub struct PredictionBuffer {
    k: usize,
    bins: BTreeMap<i64, Vec<Entry>>,
    cfg: FusionConfig,
}

/// How many lookaheads a [`PredictionBuffer::record`] call stored and
/// skipped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RecordOutcome {
    pub stored: usize,
    /// Entries dropped for invalid (non-finite or non-positive)
    /// variance.
    pub skipped: usize,
}

fn bin_index(d: f64) -> i64 {
    d.round() as i64
}

impl PredictionBuffer {
    pub fn new(k: usize, cfg: FusionConfig) -> Self {
        assert!(k > 0);
        Self {
            k,
            bins: BTreeMap::new(),
            cfg,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Store one frame's K predictions at distance `d`. `variances`
    /// carries the evidential epistemic variances; `None` stores every
    /// entry with unit confidence (deterministic models).
    pub fn record(&mut self, d: f64, x: &[f64], variances: Option<&[f64]>) -> RecordOutcome {
        assert_eq!(x.len(), self.k, "prediction length must equal K");
        if let Some(v) = variances {
            assert_eq!(v.len(), self.k, "variance length must equal K");
        }
        let mut outcome = RecordOutcome::default();
        for (j, &xj) in x.iter().enumerate() {
            let lambda = match variances {
                None => 1.0,
                Some(vs) => {
                    if vs[j].is_finite() && vs[j] > 0.0 {
                        1.0 / vs[j]
                    } else {
                        outcome.skipped += 1;
                        continue;
                    }
                }
            };
            let bin = self.bins.entry(bin_index(d + j as f64)).or_default();
            let entry = Entry {
                x: xj,
                lambda,
                lookahead: j,
            };
            match bin.iter_mut().find(|e| e.lookahead == j) {
                Some(existing) => *existing = entry,
                None => bin.push(entry),
            }
            outcome.stored += 1;
        }
        self.purge(d);
        outcome
    }

    /// Drop bins more than 2 m behind the current distance.
    pub fn purge(&mut self, d: f64) {
        let cutoff = bin_index(d) - 2;
        self.bins.retain(|&b, _| b >= cutoff);
    }

    pub fn bin_entries(&self, d: f64) -> &[Entry] {
        self.bins
            .get(&bin_index(d))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Fuse the current bin's entries under the requested policy.
    pub fn fuse(&self, d: f64, mode: FusionMode) -> Result<FusedControl, FusionError> {
        let bin = bin_index(d);
        let entries = self
            .bins
            .get(&bin)
            .filter(|e| !e.is_empty())
            .ok_or(FusionError::EmptyBin(bin))?;
        let output = match mode {
            FusionMode::None => {
                entries
                    .iter()
                    .find(|e| e.lookahead == 0)
                    .ok_or(FusionError::NoInstantaneous(bin))?
                    .x
            }
            FusionMode::Uniform => {
                entries.iter().map(|e| e.x).sum::<f64>() / entries.len() as f64
            }
            FusionMode::Evidential => {
                let total: f64 = entries.iter().map(|e| e.lambda).sum();
                let mut out: f64 = entries.iter().map(|e| e.x * e.lambda / total).sum();
                if self.cfg.literal_double_norm {
                    out /= entries.len() as f64;
                }
                out
            }
        };
        let total: f64 = entries.iter().map(|e| e.lambda).sum();
        Ok(FusedControl {
            output,
            mode,
            bin,
            entries: entries
                .iter()
                .map(|e| WeightedEntry {
                    x: e.x,
                    lambda_hat: e.lambda / total,
                    lookahead: e.lookahead,
                })
                .collect(),
        })
    }
}

/// Fusion result plus per-tick diagnostics for the episode trace.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedControl {
    pub output: f64,
    pub mode: FusionMode,
    pub bin: i64,
    pub entries: Vec<WeightedEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedEntry {
    pub x: f64,
    pub lambda_hat: f64,
    pub lookahead: usize,
}
