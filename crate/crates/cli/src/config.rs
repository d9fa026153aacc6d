//! Flat key-value run configuration with `[section]` headers. Unknown
//! sections or keys are rejected; every key can be overridden through
//! the environment as `SEVNAV_<SECTION>_<KEY>`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sevnav_core::fusion::FusionMode;
use sevnav_core::sim::FailureKind;
use sevnav_core::trainer::ModelMode;

pub const ENV_PREFIX: &str = "SEVNAV_";

#[derive(Debug, Clone)]
pub struct PathsSection {
    pub data: PathBuf,
    pub out: PathBuf,
    /// Empty: defaults to `<out>/checkpoint.sevw`.
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone)]
pub struct DataSection {
    pub frames: usize,
    pub k: usize,
    pub tracks: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub mode: ModelMode,
    pub navigation: bool,
    pub augment: bool,
    pub voxel_size: f64,
    pub filter_radius: f64,
    pub widths: [usize; 4],
    pub map_widths: [usize; 2],
    pub trunk_feat: usize,
    pub map_feat: usize,
}

#[derive(Debug, Clone)]
pub struct SimSection {
    pub dt: f64,
    pub speed: f64,
    pub kappa_max: f64,
    pub cte_limit: f64,
    pub heading_limit_deg: f64,
    pub hold_limit: usize,
}

#[derive(Debug, Clone)]
pub struct FusionSection {
    pub mode: FusionMode,
    pub literal_double_norm: bool,
}

#[derive(Debug, Clone)]
pub struct FailuresSection {
    pub enabled: bool,
    pub period: f64,
    pub duration: f64,
    pub kind: FailureKind,
}

#[derive(Debug, Clone)]
pub struct RunSection {
    pub seeds: usize,
    pub track: String,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub paths: PathsSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub sim: SimSection,
    pub fusion: FusionSection,
    pub failures: FailuresSection,
    pub run: RunSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: PathsSection {
                data: "data".into(),
                out: "out".into(),
                checkpoint: PathBuf::new(),
            },
            data: DataSection {
                frames: 2000,
                k: 10,
                tracks: ["straight", "circle", "wavy", "forked"]
                    .map(String::from)
                    .to_vec(),
            },
            train: TrainSection {
                epochs: 250,
                batch_size: 64,
                lr0: 3e-3,
                weight_decay: 1e-4,
                mode: ModelMode::Hybrid,
                navigation: true,
                augment: true,
                voxel_size: 0.2,
                filter_radius: 3.0,
                widths: [16, 16, 32, 64],
                map_widths: [8, 16],
                trunk_feat: 64,
                map_feat: 32,
            },
            sim: SimSection {
                dt: 0.1,
                speed: 5.0,
                kappa_max: 0.3,
                cte_limit: 1.5,
                heading_limit_deg: 60.0,
                hold_limit: 3,
            },
            fusion: FusionSection {
                mode: FusionMode::Evidential,
                literal_double_norm: false,
            },
            failures: FailuresSection {
                enabled: true,
                period: 50.0,
                duration: 5.0,
                kind: FailureKind::EmptyCloud,
            },
            run: RunSection {
                seeds: 5,
                track: "wavy".into(),
            },
        }
    }
}

fn parse<T: std::str::FromStr>(value: &str, what: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| anyhow::anyhow!("invalid {what}: {value:?}"))
}

fn parse_list<const N: usize>(value: &str, what: &str) -> Result<[usize; N]> {
    let parts = value
        .split(',')
        .map(|p| parse(p.trim(), what))
        .collect::<Result<Vec<usize>>>()?;
    parts
        .try_into()
        .map_err(|_| anyhow::anyhow!("{what} expects {N} comma-separated values"))
}

fn parse_bool(value: &str, what: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("invalid {what}: {value:?} (expected true/false)"),
    }
}

impl RunConfig {
    pub fn checkpoint_path(&self) -> PathBuf {
        if self.paths.checkpoint.as_os_str().is_empty() {
            self.paths.out.join("checkpoint.sevw")
        } else {
            self.paths.checkpoint.clone()
        }
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        match (section, key) {
            ("paths", "data") => self.paths.data = value.into(),
            ("paths", "out") => self.paths.out = value.into(),
            ("paths", "checkpoint") => self.paths.checkpoint = value.into(),
            ("data", "frames") => self.data.frames = parse(value, "data.frames")?,
            ("data", "k") => self.data.k = parse(value, "data.k")?,
            ("data", "tracks") => {
                self.data.tracks = value
                    .split(',')
                    .map(|t| t.trim().to_string())
                    .filter(|t| !t.is_empty())
                    .collect();
                if self.data.tracks.is_empty() {
                    bail!("data.tracks must list at least one track");
                }
            }
            ("train", "epochs") => self.train.epochs = parse(value, "train.epochs")?,
            ("train", "batch_size") => self.train.batch_size = parse(value, "train.batch_size")?,
            ("train", "lr0") => self.train.lr0 = parse(value, "train.lr0")?,
            ("train", "weight_decay") => {
                self.train.weight_decay = parse(value, "train.weight_decay")?
            }
            ("train", "mode") => {
                self.train.mode = match value {
                    "deterministic" => ModelMode::Deterministic,
                    "hybrid" => ModelMode::Hybrid,
                    _ => bail!("invalid train.mode: {value:?} (deterministic|hybrid)"),
                }
            }
            ("train", "navigation") => {
                self.train.navigation = parse_bool(value, "train.navigation")?
            }
            ("train", "augment") => self.train.augment = parse_bool(value, "train.augment")?,
            ("train", "voxel_size") => self.train.voxel_size = parse(value, "train.voxel_size")?,
            ("train", "filter_radius") => {
                self.train.filter_radius = parse(value, "train.filter_radius")?
            }
            ("train", "widths") => {
                self.train.widths = parse_list(value, "train.widths")?;
            }
            ("train", "map_widths") => {
                self.train.map_widths = parse_list(value, "train.map_widths")?;
            }
            ("train", "trunk_feat") => self.train.trunk_feat = parse(value, "train.trunk_feat")?,
            ("train", "map_feat") => self.train.map_feat = parse(value, "train.map_feat")?,
            ("sim", "dt") => self.sim.dt = parse(value, "sim.dt")?,
            ("sim", "speed") => self.sim.speed = parse(value, "sim.speed")?,
            ("sim", "kappa_max") => self.sim.kappa_max = parse(value, "sim.kappa_max")?,
            ("sim", "cte_limit") => self.sim.cte_limit = parse(value, "sim.cte_limit")?,
            ("sim", "heading_limit_deg") => {
                self.sim.heading_limit_deg = parse(value, "sim.heading_limit_deg")?
            }
            ("sim", "hold_limit") => self.sim.hold_limit = parse(value, "sim.hold_limit")?,
            ("fusion", "mode") => {
                self.fusion.mode = FusionMode::parse(value)
                    .ok_or_else(|| anyhow::anyhow!("invalid fusion.mode: {value:?}"))?
            }
            ("fusion", "literal_double_norm") => {
                self.fusion.literal_double_norm = parse_bool(value, "fusion.literal_double_norm")?
            }
            ("failures", "enabled") => {
                self.failures.enabled = parse_bool(value, "failures.enabled")?
            }
            ("failures", "period") => self.failures.period = parse(value, "failures.period")?,
            ("failures", "duration") => {
                self.failures.duration = parse(value, "failures.duration")?
            }
            ("failures", "kind") => {
                self.failures.kind = FailureKind::parse(value)
                    .ok_or_else(|| anyhow::anyhow!("invalid failures.kind: {value:?}"))?
            }
            ("run", "seeds") => self.run.seeds = parse(value, "run.seeds")?,
            ("run", "track") => self.run.track = value.to_string(),
            _ => bail!("unknown config key {section}.{key}"),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.data.frames == 0 || self.data.k == 0 {
            bail!("data.frames and data.k must be positive");
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            bail!("train.epochs and train.batch_size must be positive");
        }
        if self.sim.dt <= 0.0 || self.sim.speed <= 0.0 {
            bail!("sim.dt and sim.speed must be positive");
        }
        if self.failures.enabled
            && !(self.failures.period > self.failures.duration && self.failures.duration > 0.0)
        {
            bail!("failures require period > duration > 0");
        }
        if self.run.seeds == 0 {
            bail!("run.seeds must be positive");
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let ctx = || format!("config line {}", ln + 1);
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("{}: expected key = value", ctx()))?;
            if section.is_empty() {
                bail!("{}: key outside any [section]", ctx());
            }
            cfg.set(&section, key.trim(), value.trim())
                .with_context(ctx)?;
        }
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                Self::parse_str(&text)
            }
            None => {
                let mut cfg = Self::default();
                cfg.apply_env()?;
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    /// `SEVNAV_TRAIN_BATCH_SIZE=32` overrides `[train] batch_size`.
    /// Section names are single words, so the first underscore after the
    /// prefix separates section from key.
    fn apply_env(&mut self) -> Result<()> {
        let mut vars: Vec<(String, String)> = std::env::vars()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        vars.sort();
        for (k, v) in vars {
            let rest = &k[ENV_PREFIX.len()..];
            let (section, key) = rest
                .split_once('_')
                .with_context(|| format!("malformed override variable {k}"))?;
            self.set(&section.to_lowercase(), &key.to_lowercase(), &v)
                .with_context(|| format!("environment override {k}"))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::parse_str("").unwrap();
    }

    #[test]
    fn sections_and_comments_parse() {
        let cfg = RunConfig::parse_str(
            "# comment\n[train]\nepochs = 12 # inline\nmode = deterministic\n[run]\nseeds = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 12);
        assert_eq!(cfg.train.mode, ModelMode::Deterministic);
        assert_eq!(cfg.run.seeds, 3);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse_str("[train]\nepcohs = 12\n").is_err());
        assert!(RunConfig::parse_str("[training]\nepochs = 12\n").is_err());
        assert!(RunConfig::parse_str("epochs = 12\n").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::parse_str("[train]\nepochs = many\n").is_err());
        assert!(RunConfig::parse_str("[failures]\nperiod = 1\nduration = 5\n").is_err());
        assert!(RunConfig::parse_str("[fusion]\nmode = psychic\n").is_err());
    }

    #[test]
    fn checkpoint_defaults_into_out_dir() {
        let cfg = RunConfig::parse_str("[paths]\nout = artifacts\n").unwrap();
        assert_eq!(cfg.checkpoint_path(), PathBuf::from("artifacts/checkpoint.sevw"));
        let cfg = RunConfig::parse_str("[paths]\ncheckpoint = m.sevw\n").unwrap();
        assert_eq!(cfg.checkpoint_path(), PathBuf::from("m.sevw"));
    }
}
