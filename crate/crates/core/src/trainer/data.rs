//! On-disk dataset layout: one SEVF file per frame under `frames/`, a
//! tab-separated `index.tsv` (frame metadata and pose), and
//! `tracks.json` holding the road/route polylines each frame renders
//! its map from.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::sevf::{self, SevfError};
use crate::geometry::{ControlLabels, PointCloud, Polyline, Pose2};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Frame(#[from] SevfError),
    #[error("tracks.json: {0}")]
    Tracks(#[from] serde_json::Error),
    #[error("index.tsv line {line}: {reason}")]
    Index { line: usize, reason: String },
    #[error("dataset is empty")]
    Empty,
    #[error("frame {frame} has {got} labels, dataset K is {k}")]
    LabelCount { frame: usize, got: usize, k: usize },
    #[error("frame {frame} references missing track {track}")]
    BadTrack { frame: usize, track: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameTag {
    LaneStable,
    Turn,
}

impl FrameTag {
    pub fn as_str(self) -> &'static str {
        match self {
            FrameTag::LaneStable => "lane_stable",
            FrameTag::Turn => "turn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lane_stable" => Some(FrameTag::LaneStable),
            "turn" => Some(FrameTag::Turn),
            _ => None,
        }
    }
}

/// Road network and designated route of one track, shared by all frames
/// recorded on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapGeom {
    pub roads: Vec<Polyline>,
    pub route: Polyline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub cloud: PointCloud,
    pub labels: ControlLabels,
    pub tag: FrameTag,
    pub pose: Pose2,
    /// Index into [`Dataset::tracks`].
    pub track: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub frames: Vec<Frame>,
    pub tracks: Vec<MapGeom>,
    /// Labels per frame.
    pub k: usize,
}

impl Dataset {
    pub fn new(frames: Vec<Frame>, tracks: Vec<MapGeom>) -> Result<Self, DataError> {
        let k = frames.first().ok_or(DataError::Empty)?.labels.len();
        for (i, f) in frames.iter().enumerate() {
            if f.labels.len() != k {
                return Err(DataError::LabelCount {
                    frame: i,
                    got: f.labels.len(),
                    k,
                });
            }
            if f.track >= tracks.len() {
                return Err(DataError::BadTrack {
                    frame: i,
                    track: f.track,
                });
            }
        }
        Ok(Self { frames, tracks, k })
    }
}

const INDEX_HEADER: &str = "frame\tfile\ttrack\ttag\tpose_x\tpose_y\tpose_heading";

/// Write the dataset under `dir`. Staged in a temporary sibling and
/// renamed into place so a failure leaves no partial dataset behind.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<(), DataError> {
    let parent = dir.parent().unwrap_or(Path::new("."));
    let name = dir
        .file_name()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "bad dataset path"))?;
    if !parent.as_os_str().is_empty() && !parent.exists() {
        return Err(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("dataset parent directory {} does not exist", parent.display()),
        )
        .into());
    }
    let tmp = parent.join(format!(".{}.tmp", name.to_string_lossy()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(tmp.join("frames"))?;

    fs::write(
        tmp.join("tracks.json"),
        serde_json::to_vec_pretty(&ds.tracks)?,
    )?;

    let mut index = String::from(INDEX_HEADER);
    index.push('\n');
    for (i, f) in ds.frames.iter().enumerate() {
        let file = format!("frames/frame_{i:05}.sevf");
        let mut buf = Vec::new();
        sevf::write_frame(&mut buf, &f.cloud, &f.labels)?;
        fs::write(tmp.join(&file), buf)?;
        writeln!(
            index,
            "{i}\t{file}\t{}\t{}\t{:?}\t{:?}\t{:?}",
            f.track,
            f.tag.as_str(),
            f.pose.x,
            f.pose.y,
            f.pose.heading
        )
        .expect("string write");
    }
    fs::write(tmp.join("index.tsv"), index)?;

    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let tracks: Vec<MapGeom> = serde_json::from_slice(&fs::read(dir.join("tracks.json"))?)?;
    let index = fs::read_to_string(dir.join("index.tsv"))?;
    let mut lines = index.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == INDEX_HEADER => {}
        _ => {
            return Err(DataError::Index {
                line: 1,
                reason: "bad or missing header".into(),
            })
        }
    }
    let mut frames = Vec::new();
    for (ln, line) in lines {
        let err = |reason: &str| DataError::Index {
            line: ln + 1,
            reason: reason.into(),
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 7 {
            return Err(err("expected 7 columns"));
        }
        let track: usize = cols[2].parse().map_err(|_| err("bad track index"))?;
        let tag = FrameTag::parse(cols[3]).ok_or_else(|| err("unknown tag"))?;
        let parse_f = |s: &str, what: &str| -> Result<f64, DataError> {
            s.parse().map_err(|_| err(what))
        };
        let pose = Pose2 {
            x: parse_f(cols[4], "bad pose_x")?,
            y: parse_f(cols[5], "bad pose_y")?,
            heading: parse_f(cols[6], "bad pose_heading")?,
        };
        let bytes = fs::read(dir.join(cols[1]))?;
        let (cloud, labels) = sevf::read_frame(bytes.as_slice())?;
        frames.push(Frame {
            cloud,
            labels,
            tag,
            pose,
            track,
        });
    }
    Dataset::new(frames, tracks)
}
