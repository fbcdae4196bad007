//! Sequence ingestion and synthetic scene generation.

mod depth;
mod synthetic;
mod tum;

use std::path::PathBuf;

use thiserror::Error;

use crate::geometry::{Intrinsics, Pose};
use crate::image::{DepthMap, Image, ImageError};
use crate::imu::ImuSample;

pub use depth::{depth_provider, DepthEstimate, DepthKind, DepthMode};
pub use synthetic::{generate_synthetic, pristine_corpus, Layout, PRISTINE_PIXEL_NOISE, NoiseSpec, SyntheticSceneSpec, TrajectoryKind, TrajectorySample};
pub use tum::{
    associate, format_trajectory, interpolate_pose, load_imu, load_tum_sequence, parse_calib, parse_groundtruth,
    parse_imu_csv, parse_index, parse_trajectory, write_sequence, write_trajectory, LoadOptions, ASSOCIATION_WINDOW,
    DEPTH_PNG_SCALE,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing index file {0}")]
    MissingIndexFile(PathBuf),
    #[error("{file}:{line}: {reason}")]
    UnparsableLine { file: String, line: usize, reason: String },
    #[error("no rgb frame has a depth image within the association window")]
    NoAssociations,
    #[error("imu timestamps not strictly increasing at sample {index}")]
    NonMonotoneTimestamps { index: usize },
    #[error("image: {0}")]
    Image(#[from] ImageError),
    #[error("sequence has no frames")]
    Empty,
    #[error("frame {0} has no sensor depth")]
    NoSensorDepth(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: usize,
    /// Seconds.
    pub t: f64,
    /// RGB in `[0, 1]`.
    pub rgb: Image,
    /// Meters, 0 where invalid.
    pub depth: Option<DepthMap>,
    pub intrinsics: Intrinsics,
}

/// Camera-to-world pose at a timestamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedPose {
    pub t: f64,
    pub pose: Pose,
}

#[derive(Debug, Clone)]
pub struct Sequence {
    pub frames: Vec<Frame>,
    pub imu: Vec<ImuSample>,
    /// Ground truth at frame timestamps, where available.
    pub ground_truth: Option<Vec<TimedPose>>,
    /// IMU-to-camera transform.
    pub extrinsic: Pose,
}

impl Sequence {
    pub fn has_depth(&self) -> bool {
        !self.frames.is_empty() && self.frames.iter().all(|f| f.depth.is_some())
    }

    pub fn has_imu(&self) -> bool {
        self.imu.len() >= 2
    }
}
