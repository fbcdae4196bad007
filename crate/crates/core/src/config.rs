//! Run configuration and its plain-text `key = value` file format.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::dataset::{DepthMode, SyntheticSceneSpec};
use crate::keyframing::{COVISIBILITY_THRESHOLD, NIQE_WINDOW};
use crate::losses::LossWeights;
use crate::mapper::MapperConfig;
use crate::tracker::TrackerConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {reason}")]
    BadValue { key: String, reason: String },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read {path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Rgb,
    RgbImu,
    Rgbd,
    RgbdImu,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Rgb, Mode::RgbImu, Mode::Rgbd, Mode::RgbdImu];

    pub fn uses_imu(self) -> bool {
        matches!(self, Mode::RgbImu | Mode::RgbdImu)
    }

    /// Sensor depth drives tracking and densification; otherwise an
    /// emulated relative estimate is used.
    pub fn uses_sensor_depth(self) -> bool {
        matches!(self, Mode::Rgbd | Mode::RgbdImu)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Rgb => "rgb",
            Mode::RgbImu => "rgb+imu",
            Mode::Rgbd => "rgbd",
            Mode::RgbdImu => "rgbd+imu",
        })
    }
}

impl FromStr for Mode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.to_string() == s.trim())
            .ok_or_else(|| ConfigError::BadValue {
                key: "mode".into(),
                reason: format!("`{s}` is not one of rgb, rgb+imu, rgbd, rgbd+imu"),
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Dataset(PathBuf),
    Synthetic(SyntheticSceneSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub source: Source,
    pub mode: Mode,
    pub tracker: TrackerConfig,
    pub mapper: MapperConfig,
    pub weights: LossWeights,
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
    /// Map checkpoint every this many frames (0 disables); a final one is always written.
    pub checkpoint_every: usize,
    /// Rasterizer threads; `None` uses the available cores.
    pub workers: Option<usize>,
    /// NIQE model file; the bundled synthetic model when absent.
    pub niqe_model: Option<PathBuf>,
    pub niqe_window: usize,
    pub keyframe_threshold: f64,
    /// Run map optimization after every frame instead of only after keyframes.
    pub map_every_frame: bool,
    /// Warp amplitude of the emulated monocular depth.
    pub depth_warp: f64,
    /// Consecutive lost frames before the run aborts.
    pub max_lost: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            source: Source::Synthetic(SyntheticSceneSpec::square()),
            mode: Mode::RgbdImu,
            tracker: TrackerConfig::default(),
            mapper: MapperConfig::default(),
            weights: LossWeights::default(),
            out_dir: None,
            seed: 0,
            checkpoint_every: 25,
            workers: None,
            niqe_model: None,
            niqe_window: NIQE_WINDOW,
            keyframe_threshold: COVISIBILITY_THRESHOLD,
            map_every_frame: false,
            depth_warp: DepthMode::DEFAULT_WARP,
            max_lost: 3,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    v.trim().parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        reason: e.to_string(),
    })
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(ConfigError::BadValue {
            key: key.into(),
            reason: format!("`{other}` is not a boolean"),
        }),
    }
}

pub fn synthetic_preset(name: &str) -> Result<SyntheticSceneSpec, ConfigError> {
    match name.trim() {
        "square" => Ok(SyntheticSceneSpec::square()),
        "circle" => Ok(SyntheticSceneSpec::circle()),
        "straight" => Ok(SyntheticSceneSpec::straight()),
        other => Err(ConfigError::BadValue {
            key: "synthetic".into(),
            reason: format!("unknown preset `{other}` (square, circle, straight)"),
        }),
    }
}

impl RunConfig {
    /// Applies one `key = value` setting. Dashes and underscores in keys are interchangeable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let k = key.trim().replace('-', "_");
        let v = value.trim();
        match k.as_str() {
            "dataset" => self.source = Source::Dataset(PathBuf::from(v)),
            "synthetic" => self.source = Source::Synthetic(synthetic_preset(v)?),
            "frames" => match &mut self.source {
                Source::Synthetic(s) => s.frames = parse_num(&k, v)?,
                Source::Dataset(_) => {
                    return Err(ConfigError::BadValue {
                        key: k,
                        reason: "only applies to synthetic sources".into(),
                    })
                }
            },
            "mode" => self.mode = v.parse()?,
            "out" => self.out_dir = Some(PathBuf::from(v)),
            "seed" => self.seed = parse_num(&k, v)?,
            "track_iters" => self.tracker.iterations = parse_num(&k, v)?,
            "map_iters" => self.mapper.iterations = parse_num(&k, v)?,
            "lambda_c" => self.weights.lambda_c = parse_num(&k, v)?,
            "lambda_s" => self.weights.lambda_s = parse_num(&k, v)?,
            "lambda_d" => self.weights.lambda_d = parse_num(&k, v)?,
            "workers" => self.workers = Some(parse_num(&k, v)?),
            "checkpoint_every" => self.checkpoint_every = parse_num(&k, v)?,
            "niqe_model" => self.niqe_model = Some(PathBuf::from(v)),
            "niqe_window" => self.niqe_window = parse_num(&k, v)?,
            "keyframe_threshold" => self.keyframe_threshold = parse_num(&k, v)?,
            "map_every_frame" => self.map_every_frame = parse_bool(&k, v)?,
            "depth_warp" => self.depth_warp = parse_num(&k, v)?,
            "max_lost" => self.max_lost = parse_num(&k, v)?,
            "lr_rotation" => self.tracker.lr_rotation = parse_num(&k, v)?,
            "lr_translation" => self.tracker.lr_translation = parse_num(&k, v)?,
            _ => return Err(ConfigError::UnknownKey(key.trim().to_string())),
        }
        Ok(())
    }

    /// Applies every setting in `text` on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                reason: "expected `key = value`".into(),
            })?;
            if k.trim().is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    reason: "empty key".into(),
                });
            }
            self.set(k, v).map_err(|e| match e {
                ConfigError::Syntax { .. } => e,
                other => ConfigError::Syntax {
                    line: i + 1,
                    reason: other.to_string(),
                },
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.tracker.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.mapper.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.weights.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Source::Synthetic(s) = &self.source {
            s.validate().map_err(ConfigError::Invalid)?;
        }
        if self.niqe_window == 0 {
            return Err(ConfigError::Invalid("niqe_window must be at least 1".into()));
        }
        if !(self.keyframe_threshold > 0.0 && self.keyframe_threshold <= 1.0) {
            return Err(ConfigError::Invalid("keyframe_threshold must be in (0, 1]".into()));
        }
        if self.workers == Some(0) {
            return Err(ConfigError::Invalid("workers must be at least 1".into()));
        }
        if !(self.depth_warp >= 0.0 && self.depth_warp < 1.0) {
            return Err(ConfigError::Invalid("depth_warp must be in [0, 1)".into()));
        }
        if self.max_lost == 0 {
            return Err(ConfigError::Invalid("max_lost must be at least 1".into()));
        }
        Ok(())
    }
}
