//! The SLAM loop: per frame, track against the map, decide on a keyframe,
//! densify it and optimize the map over covisible keyframes; then evaluate.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use thiserror::Error;

use crate::config::{ConfigError, Mode, RunConfig, Source};
use crate::dataset::{
    depth_provider, format_trajectory, generate_synthetic, load_tum_sequence, DatasetError, DepthKind, DepthMode,
    LoadOptions, Sequence, TimedPose,
};
use crate::eval::{ate_rmse, path_length, MetricsReport, RuntimeStats};
use crate::gaussian_map::{GaussianMap, MapError};
use crate::geometry::Pose;
use crate::image::Image;
use crate::imu::{preintegrate, to_camera_frame, ImuError, ImuState};
use crate::keyframing::{
    covisibility, max_covisibility, select_best_in_window, should_add_keyframe, Keyframe, COVISIBLE_INCLUSION,
};
use crate::losses::{psnr, DepthTarget, PixelMask};
use crate::mapper::{densify, fit_relative_depth, normalize_relative_depth, optimize_map, MapView, MapperError};
use crate::niqe::{bundled_model, NiqeError, NiqeModel};
use crate::raster::render;
use crate::tracker::{initial_guess, optimize_pose, GuessMode, TrackState, TrackerError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("dataset: {0}")]
    Dataset(#[from] DatasetError),
    #[error("tracking lost for {consecutive} consecutive frames (last frame {frame})")]
    TrackingLost { frame: usize, consecutive: usize },
    #[error("tracker: {0}")]
    Tracker(#[from] TrackerError),
    #[error("mapper: {0}")]
    Mapper(#[from] MapperError),
    #[error("imu: {0}")]
    Imu(#[from] ImuError),
    #[error("niqe: {0}")]
    Niqe(#[from] NiqeError),
    #[error("map: {0}")]
    Map(#[from] MapError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("worker pool: {0}")]
    Pool(String),
}

impl PipelineError {
    /// Process exit code: 2 config, 3 dataset, 4 tracking lost, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Dataset(_) => 3,
            PipelineError::TrackingLost { .. } => 4,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeEvent {
    /// Frame being processed when the keyframe fired.
    pub frame: usize,
    /// Frame promoted to keyframe (best NIQE in the window).
    pub promoted: usize,
    /// Largest covisibility with the existing keyframes; 0 for the first.
    pub covisibility: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub trajectory: Vec<TimedPose>,
    pub keyframes: Vec<usize>,
    pub events: Vec<KeyframeEvent>,
    pub lost_frames: Vec<usize>,
    pub map: GaussianMap,
}

pub fn load_source(cfg: &RunConfig) -> Result<Sequence, PipelineError> {
    match &cfg.source {
        Source::Dataset(path) => Ok(load_tum_sequence(path, &LoadOptions::default())?),
        Source::Synthetic(spec) => Ok(generate_synthetic(spec).0),
    }
}

/// Loads the configured source and runs the full pipeline.
pub fn run_slam(cfg: &RunConfig) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    let seq = load_source(cfg)?;
    run_sequence(cfg, &seq)
}

/// Runs the pipeline on an already loaded sequence inside a worker pool of
/// `cfg.workers` threads.
pub fn run_sequence(cfg: &RunConfig, seq: &Sequence) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.unwrap_or(0))
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))?;
    pool.install(|| Pipeline::new(cfg, seq)?.run())
}

/// Depth supervision for one frame.
struct FrameDepth {
    /// Fed to the Pearson term; relative inverse depth is negated so it
    /// correlates positively with depth.
    target: Image,
    estimate: Image,
    kind: DepthKind,
    valid: PixelMask,
}

struct Pipeline<'a> {
    cfg: &'a RunConfig,
    seq: &'a Sequence,
    niqe: NiqeModel,
    depth_mode: DepthMode,
    map: GaussianMap,
    keyframes: Vec<Keyframe>,
    keyframe_depth: Vec<FrameDepth>,
    trajectory: Vec<TimedPose>,
    events: Vec<KeyframeEvent>,
    lost_frames: Vec<usize>,
    runtime: RuntimeStats,
}

impl<'a> Pipeline<'a> {
    fn new(cfg: &'a RunConfig, seq: &'a Sequence) -> Result<Self, PipelineError> {
        if seq.frames.is_empty() {
            return Err(DatasetError::Empty.into());
        }
        if cfg.mode.uses_imu() && !seq.has_imu() {
            return Err(ConfigError::Invalid(format!("mode {} needs an imu stream", cfg.mode)).into());
        }
        if !seq.has_depth() {
            let what = if cfg.mode.uses_sensor_depth() { "sensor depth" } else { "a depth source for the monocular estimate" };
            return Err(ConfigError::Invalid(format!("mode {} needs {what}", cfg.mode)).into());
        }
        let niqe = match &cfg.niqe_model {
            Some(p) => NiqeModel::read(File::open(p).map_err(io_err(p))?)?,
            None => bundled_model(),
        };
        let depth_mode = if cfg.mode.uses_sensor_depth() {
            DepthMode::Sensor
        } else {
            DepthMode::EmulatedRelative {
                amplitude: cfg.depth_warp,
                seed: cfg.seed,
            }
        };
        Ok(Self {
            cfg,
            seq,
            niqe,
            depth_mode,
            map: GaussianMap::new(),
            keyframes: Vec::new(),
            keyframe_depth: Vec::new(),
            trajectory: Vec::new(),
            events: Vec::new(),
            lost_frames: Vec::new(),
            runtime: RuntimeStats::default(),
        })
    }

    fn frame_depth(&self, i: usize) -> Result<FrameDepth, PipelineError> {
        let est = depth_provider(&self.seq.frames[i], self.depth_mode)?;
        let target = match est.kind {
            DepthKind::Metric => est.values.clone(),
            DepthKind::RelativeInverse => {
                Image::from_vec(est.values.width, est.values.height, 1, est.values.data.iter().map(|v| -v).collect())
            }
        };
        Ok(FrameDepth {
            target,
            estimate: est.values,
            kind: est.kind,
            valid: est.valid,
        })
    }

    fn run(mut self) -> Result<RunOutput, PipelineError> {
        let start = Instant::now();
        let cfg = self.cfg;
        let seq = self.seq;
        if let Some(dir) = &cfg.out_dir {
            fs::create_dir_all(dir.join("checkpoints")).map_err(io_err(dir))?;
        }
        let monocular = !cfg.mode.uses_sensor_depth();
        let mut state = TrackState::default();
        let mut imu = ImuState::default();
        let mut lost = 0usize;
        // Map units per metric meter, estimated from tracked vs integrated path length.
        let (mut tracked_len, mut imu_len) = (0.0, 0.0);

        for (i, frame) in seq.frames.iter().enumerate() {
            let depth = self.frame_depth(i)?;
            let mut imu_rel = None;
            if cfg.mode.uses_imu() && i > 0 {
                let (rel, next) = preintegrate(&seq.imu, &imu, seq.frames[i - 1].t, frame.t)?;
                imu = next;
                let mut rel_cam = to_camera_frame(&rel, &seq.extrinsic);
                let raw_len = rel_cam.translation.norm();
                if monocular {
                    rel_cam.translation *= if imu_len > 0.0 { tracked_len / imu_len } else { f64::NAN };
                }
                imu_rel = Some((rel_cam, raw_len));
            }

            let pose = if i == 0 {
                Pose::identity()
            } else {
                let usable = imu_rel.filter(|(r, _)| r.translation.iter().all(|v| v.is_finite()));
                let mode = if usable.is_some() { GuessMode::Imu } else { GuessMode::ConstantVelocity };
                let guess = initial_guess(&state, mode, usable.as_ref().map(|(r, _)| r))?;
                let t = Instant::now();
                let target = DepthTarget {
                    values: &depth.target,
                    valid: Some(&depth.valid),
                };
                let tracked = optimize_pose(&self.map, frame, Some(target), &guess, &cfg.tracker, &cfg.weights);
                self.runtime.tracking_seconds += t.elapsed().as_secs_f64();
                match tracked {
                    Ok((p, _)) => {
                        lost = 0;
                        p
                    }
                    Err(TrackerError::TrackingLost { mask_fraction }) => {
                        lost += 1;
                        self.lost_frames.push(i);
                        warn!("frame {i}: tracking lost (covered fraction {mask_fraction:.4})");
                        if lost >= cfg.max_lost {
                            self.trajectory.push(TimedPose { t: frame.t, pose: guess });
                            self.flush_partial()?;
                            return Err(PipelineError::TrackingLost {
                                frame: i,
                                consecutive: lost,
                            });
                        }
                        guess
                    }
                    Err(e) => return Err(e.into()),
                }
            };
            if let (Some(last), Some((_, raw))) = (state.last(), imu_rel) {
                tracked_len += (pose.translation - last.translation).norm();
                imu_len += raw;
            }
            state.push(pose);
            self.trajectory.push(TimedPose { t: frame.t, pose });

            let promoted = if i == 0 {
                Some((0, 0.0))
            } else if lost > 0 {
                None
            } else {
                self.keyframe_candidate(i, &pose)?
            };
            let mut new_keyframe = None;
            if let Some((j, covis)) = promoted {
                self.events.push(KeyframeEvent {
                    frame: i,
                    promoted: j,
                    covisibility: covis,
                });
                new_keyframe = self.add_keyframe(j, i)?;
            }
            if (new_keyframe.is_some() || cfg.map_every_frame) && !self.map.is_empty() && lost == 0 {
                let t = Instant::now();
                self.map_step(i, &pose, &depth, new_keyframe)?;
                self.runtime.mapping_seconds += t.elapsed().as_secs_f64();
            }
            if let Some(dir) = &cfg.out_dir {
                if cfg.checkpoint_every > 0 && (i + 1) % cfg.checkpoint_every == 0 {
                    self.write_map(&dir.join("checkpoints").join(format!("map_{i:05}.bin")))?;
                }
            }
            info!(
                "frame {i}: {} gaussians, {} keyframes, pose t = {:?}",
                self.map.len(),
                self.keyframes.len(),
                pose.translation.as_slice()
            );
        }

        self.runtime.frames = seq.frames.len();
        self.runtime.total_seconds = start.elapsed().as_secs_f64();
        let report = self.evaluate();
        if let Some(dir) = &cfg.out_dir {
            self.write_trajectory(&dir.join("trajectory.txt"))?;
            self.write_map(&dir.join("map.bin"))?;
            let p = dir.join("metrics.json");
            fs::write(&p, report.to_json()).map_err(io_err(&p))?;
        }
        Ok(RunOutput {
            report,
            trajectory: self.trajectory,
            keyframes: self.keyframes.iter().map(|k| k.frame_id).collect(),
            events: self.events,
            lost_frames: self.lost_frames,
            map: self.map,
        })
    }

    /// When covisibility with every keyframe drops below the threshold,
    /// returns the best-NIQE non-keyframe in the recent window.
    fn keyframe_candidate(&self, i: usize, pose: &Pose) -> Result<Option<(usize, f64)>, PipelineError> {
        let k = &self.seq.frames[i].intrinsics;
        let out = render(&self.map, pose, k, &self.cfg.tracker.settings);
        let kf_poses: Vec<Pose> = self.keyframes.iter().map(|kf| kf.pose).collect();
        let (covis, _) = max_covisibility(&out.depth, &out.opacity, pose, &kf_poses, k);
        if !should_add_keyframe(covis, self.cfg.keyframe_threshold) {
            return Ok(None);
        }
        let lo = (i + 1).saturating_sub(self.cfg.niqe_window);
        let window: Vec<_> = (lo..=i)
            .filter(|j| !self.keyframes.iter().any(|kf| kf.frame_id == *j) && !self.lost_frames.contains(j))
            .map(|j| &self.seq.frames[j])
            .collect();
        let best = match select_best_in_window(&window, &self.niqe) {
            Ok(j) => j,
            Err(NiqeError::ImageTooSmall { .. }) | Err(NiqeError::NoQualifiedPatches) => i,
            Err(e) => return Err(e.into()),
        };
        Ok(Some((best, covis)))
    }

    /// Densifies frame `j` at its tracked pose and stores it as a keyframe.
    /// Returns the keyframe index, or `None` when its depth could not be fitted.
    fn add_keyframe(&mut self, j: usize, current: usize) -> Result<Option<usize>, PipelineError> {
        let frame = &self.seq.frames[j];
        let pose = self.trajectory[j].pose;
        let depth = self.frame_depth(j)?;
        let out = (!self.map.is_empty()).then(|| render(&self.map, &pose, &frame.intrinsics, &self.cfg.mapper.settings));
        let fitted = match (depth.kind, &out) {
            (DepthKind::Metric, _) => Some(depth.estimate.clone()),
            (DepthKind::RelativeInverse, None) => normalize_relative_depth(&depth.estimate, &depth.valid),
            (DepthKind::RelativeInverse, Some(r)) => match fit_relative_depth(&depth.estimate, &depth.valid, r) {
                Ok(d) => Some(d),
                Err(MapperError::RankDeficient) => None,
                Err(e) => return Err(e.into()),
            },
        };
        let Some(fitted) = fitted else {
            warn!("frame {current}: depth fit for keyframe {j} is degenerate; skipping densification");
            return Ok(None);
        };
        let batch = densify(&frame.rgb, out.as_ref(), Some(&fitted), &pose, &frame.intrinsics, &self.cfg.mapper)?;
        let added = self.map.insert(batch, j)?;
        info!("frame {current}: keyframe {j} adds {added} gaussians");
        self.keyframes.push(Keyframe {
            frame_id: j,
            pose,
            frame: frame.clone(),
            fitted_depth: Some(fitted),
        });
        self.keyframe_depth.push(depth);
        Ok(Some(self.keyframes.len() - 1))
    }

    fn map_step(&mut self, i: usize, pose: &Pose, depth: &FrameDepth, new_kf: Option<usize>) -> Result<(), PipelineError> {
        let frame = &self.seq.frames[i];
        let k = &frame.intrinsics;
        let out = render(&self.map, pose, k, &self.cfg.mapper.settings);
        let mut views = vec![MapView {
            pose: *pose,
            rgb: &frame.rgb,
            depth: Some(DepthTarget {
                values: &depth.target,
                valid: Some(&depth.valid),
            }),
            intrinsics: *k,
        }];
        for (n, kf) in self.keyframes.iter().enumerate() {
            if kf.frame_id == i {
                continue;
            }
            let covisible = Some(n) == new_kf
                || covisibility(&out.depth, &out.opacity, pose, &kf.pose, k) >= COVISIBLE_INCLUSION;
            if covisible {
                let d = &self.keyframe_depth[n];
                views.push(MapView {
                    pose: kf.pose,
                    rgb: &kf.frame.rgb,
                    depth: Some(DepthTarget {
                        values: &d.target,
                        valid: Some(&d.valid),
                    }),
                    intrinsics: kf.frame.intrinsics,
                });
            }
        }
        optimize_map(&mut self.map, &views, &self.cfg.mapper, &self.cfg.weights)?;
        Ok(())
    }

    fn evaluate(&self) -> MetricsReport {
        let cfg = self.cfg;
        let with_scale = !cfg.mode.uses_sensor_depth();
        let (mut ate, mut errors, mut alignment, mut length) = (None, Vec::new(), None, None);
        if let Some(gt) = &self.seq.ground_truth {
            length = Some(path_length(gt));
            match ate_rmse(&self.trajectory, gt, with_scale) {
                Ok(r) => {
                    ate = Some(r.rmse_cm);
                    errors = r.errors_cm;
                    alignment = Some(r.alignment);
                }
                Err(e) => warn!("ATE not computed: {e}"),
            }
        }
        let per_frame: Vec<Option<f64>> = self
            .trajectory
            .iter()
            .zip(&self.seq.frames)
            .map(|(tp, f)| {
                let out = render(&self.map, &tp.pose, &f.intrinsics, &cfg.mapper.settings);
                psnr(&out.color, &f.rgb).ok().filter(|v| v.is_finite())
            })
            .collect();
        let mean = |ids: &mut dyn Iterator<Item = usize>| {
            let v: Vec<f64> = ids.filter_map(|i| per_frame[i]).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let keyframes: Vec<usize> = self.keyframes.iter().map(|k| k.frame_id).collect();
        MetricsReport {
            mode: cfg.mode.to_string(),
            ate_rmse_cm: ate,
            path_length_m: length,
            psnr_mean_db: mean(&mut (0..per_frame.len())),
            psnr_keyframes_db: mean(&mut keyframes.iter().copied()),
            psnr_frames: (0..per_frame.len()).collect(),
            psnr_per_frame: per_frame,
            translation_errors_cm: errors,
            alignment,
            with_scale,
            keyframes,
            gaussians: self.map.len(),
            runtime: self.runtime.clone(),
        }
    }

    fn write_trajectory(&self, path: &Path) -> Result<(), PipelineError> {
        fs::write(path, format_trajectory(&self.trajectory)).map_err(io_err(path))
    }

    fn write_map(&self, path: &Path) -> Result<(), PipelineError> {
        let f = File::create(path).map_err(io_err(path))?;
        self.map.write_checkpoint(BufWriter::new(f))?;
        Ok(())
    }

    fn flush_partial(&self) -> Result<(), PipelineError> {
        if let Some(dir) = &self.cfg.out_dir {
            self.write_trajectory(&dir.join("trajectory.txt"))?;
            self.write_map(&dir.join("map.bin"))?;
        }
        Ok(())
    }
}

/// Mode-specific label used in file names and reports.
pub fn mode_slug(mode: Mode) -> String {
    mode.to_string().replace('+', "_")
}
