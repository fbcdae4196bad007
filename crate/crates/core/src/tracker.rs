//! Per-frame camera pose optimization against a frozen map.

use nalgebra::Vector6;
use thiserror::Error;

use crate::dataset::Frame;
use crate::gaussian_map::GaussianMap;
use crate::geometry::{compose, inverse, Pose};
use crate::imu::ImuState;
use crate::losses::{tracking_loss, DepthTarget, LossError, LossWeights};
use crate::optim::Adam;
use crate::raster::{render, render_backward, RenderError, RenderSettings};

#[derive(Debug, Error, PartialEq)]
pub enum TrackerError {
    #[error("imu guess requested without an imu relative transform")]
    MissingImu,
    #[error("tracking lost: {mask_fraction:.4} of pixels are covered by the map at the guess")]
    TrackingLost { mask_fraction: f64 },
    #[error("map is empty")]
    EmptyMap,
    #[error("invalid tracker config: {0}")]
    Config(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuessMode {
    ConstantVelocity,
    Imu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    pub iterations: usize,
    /// Adam rate for the rotation tangent, radians.
    pub lr_rotation: f64,
    /// Adam rate for the translation tangent, meters.
    pub lr_translation: f64,
    pub guess_mode: GuessMode,
    /// Loss improvement counted as progress.
    pub convergence_tol: f64,
    /// Stop after this many consecutive iterations without progress.
    pub patience: usize,
    /// Below this covered fraction at the guess, tracking is reported lost.
    pub min_mask_fraction: f64,
    /// Rates decay exponentially to this fraction by the last iteration.
    pub lr_final_ratio: f64,
    pub settings: RenderSettings,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            lr_rotation: 2e-3,
            lr_translation: 1e-2,
            guess_mode: GuessMode::ConstantVelocity,
            convergence_tol: 1e-6,
            patience: 10,
            min_mask_fraction: 0.01,
            lr_final_ratio: 0.1,
            settings: RenderSettings::default(),
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackerError> {
        if self.iterations == 0 {
            return Err(TrackerError::Config("iterations must be at least 1".into()));
        }
        if !(self.lr_rotation > 0.0 && self.lr_translation > 0.0) {
            return Err(TrackerError::Config("step sizes must be positive".into()));
        }
        if !(self.lr_final_ratio > 0.0 && self.lr_final_ratio <= 1.0) {
            return Err(TrackerError::Config("lr_final_ratio must be in (0, 1]".into()));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(TrackerError::Config("convergence_tol must be non-negative".into()));
        }
        Ok(())
    }
}

/// Tracking history carried between frames.
#[derive(Debug, Clone, Default)]
pub struct TrackState {
    /// `[T_{t-2}, T_{t-1}]`, oldest first; at most two entries.
    pub history: Vec<Pose>,
    pub imu: ImuState,
    /// Loss per iteration of the most recent optimization.
    pub loss_trace: Vec<f64>,
}

impl TrackState {
    pub fn push(&mut self, pose: Pose) {
        self.history.push(pose);
        if self.history.len() > 2 {
            self.history.remove(0);
        }
    }

    pub fn last(&self) -> Option<&Pose> {
        self.history.last()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackStats {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
    /// Covered fraction at the guess.
    pub mask_fraction: f64,
    pub loss_trace: Vec<f64>,
}

/// Starting pose for the next frame. With no history the identity is used.
pub fn initial_guess(state: &TrackState, mode: GuessMode, imu_rel: Option<&Pose>) -> Result<Pose, TrackerError> {
    let Some(last) = state.last().copied() else {
        return Ok(Pose::identity());
    };
    let mut guess = match mode {
        GuessMode::Identity => last,
        GuessMode::ConstantVelocity => match state.history.len() {
            2 => {
                let rel = compose(&inverse(&state.history[0]), &last);
                compose(&last, &rel)
            }
            _ => last,
        },
        GuessMode::Imu => compose(&last, imu_rel.ok_or(TrackerError::MissingImu)?),
    };
    guess.normalize();
    Ok(guess)
}

/// Optimizes the camera pose of `frame` with the map frozen; returns the
/// lowest-loss pose visited.
pub fn optimize_pose(
    map: &GaussianMap,
    frame: &Frame,
    depth: Option<DepthTarget<'_>>,
    guess: &Pose,
    cfg: &TrackerConfig,
    weights: &LossWeights,
) -> Result<(Pose, TrackStats), TrackerError> {
    cfg.validate()?;
    if map.is_empty() {
        return Err(TrackerError::EmptyMap);
    }
    let k = &frame.intrinsics;
    let decay = cfg.lr_final_ratio.powf(1.0 / cfg.iterations.saturating_sub(1).max(1) as f64);
    let mut adam = Adam::new(6, 1);
    let mut pose = *guess;
    let mut best = (f64::INFINITY, pose);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut mask_fraction = 0.0;
    let mut stalled = 0;

    for it in 0..cfg.iterations {
        let out = render(map, &pose, k, &cfg.settings);
        let eval = match tracking_loss(&out, &frame.rgb, depth, weights) {
            Ok(e) => e,
            Err(LossError::EmptyMask) if it == 0 => return Err(TrackerError::TrackingLost { mask_fraction: 0.0 }),
            // Drifted off the map; keep the best pose found so far.
            Err(LossError::EmptyMask) => break,
            Err(e) => return Err(e.into()),
        };
        if it == 0 {
            mask_fraction = eval.mask_fraction;
            if mask_fraction < cfg.min_mask_fraction {
                return Err(TrackerError::TrackingLost { mask_fraction });
            }
        }
        let prev = trace.last().copied().unwrap_or(f64::INFINITY);
        trace.push(eval.loss);
        if eval.loss < best.0 {
            best = (eval.loss, pose);
        }
        if prev - eval.loss < cfg.convergence_tol {
            stalled += 1;
            if stalled >= cfg.patience {
                break;
            }
        } else {
            stalled = 0;
        }
        if it + 1 == cfg.iterations {
            break;
        }
        let grads = render_backward(&out.context, &eval.upstream, map, &pose, k)?;
        let f = decay.powi(it as i32);
        let (r, t) = (cfg.lr_rotation * f, cfg.lr_translation * f);
        let step = adam.step(0, grads.d_pose.as_slice(), &[r, r, r, t, t, t]);
        pose = pose.retract_left(&-Vector6::from_column_slice(&step));
        pose.normalize();
    }

    Ok((
        best.1,
        TrackStats {
            initial_loss: trace.first().copied().unwrap_or(f64::NAN),
            final_loss: best.0,
            iterations: trace.len(),
            mask_fraction,
            loss_trace: trace,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{UnitQuaternion, Vector3};
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn guess_falls_back_to_last_pose() {
        let mut s = TrackState::default();
        assert_eq!(initial_guess(&s, GuessMode::ConstantVelocity, None).unwrap(), Pose::identity());
        let p = Pose::from_translation(Vector3::new(0.3, 0.0, 0.0));
        s.push(p);
        assert_eq!(initial_guess(&s, GuessMode::ConstantVelocity, None).unwrap(), p);
    }

    #[test]
    fn constant_velocity_extrapolates() {
        let mut s = TrackState::default();
        s.push(Pose::identity());
        s.push(Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)));
        let g = initial_guess(&s, GuessMode::ConstantVelocity, None).unwrap();
        assert!((g.translation - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn imu_guess_composes_relative_transform() {
        let mut s = TrackState::default();
        let last = Pose::from_scaled_axis(Vector3::new(0.1, -0.2, 0.3), Vector3::new(1.0, 2.0, 3.0));
        s.push(last);
        let rel = Pose::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2),
            Vector3::zeros(),
        );
        let g = initial_guess(&s, GuessMode::Imu, Some(&rel)).unwrap();
        let oracle = last.to_matrix() * rel.to_matrix();
        assert!((g.to_matrix() - oracle).abs().max() < 1e-12);
        assert_eq!(initial_guess(&s, GuessMode::Imu, None), Err(TrackerError::MissingImu));
    }

    #[test]
    fn history_keeps_two_poses() {
        let mut s = TrackState::default();
        for i in 0..5 {
            s.push(Pose::from_translation(Vector3::new(i as f64, 0.0, 0.0)));
        }
        assert_eq!(s.history.len(), 2);
        assert_eq!(s.history[0].translation.x, 3.0);
    }
}
