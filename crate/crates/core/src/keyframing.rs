//! Keyframe selection: covisibility between the current view and stored
//! keyframes, and NIQE-based choice of the frame to promote.

use rayon::prelude::*;

use crate::dataset::Frame;
use crate::geometry::{backproject, project, Intrinsics, Pose};
use crate::image::Image;
use crate::niqe::{NiqeError, NiqeModel};

pub const COVISIBILITY_THRESHOLD: f64 = 0.95;
/// Keyframes at or above this covisibility join the mapping set.
pub const COVISIBLE_INCLUSION: f64 = 0.05;
pub const NIQE_WINDOW: usize = 5;
/// Rendered opacity above which a pixel's depth is trusted.
pub const VALID_OPACITY: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct Keyframe {
    pub frame_id: usize,
    pub pose: Pose,
    pub frame: Frame,
    /// Metric depth used for densification (sensor depth or fitted estimate).
    pub fitted_depth: Option<Image>,
}

/// Fraction of the current image whose rendered surface also lands inside
/// the keyframe's image with positive depth.
///
/// Pixels with opacity at or below [`VALID_OPACITY`] count against the
/// fraction: they show content the map does not hold yet, which no keyframe
/// can cover. An uncovered image therefore scores 0.
pub fn covisibility(
    depth: &Image,
    opacity: &Image,
    current_pose: &Pose,
    kf_pose: &Pose,
    k: &Intrinsics,
) -> f64 {
    let total = k.pixel_count();
    if total == 0 || depth.width != k.width || depth.height != k.height {
        return 0.0;
    }
    let (w, h) = (k.width as f64, k.height as f64);
    let mut hits = 0usize;
    for y in 0..k.height {
        for x in 0..k.width {
            let z = depth.get(x, y, 0);
            if !(opacity.get(x, y, 0) > VALID_OPACITY && z > 0.0) {
                continue;
            }
            let world = current_pose.transform_point(&backproject(x as f64 + 0.5, y as f64 + 0.5, z, k));
            if let Ok((u, v, _)) = project(&kf_pose.inverse_transform_point(&world), k) {
                if (0.0..w).contains(&u) && (0.0..h).contains(&v) {
                    hits += 1;
                }
            }
        }
    }
    hits as f64 / total as f64
}

/// Largest covisibility against any keyframe, with its index; `(0, None)` when empty.
pub fn max_covisibility(
    depth: &Image,
    opacity: &Image,
    current_pose: &Pose,
    keyframe_poses: &[Pose],
    k: &Intrinsics,
) -> (f64, Option<usize>) {
    keyframe_poses
        .iter()
        .enumerate()
        .map(|(i, p)| (covisibility(depth, opacity, current_pose, p, k), Some(i)))
        .fold((0.0, None), |best, c| if c.0 > best.0 { c } else { best })
}

pub fn should_add_keyframe(covis: f64, threshold: f64) -> bool {
    covis < threshold
}

/// Index of the lowest score; ties go to the later entry.
pub fn best_index(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        match best {
            Some(b) if scores[b] < *s => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Frame id with the lowest NIQE score in the window (most recent on ties).
pub fn select_best_in_window(window: &[&Frame], model: &NiqeModel) -> Result<usize, NiqeError> {
    let scores: Vec<f64> = window
        .par_iter()
        .map(|f| model.score(&f.rgb))
        .collect::<Result<_, _>>()?;
    let i = best_index(&scores).ok_or(NiqeError::NoQualifiedPatches)?;
    Ok(window[i].id)
}
