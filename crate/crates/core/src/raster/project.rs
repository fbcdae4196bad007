use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::gaussian_map::{covariance_from, GaussianMap};
use crate::geometry::{Intrinsics, Pose};

use super::{RenderSettings, COV2D_REGULARIZER, GUARD_BAND, NEAR_PLANE};

/// A Gaussian splatted onto the image plane.
#[derive(Debug, Clone)]
pub struct ProjectedGaussian {
    /// Pixel coordinates of the projected mean.
    pub mean2d: Vector2<f64>,
    /// Regularized image-plane covariance, pixels².
    pub cov2d: Matrix2<f64>,
    /// View-space depth of the mean, meters.
    pub depth: f64,
    /// Decoded opacity (the alpha at the 2D mean before clamping).
    pub alpha_peak: f64,
    pub color: Vector3<f64>,
    pub source_index: usize,
    pub(crate) conic: [f64; 3],
    pub(crate) mean_cam: Vector3<f64>,
    pub(crate) cov_cam: Matrix3<f64>,
    pub(crate) jac: Matrix2x3<f64>,
    /// Half extents of the support box, pixels.
    pub(crate) radius: Vector2<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProjectStats {
    /// Gaussians dropped by the near plane.
    pub culled_near: usize,
    /// Gaussians outside the guard band or whose support misses the image.
    pub off_screen: usize,
}

/// Affine (first-order) Jacobian of the pinhole projection at a camera-frame point.
pub fn projection_jacobian(p: &Vector3<f64>, k: &Intrinsics) -> Matrix2x3<f64> {
    let inv_z = 1.0 / p.z;
    let inv_z2 = inv_z * inv_z;
    Matrix2x3::new(
        k.fx * inv_z,
        0.0,
        -k.fx * p.x * inv_z2,
        0.0,
        k.fy * inv_z,
        -k.fy * p.y * inv_z2,
    )
}

pub(crate) fn project_one(
    index: usize,
    map: &GaussianMap,
    view_rot: &Matrix3<f64>,
    cam: &Pose,
    k: &Intrinsics,
    settings: &RenderSettings,
) -> Result<ProjectedGaussian, bool> {
    let g = &map.gaussians[index];
    let mean_cam = view_rot * (g.mu - cam.translation);
    if mean_cam.z <= NEAR_PLANE {
        return Err(true);
    }
    let inv_z = 1.0 / mean_cam.z;
    let half_w = k.cx.max(k.width as f64 - k.cx) / k.fx;
    let half_h = k.cy.max(k.height as f64 - k.cy) / k.fy;
    if (mean_cam.x * inv_z).abs() > GUARD_BAND * half_w || (mean_cam.y * inv_z).abs() > GUARD_BAND * half_h {
        return Err(false);
    }
    let u = k.fx * mean_cam.x * inv_z + k.cx;
    let v = k.fy * mean_cam.y * inv_z + k.cy;
    let scale = g.scale();

    // Conservative screen test before building the covariance:
    // lambda_max(J Sigma J^T) <= |J|_F^2 * s_max^2.
    let jf2 = (k.fx * k.fx * (1.0 + mean_cam.x * mean_cam.x * inv_z * inv_z)
        + k.fy * k.fy * (1.0 + mean_cam.y * mean_cam.y * inv_z * inv_z))
        * inv_z
        * inv_z;
    let smax = scale.max();
    let r_bound = settings.support_sigmas * (jf2 * smax * smax + COV2D_REGULARIZER).sqrt() + 1.0;
    if u + r_bound < 0.0
        || v + r_bound < 0.0
        || u - r_bound > k.width as f64
        || v - r_bound > k.height as f64
    {
        return Err(false);
    }

    let cov_world = covariance_from(&g.rot, &scale);
    let cov_cam = view_rot * cov_world * view_rot.transpose();
    let jac = projection_jacobian(&mean_cam, k);
    let mut cov2d = jac * cov_cam * jac.transpose();
    cov2d[(0, 0)] += COV2D_REGULARIZER;
    cov2d[(1, 1)] += COV2D_REGULARIZER;
    // Symmetrize against rounding.
    let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(0, 1)] = off;
    cov2d[(1, 0)] = off;
    let det = cov2d[(0, 0)] * cov2d[(1, 1)] - off * off;
    if !(det > 0.0) || !det.is_finite() {
        return Err(false);
    }
    let conic = [cov2d[(1, 1)] / det, -off / det, cov2d[(0, 0)] / det];
    let radius = Vector2::new(
        settings.support_sigmas * cov2d[(0, 0)].sqrt(),
        settings.support_sigmas * cov2d[(1, 1)].sqrt(),
    );
    if u + radius.x < 0.0
        || v + radius.y < 0.0
        || u - radius.x > k.width as f64
        || v - radius.y > k.height as f64
    {
        return Err(false);
    }
    Ok(ProjectedGaussian {
        mean2d: Vector2::new(u, v),
        cov2d,
        depth: mean_cam.z,
        alpha_peak: g.opacity(),
        color: g.color,
        source_index: index,
        conic,
        mean_cam,
        cov_cam,
        jac,
        radius,
    })
}

/// Projects every Gaussian into the camera `cam` (camera-to-world).
///
/// Output order follows map order; culled Gaussians are absent.
pub fn project_all(
    map: &GaussianMap,
    cam: &Pose,
    k: &Intrinsics,
    settings: &RenderSettings,
) -> (Vec<ProjectedGaussian>, ProjectStats) {
    let view_rot = cam.rotation_matrix().transpose();
    let results: Vec<Result<ProjectedGaussian, bool>> = (0..map.len())
        .into_par_iter()
        .with_min_len(1024)
        .map(|i| project_one(i, map, &view_rot, cam, k, settings))
        .collect();
    let mut stats = ProjectStats::default();
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(p) => out.push(p),
            Err(true) => stats.culled_near += 1,
            Err(false) => stats.off_screen += 1,
        }
    }
    (out, stats)
}
