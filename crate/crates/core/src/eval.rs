//! Trajectory alignment, ATE and rendering metrics.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{TimedPose, ASSOCIATION_WINDOW};
use crate::image::Image;
use crate::losses::psnr;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("need at least 3 associated points, got {0}")]
    TooFewPoints(usize),
    #[error("point sets differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("points are coincident or collinear; alignment is not unique")]
    DegenerateSpread,
}

/// `gt ≈ scale·R·est + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Alignment {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation * p + self.translation
    }
}

/// Closed-form least-squares rigid or similarity alignment of `est` onto `gt`.
pub fn umeyama_align(est: &[Vector3<f64>], gt: &[Vector3<f64>], with_scale: bool) -> Result<Alignment, EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::LengthMismatch(est.len(), gt.len()));
    }
    let n = est.len();
    if n < 3 {
        return Err(EvalError::TooFewPoints(n));
    }
    let nf = n as f64;
    let me = est.iter().sum::<Vector3<f64>>() / nf;
    let mg = gt.iter().sum::<Vector3<f64>>() / nf;
    let mut cov = Matrix3::zeros();
    let mut var_e = 0.0;
    for (e, g) in est.iter().zip(gt) {
        let (de, dg) = (e - me, g - mg);
        cov += dg * de.transpose();
        var_e += de.norm_squared();
    }
    cov /= nf;
    var_e /= nf;

    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let d = svd.singular_values;
    // Rank below 2 on either side leaves a free rotation about the line.
    let tol = 1e-12 * d[0].max(f64::MIN_POSITIVE);
    let mut sorted = [d[0], d[1], d[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if var_e <= 0.0 || sorted[0] <= 0.0 || sorted[1] <= tol {
        return Err(EvalError::DegenerateSpread);
    }
    let mut s = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        // Flip the axis of the smallest singular value.
        let (imin, _) = d.iter().enumerate().fold((0, f64::INFINITY), |b, (i, v)| if *v < b.1 { (i, *v) } else { b });
        s[(imin, imin)] = -1.0;
    }
    let rotation = u * s * vt;
    let scale = if with_scale {
        (Matrix3::from_diagonal(&d) * s).trace() / var_e
    } else {
        1.0
    };
    let translation = mg - scale * rotation * me;
    Ok(Alignment {
        rotation,
        translation,
        scale,
    })
}

/// Translation residuals after alignment, in meters.
pub fn aligned_errors(est: &[Vector3<f64>], gt: &[Vector3<f64>], with_scale: bool) -> Result<(Alignment, Vec<f64>), EvalError> {
    let a = umeyama_align(est, gt, with_scale)?;
    let errs = est.iter().zip(gt).map(|(e, g)| (a.apply(e) - g).norm()).collect();
    Ok((a, errs))
}

pub fn rmse(errors: &[f64]) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt()
}

/// Pairs estimated and reference poses whose timestamps lie within the association window.
pub fn associate_trajectories(est: &[TimedPose], gt: &[TimedPose]) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let mut out = Vec::new();
    for e in est {
        let best = gt
            .iter()
            .map(|g| ((g.t - e.t).abs(), g))
            .filter(|(d, _)| *d <= ASSOCIATION_WINDOW)
            .min_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((_, g)) = best {
            out.push((e.pose.translation, g.pose.translation));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AteResult {
    pub rmse_cm: f64,
    pub errors_cm: Vec<f64>,
    pub alignment: Alignment,
}

/// Absolute trajectory error after alignment, centimeters.
pub fn ate_rmse(est: &[TimedPose], gt: &[TimedPose], with_scale: bool) -> Result<AteResult, EvalError> {
    let pairs = associate_trajectories(est, gt);
    let (e, g): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let (alignment, errs) = aligned_errors(&e, &g, with_scale)?;
    let errors_cm: Vec<f64> = errs.iter().map(|v| v * 100.0).collect();
    Ok(AteResult {
        rmse_cm: rmse(&errors_cm),
        errors_cm,
        alignment,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsnrSummary {
    /// Mean over finite values; `None` when every pair is identical.
    pub mean: Option<f64>,
    pub per_frame: Vec<f64>,
    pub infinite: usize,
}

pub fn sequence_psnr(renders: &[Image], targets: &[Image]) -> Result<PsnrSummary, crate::losses::LossError> {
    let per_frame: Vec<f64> = renders
        .iter()
        .zip(targets)
        .map(|(r, t)| psnr(r, t))
        .collect::<Result<_, _>>()?;
    let finite: Vec<f64> = per_frame.iter().copied().filter(|v| v.is_finite()).collect();
    Ok(PsnrSummary {
        mean: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
        infinite: per_frame.len() - finite.len(),
        per_frame,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub total_seconds: f64,
    pub tracking_seconds: f64,
    pub mapping_seconds: f64,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    /// `None` when no ground truth was available or alignment failed.
    pub ate_rmse_cm: Option<f64>,
    pub path_length_m: Option<f64>,
    pub psnr_mean_db: Option<f64>,
    /// `None` marks a render identical to its target (infinite PSNR).
    pub psnr_per_frame: Vec<Option<f64>>,
    /// Frame ids the PSNR list refers to.
    pub psnr_frames: Vec<usize>,
    /// Mean PSNR over keyframes only.
    pub psnr_keyframes_db: Option<f64>,
    pub translation_errors_cm: Vec<f64>,
    pub alignment: Option<Alignment>,
    pub with_scale: bool,
    pub keyframes: Vec<usize>,
    pub gaussians: usize,
    pub runtime: RuntimeStats,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }

    pub fn table(&self) -> String {
        let opt = |v: Option<f64>, unit: &str| v.map_or("n/a".to_string(), |v| format!("{v:.4} {unit}"));
        let mut s = String::new();
        let _ = writeln!(s, "{:<22} {}", "mode", self.mode);
        let _ = writeln!(s, "{:<22} {}", "ATE RMSE", opt(self.ate_rmse_cm, "cm"));
        let _ = writeln!(s, "{:<22} {}", "path length", opt(self.path_length_m, "m"));
        let _ = writeln!(s, "{:<22} {}", "alignment", if self.with_scale { "similarity" } else { "rigid" });
        let _ = writeln!(s, "{:<22} {}", "PSNR (mean)", opt(self.psnr_mean_db, "dB"));
        let _ = writeln!(s, "{:<22} {}", "PSNR frames", self.psnr_frames.len());
        let _ = writeln!(s, "{:<22} {}", "PSNR (keyframes)", opt(self.psnr_keyframes_db, "dB"));
        let _ = writeln!(s, "{:<22} {}", "keyframes", self.keyframes.len());
        let _ = writeln!(s, "{:<22} {}", "gaussians", self.gaussians);
        let _ = writeln!(s, "{:<22} {:.2} s", "runtime", self.runtime.total_seconds);
        s
    }
}

/// Sum of distances between consecutive positions.
pub fn path_length(traj: &[TimedPose]) -> f64 {
    traj.windows(2)
        .map(|w| (w[1].pose.translation - w[0].pose.translation).norm())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use nalgebra::{Rotation3, UnitQuaternion};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn cloud(seed: u64, n: usize) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
            .collect()
    }

    fn traj(points: &[Vector3<f64>]) -> Vec<TimedPose> {
        points
            .iter()
            .enumerate()
            .map(|(i, p)| TimedPose {
                t: i as f64 * 0.1,
                pose: Pose::from_translation(*p),
            })
            .collect()
    }

    #[test]
    fn identity_alignment() {
        let p = cloud(1, 20);
        let a = umeyama_align(&p, &p, true).unwrap();
        assert!((a.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(a.translation.norm() < 1e-12 && (a.scale - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recovers_rotation_and_shift() {
        let gt = cloud(2, 30);
        let r = Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2);
        let shift = Vector3::new(1.0, 0.0, 0.0);
        // est = R⁻¹(gt − shift) so that gt = R·est + shift.
        let est: Vec<_> = gt.iter().map(|g| r.inverse() * (g - shift)).collect();
        let a = umeyama_align(&est, &gt, false).unwrap();
        assert!((a.rotation - r.into_inner()).abs().max() < 1e-12);
        assert!((a.translation - shift).norm() < 1e-12);
    }

    #[test]
    fn recovers_pure_scale() {
        let gt = cloud(3, 30);
        let est: Vec<_> = gt.iter().map(|g| 0.5 * g).collect();
        let a = umeyama_align(&est, &gt, true).unwrap();
        assert!((a.scale - 2.0).abs() < 1e-12);
    }

    #[test]
    fn reflection_is_not_returned() {
        let gt = cloud(4, 30);
        let est: Vec<_> = gt.iter().map(|g| Vector3::new(-g.x, g.y, g.z)).collect();
        let a = umeyama_align(&est, &gt, true).unwrap();
        assert!((a.rotation.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        let line: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert_eq!(umeyama_align(&line, &line, false), Err(EvalError::DegenerateSpread));
        let same = vec![Vector3::new(1.0, 1.0, 1.0); 4];
        assert_eq!(umeyama_align(&same, &same, true), Err(EvalError::DegenerateSpread));
        assert_eq!(umeyama_align(&line[..2], &line[..2], false), Err(EvalError::TooFewPoints(2)));
    }

    #[test]
    fn offset_is_absorbed() {
        let gt = traj(&cloud(5, 50));
        let est: Vec<_> = gt
            .iter()
            .map(|p| TimedPose {
                t: p.t,
                pose: Pose::from_translation(p.pose.translation + Vector3::new(0.01, 0.0, 0.0)),
            })
            .collect();
        assert!(ate_rmse(&est, &gt, false).unwrap().rmse_cm < 1e-9);
        assert!(ate_rmse(&gt, &gt, false).unwrap().rmse_cm < 1e-9);
    }

    #[test]
    fn isotropic_noise_gives_sqrt3_cm() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts = cloud(6, 1000);
        let gt = traj(&pts);
        let est: Vec<_> = pts
            .iter()
            .map(|p| {
                let mut noise = || 0.01 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
                p + Vector3::new(noise(), noise(), noise())
            })
            .collect();
        let r = ate_rmse(&traj(&est), &gt, false).unwrap().rmse_cm;
        assert!((r - 3f64.sqrt()).abs() < 0.15 * 3f64.sqrt(), "{r}");
    }

    #[test]
    fn psnr_summary() {
        let a = Image::filled(4, 4, 3, 0.5);
        let b = Image::filled(4, 4, 3, 0.6);
        let s = sequence_psnr(&[a.clone(), a.clone()], &[a.clone(), a.clone()]).unwrap();
        assert_eq!((s.mean, s.infinite), (None, 2));
        let s = sequence_psnr(&[a.clone()], &[b]).unwrap();
        assert!((s.mean.unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn report_roundtrips() {
        let r = MetricsReport {
            mode: "rgbd+imu".into(),
            ate_rmse_cm: Some(1.25),
            path_length_m: Some(5.38),
            psnr_mean_db: None,
            psnr_per_frame: vec![Some(30.5), None],
            psnr_frames: vec![0, 7],
            psnr_keyframes_db: Some(30.5),
            translation_errors_cm: vec![0.1, 0.2],
            alignment: Some(Alignment::identity()),
            with_scale: false,
            keyframes: vec![0, 7],
            gaussians: 1234,
            runtime: RuntimeStats::default(),
        };
        assert_eq!(MetricsReport::from_json(&r.to_json()).unwrap(), r);
        assert!(r.table().contains("1.2500 cm"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn ate_is_rigid_invariant(seed in 0u64..10_000, ax in -3.0f64..3.0, ay in -3.0f64..3.0, az in -3.0f64..3.0,
                                  tx in -5.0f64..5.0, ty in -5.0f64..5.0, tz in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt_pts = cloud(seed, 25);
            let est_pts: Vec<_> = gt_pts.iter().map(|p| p + Vector3::from_fn(|_, _| rng.gen_range(-0.05..0.05))).collect();
            let base = ate_rmse(&traj(&est_pts), &traj(&gt_pts), false).unwrap().rmse_cm;
            let q = UnitQuaternion::from_scaled_axis(Vector3::new(ax, ay, az));
            let moved: Vec<_> = est_pts.iter().map(|p| q * p + Vector3::new(tx, ty, tz)).collect();
            let after = ate_rmse(&traj(&moved), &traj(&gt_pts), false).unwrap().rmse_cm;
            prop_assert!((base - after).abs() < 1e-9);
        }
    }
}
