//! Map growth and refinement: depth scale/shift fitting, per-pixel
//! densification and multi-view optimization of the Gaussians.

use nalgebra::{Matrix2, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

use crate::gaussian_map::{logit, Gaussian3D, GaussianMap};
use crate::geometry::{backproject, Intrinsics, Pose};
use crate::image::Image;
use crate::losses::{mapping_loss, DepthTarget, LossError, LossWeights, PixelMask};
use crate::optim::Adam;
use crate::raster::{render, render_backward, RenderError, RenderOutput, RenderSettings};

#[derive(Debug, Error, PartialEq)]
pub enum MapperError {
    #[error("depth estimate is constant on the mask; scale and shift are not identifiable")]
    RankDeficient,
    #[error("no metric depth available for densification")]
    NoDepth,
    #[error("map optimization needs at least one view")]
    NoViews,
    #[error("map is empty")]
    EmptyMap,
    #[error("invalid mapper config: {0}")]
    Config(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapperConfig {
    pub iterations: usize,
    /// Pixels rendered at or below this opacity are densified.
    pub opacity_threshold: f64,
    /// Pixels whose depth error exceeds this multiple of the median error are densified.
    pub depth_error_multiplier: f64,
    /// Below this many valid pixels the depth-error rule is skipped.
    pub min_median_pixels: usize,
    /// Position rate as a fraction of the scene extent.
    pub lr_position: f64,
    pub lr_log_scale: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub settings: RenderSettings,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            iterations: 150,
            opacity_threshold: 0.5,
            depth_error_multiplier: 50.0,
            min_median_pixels: 100,
            lr_position: 1e-4,
            lr_log_scale: 5e-3,
            lr_opacity: 5e-2,
            lr_color: 2.5e-3,
            settings: RenderSettings::default(),
        }
    }
}

impl MapperConfig {
    pub fn validate(&self) -> Result<(), MapperError> {
        let positive = [
            self.opacity_threshold,
            self.depth_error_multiplier,
            self.lr_position,
            self.lr_log_scale,
            self.lr_opacity,
            self.lr_color,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(MapperError::Config("thresholds and rates must be positive".into()));
        }
        if self.opacity_threshold >= 1.0 {
            return Err(MapperError::Config("opacity threshold must be below 1".into()));
        }
        Ok(())
    }
}

/// `d ≈ sigma·estimate + theta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthFit {
    pub sigma: f64,
    pub theta: f64,
}

impl DepthFit {
    pub fn apply(&self, v: f64) -> f64 {
        self.sigma * v + self.theta
    }
}

/// Least-squares scale and shift mapping `d_e` onto `d_r` over the mask,
/// from the 2×2 normal equations.
pub fn fit_depth_scale(d_e: &Image, d_r: &Image, mask: &PixelMask) -> Result<DepthFit, MapperError> {
    if !d_e.same_shape(d_r) || mask.width != d_e.width || mask.height != d_e.height {
        return Err(MapperError::Loss(LossError::ShapeMismatch("depth fit inputs differ in size".into())));
    }
    let (mut n, mut se, mut see, mut sr, mut ser) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut first = None;
    let mut distinct = false;
    for (i, (e, r)) in d_e.data.iter().zip(&d_r.data).enumerate() {
        if !mask.data[i] {
            continue;
        }
        match first {
            None => first = Some(*e),
            Some(f) if f != *e => distinct = true,
            _ => {}
        }
        n += 1.0;
        se += e;
        see += e * e;
        sr += r;
        ser += e * r;
    }
    if !distinct {
        return Err(MapperError::RankDeficient);
    }
    let a = Matrix2::new(see, se, se, n);
    let sol = a
        .lu()
        .solve(&Vector2::new(ser, sr))
        .ok_or(MapperError::RankDeficient)?;
    if !(sol[0].is_finite() && sol[1].is_finite()) || sol[0] == 0.0 {
        return Err(MapperError::RankDeficient);
    }
    Ok(DepthFit {
        sigma: sol[0],
        theta: sol[1],
    })
}

/// Metric stand-in for a relative inverse-depth estimate when no map exists
/// to fit against: inverse depth `1 + (e − median)/(2·range)`, so the median
/// maps to depth 1 and all depths lie in `[2/3, 2]`. `None` when the
/// estimate is constant or has no valid pixel.
pub fn normalize_relative_depth(estimate: &Image, valid: &PixelMask) -> Option<Image> {
    let mut vals: Vec<f64> = estimate
        .data
        .iter()
        .zip(&valid.data)
        .filter(|(_, v)| **v)
        .map(|(e, _)| *e)
        .collect();
    if vals.is_empty() {
        return None;
    }
    let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    if !(hi > lo) {
        return None;
    }
    let mid = vals.len() / 2;
    let (_, med, _) = vals.select_nth_unstable_by(mid, f64::total_cmp);
    let med = *med;
    let data = estimate
        .data
        .iter()
        .zip(&valid.data)
        .map(|(e, v)| if *v { 1.0 / (1.0 + (e - med) / (2.0 * (hi - lo))) } else { 0.0 })
        .collect();
    Some(Image::from_vec(estimate.width, estimate.height, 1, data))
}

/// Metric depth from a relative inverse-depth estimate, fitted against the
/// inverse of the rendered depth on well-covered pixels.
pub fn fit_relative_depth(estimate: &Image, valid: &PixelMask, render: &RenderOutput) -> Result<Image, MapperError> {
    let inv_render = Image::from_vec(
        render.depth.width,
        render.depth.height,
        1,
        render.depth.data.iter().map(|d| if *d > 0.0 { 1.0 / d } else { 0.0 }).collect(),
    );
    let mut mask = valid.clone();
    for (i, m) in mask.data.iter_mut().enumerate() {
        *m = *m && render.opacity.data[i] > 0.5 && render.depth.data[i] > 0.0;
    }
    let fit = fit_depth_scale(estimate, &inv_render, &mask)?;
    let data = estimate
        .data
        .iter()
        .zip(&valid.data)
        .map(|(e, v)| {
            let inv = fit.apply(*e);
            if *v && inv > 0.0 {
                1.0 / inv
            } else {
                0.0
            }
        })
        .collect();
    Ok(Image::from_vec(estimate.width, estimate.height, 1, data))
}

/// New Gaussians for pixels the map explains poorly: low rendered opacity,
/// or depth error far above the median. `render` is `None` for an empty map.
pub fn densify(
    rgb: &Image,
    render: Option<&RenderOutput>,
    fitted_depth: Option<&Image>,
    pose: &Pose,
    k: &Intrinsics,
    cfg: &MapperConfig,
) -> Result<Vec<Gaussian3D>, MapperError> {
    let depth = fitted_depth.ok_or(MapperError::NoDepth)?;
    let n = k.pixel_count();
    let opacity = |i: usize| render.map_or(0.0, |r| r.opacity.data[i]);
    let error = |i: usize| render.map_or(f64::INFINITY, |r| (r.depth.data[i] - depth.data[i]).abs());

    let mut errors: Vec<f64> = (0..n)
        .filter(|&i| opacity(i) > cfg.opacity_threshold && depth.data[i] > 0.0)
        .map(error)
        .collect();
    let cutoff = if errors.len() >= cfg.min_median_pixels {
        let mid = errors.len() / 2;
        let (_, m, _) = errors.select_nth_unstable_by(mid, f64::total_cmp);
        Some(cfg.depth_error_multiplier * *m)
    } else {
        None
    };

    let logit_half = logit(0.5);
    let mut out = Vec::new();
    for y in 0..k.height {
        for x in 0..k.width {
            let i = y * k.width + x;
            let z = depth.data[i];
            if !(z > 0.0 && z.is_finite()) {
                continue;
            }
            let low_opacity = opacity(i) < cfg.opacity_threshold;
            let bad_depth = cutoff.is_some_and(|c| error(i) > c);
            if !(low_opacity || bad_depth) {
                continue;
            }
            let mu = pose.transform_point(&backproject(x as f64 + 0.5, y as f64 + 0.5, z, k));
            let c = Vector3::new(rgb.get(x, y, 0), rgb.get(x, y, 1), rgb.get(x, y, 2)).map(|v| v.clamp(0.0, 1.0));
            out.push(Gaussian3D {
                mu,
                rot: UnitQuaternion::identity(),
                log_scale: Vector3::repeat((z / k.fx).ln()),
                opacity_logit: logit_half,
                color: c,
            });
        }
    }
    Ok(out)
}

/// One supervision view for map optimization; the pose is held fixed.
#[derive(Debug, Clone, Copy)]
pub struct MapView<'a> {
    pub pose: Pose,
    pub rgb: &'a Image,
    pub depth: Option<DepthTarget<'a>>,
    pub intrinsics: Intrinsics,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MapStats {
    pub iterations: usize,
    /// `(view index, loss)` per round.
    pub losses: Vec<(usize, f64)>,
}

/// View rendered in round `r`: the first view on even rounds, the others in
/// turn on odd rounds.
pub fn schedule(round: usize, views: usize) -> usize {
    if views <= 1 || round % 2 == 0 {
        0
    } else {
        1 + (round / 2) % (views - 1)
    }
}

/// Distance from the centroid of the means below which 90% of them lie.
pub fn scene_extent(map: &GaussianMap) -> f64 {
    if map.is_empty() {
        return 0.0;
    }
    let c = map.gaussians.iter().fold(Vector3::zeros(), |a, g| a + g.mu) / map.len() as f64;
    let mut d: Vec<f64> = map.gaussians.iter().map(|g| (g.mu - c).norm()).collect();
    let i = ((d.len() as f64 * 0.9) as usize).min(d.len() - 1);
    let (_, v, _) = d.select_nth_unstable_by(i, f64::total_cmp);
    *v
}

/// Optimizes positions, the shared log-scale, opacity and color of every
/// Gaussian against `views` with poses frozen. `views[0]` is the current
/// frame. Only Gaussians that contribute to a round's render are stepped.
pub fn optimize_map(
    map: &mut GaussianMap,
    views: &[MapView<'_>],
    cfg: &MapperConfig,
    weights: &LossWeights,
) -> Result<MapStats, MapperError> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(MapperError::NoViews);
    }
    if map.is_empty() {
        return Err(MapperError::EmptyMap);
    }
    let mut stats = MapStats::default();
    if cfg.iterations == 0 {
        return Ok(stats);
    }
    for g in map.gaussians.iter_mut() {
        g.log_scale = Vector3::repeat(g.log_scale.mean());
    }
    let lr_pos = cfg.lr_position * scene_extent(map).max(1e-3);
    let lr = [lr_pos, lr_pos, lr_pos, cfg.lr_log_scale, cfg.lr_opacity, cfg.lr_color, cfg.lr_color, cfg.lr_color];
    let mut adam = Adam::new(8, map.len());

    for round in 0..cfg.iterations {
        let vi = schedule(round, views.len());
        let v = &views[vi];
        let out = render(map, &v.pose, &v.intrinsics, &cfg.settings);
        let eval = mapping_loss(&out, v.rgb, v.depth, weights)?;
        stats.losses.push((vi, eval.loss));
        let grads = render_backward(&out.context, &eval.upstream, map, &v.pose, &v.intrinsics)?;
        let visible = out.context.visible_mask();
        for (i, g) in map.gaussians.iter_mut().enumerate() {
            if !visible[i] {
                continue;
            }
            let dm = grads.d_mu[i];
            let dc = grads.d_color[i];
            let grad = [dm.x, dm.y, dm.z, grads.d_log_scale[i].sum(), grads.d_opacity_logit[i], dc.x, dc.y, dc.z];
            let s = adam.step(i, &grad, &lr);
            g.mu -= Vector3::new(s[0], s[1], s[2]);
            g.log_scale = Vector3::repeat(g.log_scale.x - s[3]);
            g.opacity_logit = (g.opacity_logit - s[4]).clamp(-20.0, 20.0);
            g.color = (g.color - Vector3::new(s[5], s[6], s[7])).map(|c| c.clamp(0.0, 1.0));
        }
        stats.iterations += 1;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 16.0, 12.0, 32, 24).unwrap()
    }

    fn ramp() -> Image {
        let mut d = Image::new(32, 24, 1);
        for (i, v) in d.data.iter_mut().enumerate() {
            *v = 1.0 + 0.01 * i as f64;
        }
        d
    }

    #[test]
    fn exact_linear_models_are_recovered() {
        let e = ramp();
        let full = PixelMask::full(32, 24);
        let f = fit_depth_scale(&e, &e, &full).unwrap();
        assert!((f.sigma - 1.0).abs() < 1e-12 && f.theta.abs() < 1e-12);
        let r = Image::from_vec(32, 24, 1, e.data.iter().map(|v| 2.0 * v + 1.0).collect());
        let f = fit_depth_scale(&e, &r, &full).unwrap();
        assert!((f.sigma - 2.0).abs() < 1e-9 && (f.theta - 1.0).abs() < 1e-9);
    }

    #[test]
    fn noisy_fit_matches_pseudo_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let e = ramp();
        let r = Image::from_vec(32, 24, 1, e.data.iter().map(|v| 0.7 * v - 0.3 + rng.gen_range(-0.1..0.1)).collect());
        let mut mask = PixelMask::full(32, 24);
        for i in (0..mask.data.len()).step_by(3) {
            mask.data[i] = false;
        }
        let f = fit_depth_scale(&e, &r, &mask).unwrap();
        let idx: Vec<usize> = (0..mask.data.len()).filter(|&i| mask.data[i]).collect();
        let a = DMatrix::from_fn(idx.len(), 2, |row, c| if c == 0 { e.data[idx[row]] } else { 1.0 });
        let b = nalgebra::DVector::from_fn(idx.len(), |row, _| r.data[idx[row]]);
        let x = a.clone().pseudo_inverse(1e-14).unwrap() * &b;
        assert!((f.sigma - x[0]).abs() < 1e-9 && (f.theta - x[1]).abs() < 1e-9);
        let res = |s: f64, t: f64| idx.iter().map(|&i| (s * e.data[i] + t - r.data[i]).powi(2)).sum::<f64>();
        assert!(res(f.sigma, f.theta) <= res(1.0, 0.0));
    }

    #[test]
    fn constant_estimate_is_rank_deficient() {
        let e = Image::filled(32, 24, 1, 3.0);
        assert_eq!(
            fit_depth_scale(&e, &ramp(), &PixelMask::full(32, 24)),
            Err(MapperError::RankDeficient)
        );
    }

    #[test]
    fn empty_map_densifies_every_pixel() {
        let rgb = Image::filled(32, 24, 3, 0.3);
        let d = Image::filled(32, 24, 1, 2.0);
        let batch = densify(&rgb, None, Some(&d), &Pose::identity(), &k(), &MapperConfig::default()).unwrap();
        assert_eq!(batch.len(), 32 * 24);
        assert!(batch.iter().all(|g| g.opacity() == 0.5 && g.mu.iter().all(|v| v.is_finite())));
        assert_eq!(
            densify(&rgb, None, None, &Pose::identity(), &k(), &MapperConfig::default()),
            Err(MapperError::NoDepth)
        );
    }

    #[test]
    fn principal_pixel_lands_on_axis() {
        // Pixel (16, 12) has its center at (16.5, 12.5); with cx = 16.5 it is on the axis.
        let kk = Intrinsics::new(100.0, 100.0, 16.5, 12.5, 32, 24).unwrap();
        let rgb = Image::filled(32, 24, 3, 0.3);
        let d = Image::filled(32, 24, 1, 2.0);
        let batch = densify(&rgb, None, Some(&d), &Pose::identity(), &kk, &MapperConfig::default()).unwrap();
        let g = &batch[12 * 32 + 16];
        assert!((g.mu - Vector3::new(0.0, 0.0, 2.0)).norm() < 1e-12);
        assert!((g.scale() - Vector3::repeat(0.02)).norm() < 1e-12);
    }

    #[test]
    fn schedule_alternates_with_current_frame() {
        let s: Vec<usize> = (0..8).map(|r| schedule(r, 3)).collect();
        assert_eq!(s, vec![0, 1, 0, 2, 0, 1, 0, 2]);
        assert!((0..5).all(|r| schedule(r, 1) == 0));
    }
}
