//! Finite-difference audit of [`render_backward`](crate::raster::render_backward).
//!
//! Each scene is rendered once, a random linear functional of the color,
//! opacity and depth buffers is backpropagated, and every parameter of every
//! Gaussian plus the six camera tangent coordinates is perturbed in both
//! directions. Scenes are drawn so that finite differences are meaningful:
//! depths are separated (no sort-order flips under the step), no pixel hits
//! the transmittance cut-off, and splats use the wide support so truncation
//! is invisible at the step size.

use nalgebra::{Quaternion, UnitQuaternion, Vector3, Vector4, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::gaussian_map::{Gaussian3D, GaussianMap};
use crate::geometry::{Intrinsics, Pose};
use crate::raster::{render, render_backward, RenderOutput, RenderSettings, RenderUpstream, TRANSMITTANCE_MIN};

/// Step for positions, rotations, scales, colors and pose.
pub const STEP: f64 = 1e-4;
/// Step for opacity logits.
pub const STEP_LOGIT: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-3;
pub const ABS_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct AuditConfig {
    pub scenes: usize,
    pub max_gaussians: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            scenes: 100,
            max_gaussians: 50,
            width: 64,
            height: 64,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub scene: usize,
    pub parameter: String,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct AuditReport {
    pub scenes: usize,
    pub gaussians: usize,
    pub checked: usize,
    pub mismatches: Vec<Mismatch>,
    /// Largest `|a - n| / max(|a|, |n|)` among entries above the absolute floor.
    pub worst_relative: f64,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.checked > 0
    }
}

/// Random scene in front of a randomly placed camera.
pub struct Scene {
    pub map: GaussianMap,
    pub cam: Pose,
    pub k: Intrinsics,
}

fn min_depth_gap(map: &GaussianMap, cam: &Pose) -> f64 {
    let mut z: Vec<f64> = map.gaussians.iter().map(|g| cam.inverse_transform_point(&g.mu).z).collect();
    z.sort_by(f64::total_cmp);
    z.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

fn reaches_cutoff(out: &RenderOutput) -> bool {
    // 1 - O is the final transmittance of each pixel.
    out.opacity.data.iter().any(|o| 1.0 - o < 10.0 * TRANSMITTANCE_MIN)
}

pub fn random_scene(rng: &mut ChaCha8Rng, n: usize, width: usize, height: usize) -> Scene {
    let f = 0.9 * width as f64;
    let k = Intrinsics::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
        .expect("valid audit intrinsics");
    loop {
        let cam = Pose::from_scaled_axis(
            Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)),
            Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
        );
        let gs: Vec<Gaussian3D> = (0..n)
            .map(|_| {
                let z = rng.gen_range(1.5..4.0);
                let u = rng.gen_range(-4.0..width as f64 + 4.0);
                let v = rng.gen_range(-4.0..height as f64 + 4.0);
                let pc = Vector3::new((u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z);
                let sigma_px: f64 = rng.gen_range(1.5..5.0);
                let base = (sigma_px * z / f).ln();
                let q = Quaternion::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                );
                Gaussian3D {
                    mu: cam.transform_point(&pc),
                    rot: UnitQuaternion::from_quaternion(q),
                    log_scale: Vector3::new(
                        base + rng.gen_range(-0.4..0.4),
                        base + rng.gen_range(-0.4..0.4),
                        base + rng.gen_range(-0.4..0.4),
                    ),
                    opacity_logit: crate::gaussian_map::logit(rng.gen_range(0.1..0.7)),
                    color: Vector3::new(rng.gen(), rng.gen(), rng.gen()),
                }
            })
            .collect();
        let mut map = GaussianMap::new();
        map.insert(gs, 0).expect("generated gaussians are valid");
        if min_depth_gap(&map, &cam) < 0.01 {
            continue;
        }
        let out = render(&map, &cam, &k, &RenderSettings::wide());
        if reaches_cutoff(&out) {
            continue;
        }
        return Scene { map, cam, k };
    }
}

/// Random linear functional of the render buffers.
struct Functional {
    color: Vec<f64>,
    opacity: Vec<f64>,
    depth: Vec<f64>,
}

impl Functional {
    fn draw(rng: &mut ChaCha8Rng, base: &RenderOutput) -> Self {
        let n = base.opacity.data.len();
        let mut normal = || -> f64 { StandardNormal.sample(rng) };
        let color = (0..3 * n).map(|_| normal()).collect();
        let opacity = (0..n).map(|_| normal()).collect();
        // Depth is in meters; scaled so no buffer dominates the functional.
        // Normalized depth is ill-conditioned where almost nothing was drawn.
        let depth = base
            .opacity
            .data
            .iter()
            .map(|o| {
                let w = 0.1 * normal();
                if *o < 1e-3 {
                    0.0
                } else {
                    w
                }
            })
            .collect();
        Self { color, opacity, depth }
    }

    fn eval(&self, out: &RenderOutput) -> f64 {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        dot(&self.color, &out.color.data) + dot(&self.opacity, &out.opacity.data) + dot(&self.depth, &out.depth.data)
    }

    fn upstream(&self, w: usize, h: usize) -> RenderUpstream {
        RenderUpstream {
            width: w,
            height: h,
            color: self.color.clone(),
            opacity: self.opacity.clone(),
            depth: self.depth.clone(),
        }
    }
}

fn perturb_rot(q: &UnitQuaternion<f64>, c: usize, h: f64) -> UnitQuaternion<f64> {
    let mut v = Vector4::new(q.w, q.i, q.j, q.k);
    v[c] += h;
    UnitQuaternion::from_quaternion(Quaternion::new(v[0], v[1], v[2], v[3]))
}

/// Checks one scene; returns `(checked, mismatches, worst relative error)`.
pub fn audit_scene(scene_id: usize, scene: &Scene, rng: &mut ChaCha8Rng) -> (usize, Vec<Mismatch>, f64) {
    let settings = RenderSettings::wide();
    let Scene { map, cam, k } = scene;
    let base = render(map, cam, k, &settings);
    let fun = Functional::draw(rng, &base);
    let grads = render_backward(&base.context, &fun.upstream(k.width, k.height), map, cam, k)
        .expect("context built from the same map");

    let loss_map = |m: &GaussianMap| fun.eval(&render(m, cam, k, &settings));
    let loss_cam = |c: &Pose| fun.eval(&render(map, c, k, &settings));

    let mut checks: Vec<(String, f64, f64)> = Vec::new();
    for (i, g) in map.gaussians.iter().enumerate() {
        let mut edit = |name: String, analytic: f64, h: f64, f: &dyn Fn(&mut Gaussian3D, f64)| {
            let mut plus = map.clone();
            f(&mut plus.gaussians[i], h);
            let mut minus = map.clone();
            f(&mut minus.gaussians[i], -h);
            let numeric = (loss_map(&plus) - loss_map(&minus)) / (2.0 * h);
            checks.push((name, analytic, numeric));
        };
        for c in 0..3 {
            edit(format!("g{i}.mu[{c}]"), grads.d_mu[i][c], STEP, &|g, h| g.mu[c] += h);
            edit(format!("g{i}.log_scale[{c}]"), grads.d_log_scale[i][c], STEP, &|g, h| {
                g.log_scale[c] += h
            });
            edit(format!("g{i}.color[{c}]"), grads.d_color[i][c], STEP, &|g, h| g.color[c] += h);
        }
        for c in 0..4 {
            let q = g.rot;
            edit(format!("g{i}.rot[{c}]"), grads.d_rot[i][c], STEP, &move |g, h| {
                g.rot = perturb_rot(&q, c, h)
            });
        }
        edit(format!("g{i}.opacity_logit"), grads.d_opacity_logit[i], STEP_LOGIT, &|g, h| {
            g.opacity_logit += h
        });
    }
    for c in 0..6 {
        let mut d = Vector6::zeros();
        d[c] = STEP;
        let numeric = (loss_cam(&cam.retract_left(&d)) - loss_cam(&cam.retract_left(&-d))) / (2.0 * STEP);
        checks.push((format!("pose[{c}]"), grads.d_pose[c], numeric));
    }

    let mut worst = 0.0f64;
    let mut bad = Vec::new();
    for (name, a, n) in &checks {
        let err = (a - n).abs();
        if err <= ABS_TOL {
            continue;
        }
        let rel = err / a.abs().max(n.abs());
        worst = worst.max(rel);
        if rel > REL_TOL || !a.is_finite() {
            bad.push(Mismatch {
                scene: scene_id,
                parameter: name.clone(),
                analytic: *a,
                numeric: *n,
            });
        }
    }
    (checks.len(), bad, worst)
}

/// Runs the full audit. Scenes are independent and checked in parallel;
/// results are merged in scene order.
pub fn run_audit(cfg: &AuditConfig) -> AuditReport {
    let results: Vec<(usize, usize, Vec<Mismatch>, f64)> = (0..cfg.scenes)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(s as u64));
            let n = rng.gen_range(1..=cfg.max_gaussians.max(1));
            let scene = random_scene(&mut rng, n, cfg.width, cfg.height);
            let (checked, bad, worst) = audit_scene(s, &scene, &mut rng);
            (n, checked, bad, worst)
        })
        .collect();
    let mut report = AuditReport {
        scenes: cfg.scenes,
        ..Default::default()
    };
    for (n, checked, bad, worst) in results {
        report.gaussians += n;
        report.checked += checked;
        report.mismatches.extend(bad);
        report.worst_relative = report.worst_relative.max(worst);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_audit_passes() {
        let report = run_audit(&AuditConfig {
            scenes: 4,
            max_gaussians: 8,
            width: 32,
            height: 32,
            seed: 1,
        });
        assert!(report.passed(), "{:#?}", &report.mismatches[..report.mismatches.len().min(10)]);
    }
}
