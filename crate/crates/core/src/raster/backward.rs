use nalgebra::{Matrix2, Matrix3, Vector3, Vector4, Vector6};
use rayon::prelude::*;

use crate::gaussian_map::GaussianMap;
use crate::geometry::{Intrinsics, Pose};

use super::forward::{RenderContext, TileContext};
use super::project::ProjectedGaussian;
use super::{RenderError, ALPHA_MAX, DEPTH_OPACITY_MIN};

/// Per-pixel gradients of a scalar loss with respect to the rendered buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderUpstream {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, `3 * width * height`.
    pub color: Vec<f64>,
    pub opacity: Vec<f64>,
    pub depth: Vec<f64>,
}

impl RenderUpstream {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            color: vec![0.0; 3 * width * height],
            opacity: vec![0.0; width * height],
            depth: vec![0.0; width * height],
        }
    }

    /// Accumulates `scale * other` into `self`.
    pub fn add_scaled(&mut self, other: &RenderUpstream, scale: f64) {
        for (a, b) in self.color.iter_mut().zip(&other.color) {
            *a += scale * b;
        }
        for (a, b) in self.opacity.iter_mut().zip(&other.opacity) {
            *a += scale * b;
        }
        for (a, b) in self.depth.iter_mut().zip(&other.depth) {
            *a += scale * b;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.color.iter().chain(&self.opacity).chain(&self.depth).all(|v| *v == 0.0)
    }
}

/// Gradients indexed like the map. The rotation gradient is taken with respect
/// to the raw `(w, x, y, z)` quaternion components followed by normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGradients {
    pub d_mu: Vec<Vector3<f64>>,
    pub d_rot: Vec<Vector4<f64>>,
    pub d_log_scale: Vec<Vector3<f64>>,
    pub d_opacity_logit: Vec<f64>,
    pub d_color: Vec<Vector3<f64>>,
    /// Camera tangent `(omega, nu)` with `R' = Exp(omega) R`, `t' = t + nu`.
    pub d_pose: Vector6<f64>,
}

impl RenderGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            d_mu: vec![Vector3::zeros(); n],
            d_rot: vec![Vector4::zeros(); n],
            d_log_scale: vec![Vector3::zeros(); n],
            d_opacity_logit: vec![0.0; n],
            d_color: vec![Vector3::zeros(); n],
            d_pose: Vector6::zeros(),
        }
    }
}

// Per-entry screen-space partials.
const MX: usize = 0;
const MY: usize = 1;
const CA: usize = 2;
const CB: usize = 3;
const CC: usize = 4;
const OP: usize = 5;
const COL: usize = 6;
const Z: usize = 9;
const NP: usize = 10;

pub fn render_backward(
    ctx: &RenderContext,
    upstream: &RenderUpstream,
    map: &GaussianMap,
    cam: &Pose,
    k: &Intrinsics,
) -> Result<RenderGradients, RenderError> {
    if ctx.map_len != map.len() {
        return Err(RenderError::ContextMismatch {
            context: ctx.map_len,
            map: map.len(),
        });
    }
    let npix = ctx.width * ctx.height;
    if upstream.width != ctx.width
        || upstream.height != ctx.height
        || upstream.color.len() != 3 * npix
        || upstream.opacity.len() != npix
        || upstream.depth.len() != npix
    {
        return Err(RenderError::UpstreamShape(format!(
            "expected {}x{}, got {}x{}",
            ctx.width, ctx.height, upstream.width, upstream.height
        )));
    }

    let partials: Vec<Vec<f64>> = ctx
        .tiles
        .par_iter()
        .map(|tile| tile_backward(tile, &ctx.projected, upstream, ctx.width))
        .collect();

    // Fixed tile order keeps the reduction deterministic.
    let mut screen = vec![[0.0f64; NP]; ctx.projected.len()];
    for (tile, part) in ctx.tiles.iter().zip(&partials) {
        for (e, &pj) in tile.entries.iter().enumerate() {
            let dst = &mut screen[pj as usize];
            for (d, s) in dst.iter_mut().zip(&part[e * NP..(e + 1) * NP]) {
                *d += s;
            }
        }
    }

    let r_cam = cam.rotation_matrix();
    let per: Vec<GaussianGrad> = ctx
        .projected
        .par_iter()
        .zip(screen.par_iter())
        .with_min_len(256)
        .map(|(p, g)| gaussian_backward(p, g, map, &r_cam, cam, k))
        .collect();

    let mut out = RenderGradients::zeros(map.len());
    let mut d_omega = Vector3::zeros();
    let mut d_t = Vector3::zeros();
    for (p, g) in ctx.projected.iter().zip(&per) {
        let i = p.source_index;
        out.d_mu[i] = g.mu;
        out.d_rot[i] = g.rot;
        out.d_log_scale[i] = g.log_scale;
        out.d_opacity_logit[i] = g.logit;
        out.d_color[i] = g.color;
        d_omega += g.pose_omega;
        d_t -= g.mu;
    }
    out.d_pose = Vector6::new(d_omega.x, d_omega.y, d_omega.z, d_t.x, d_t.y, d_t.z);
    Ok(out)
}

fn tile_backward(
    tile: &TileContext,
    projected: &[ProjectedGaussian],
    up: &RenderUpstream,
    width: usize,
) -> Vec<f64> {
    let mut part = vec![0.0f64; tile.entries.len() * NP];
    if tile.contrib.is_empty() {
        return part;
    }
    let tw = tile.width();
    for y in tile.y0..tile.y1 {
        for x in tile.x0..tile.x1 {
            let li = (y - tile.y0) * tw + (x - tile.x0);
            let (s, e) = (tile.offsets[li] as usize, tile.offsets[li + 1] as usize);
            if s == e {
                continue;
            }
            let gi = y * width + x;
            let gc = [up.color[3 * gi], up.color[3 * gi + 1], up.color[3 * gi + 2]];
            let o = tile.opacity[li];
            let (g_o, g_dn) = if o < DEPTH_OPACITY_MIN {
                (up.opacity[gi], 0.0)
            } else {
                (up.opacity[gi] - up.depth[gi] * tile.depth[li] / o, up.depth[gi] / o)
            };
            if gc == [0.0; 3] && g_o == 0.0 && g_dn == 0.0 {
                continue;
            }

            let mut t = tile.final_t[li];
            let mut bc = [0.0f64; 3];
            let mut bo = 0.0f64;
            let mut bz = 0.0f64;
            for ct in tile.contrib[s..e].iter().rev() {
                let ei = ct.entry as usize;
                let p = &projected[tile.entries[ei] as usize];
                let a = ct.alpha;
                t /= 1.0 - a;
                let c = [p.color.x, p.color.y, p.color.z];
                let w = a * t;
                let dst = &mut part[ei * NP..(ei + 1) * NP];
                for ch in 0..3 {
                    dst[COL + ch] += w * gc[ch];
                }
                dst[Z] += w * g_dn;

                let mut d_alpha = (1.0 - bo) * g_o + (p.depth - bz) * g_dn;
                for ch in 0..3 {
                    d_alpha += (c[ch] - bc[ch]) * gc[ch];
                }
                d_alpha *= t;

                if a < ALPHA_MAX {
                    let dx = x as f64 + 0.5 - p.mean2d.x;
                    let dy = y as f64 + 0.5 - p.mean2d.y;
                    let [ca, cb, cc] = p.conic;
                    // alpha = o * exp(-m2 / 2)
                    dst[OP] += d_alpha * a / p.alpha_peak;
                    let g_m2 = -0.5 * a * d_alpha;
                    dst[MX] += -2.0 * g_m2 * (ca * dx + cb * dy);
                    dst[MY] += -2.0 * g_m2 * (cb * dx + cc * dy);
                    dst[CA] += g_m2 * dx * dx;
                    dst[CB] += g_m2 * 2.0 * dx * dy;
                    dst[CC] += g_m2 * dy * dy;
                }

                for ch in 0..3 {
                    bc[ch] = a * c[ch] + (1.0 - a) * bc[ch];
                }
                bo = a + (1.0 - a) * bo;
                bz = a * p.depth + (1.0 - a) * bz;
            }
        }
    }
    part
}

struct GaussianGrad {
    mu: Vector3<f64>,
    rot: Vector4<f64>,
    log_scale: Vector3<f64>,
    logit: f64,
    color: Vector3<f64>,
    pose_omega: Vector3<f64>,
}

fn gaussian_backward(
    p: &ProjectedGaussian,
    g: &[f64; NP],
    map: &GaussianMap,
    r_cam: &Matrix3<f64>,
    cam: &Pose,
    k: &Intrinsics,
) -> GaussianGrad {
    let gs = &map.gaussians[p.source_index];
    let [ca, cb, cc] = p.conic;
    let conic = Matrix2::new(ca, cb, cb, cc);
    let g_conic = Matrix2::new(g[CA], 0.5 * g[CB], 0.5 * g[CB], g[CC]);
    let g_cov2d = -conic * g_conic * conic;
    let jac = p.jac;
    let g_cov_cam = jac.transpose() * g_cov2d * jac;
    let g_jac = 2.0 * g_cov2d * jac * p.cov_cam;

    let m = p.mean_cam;
    let iz = 1.0 / m.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let (gu, gv) = (g[MX], g[MY]);
    let mut g_mc = Vector3::new(
        gu * k.fx * iz,
        gv * k.fy * iz,
        -gu * k.fx * m.x * iz2 - gv * k.fy * m.y * iz2 + g[Z],
    );
    g_mc.x += g_jac[(0, 2)] * (-k.fx * iz2);
    g_mc.y += g_jac[(1, 2)] * (-k.fy * iz2);
    g_mc.z += g_jac[(0, 0)] * (-k.fx * iz2)
        + g_jac[(0, 2)] * (2.0 * k.fx * m.x * iz3)
        + g_jac[(1, 1)] * (-k.fy * iz2)
        + g_jac[(1, 2)] * (2.0 * k.fy * m.y * iz3);

    let g_mu = r_cam * g_mc;
    let g_cov_w = r_cam * g_cov_cam * r_cam.transpose();

    let rg = gs.rot.to_rotation_matrix().into_inner();
    let s = gs.scale();
    let mmat = rg * Matrix3::from_diagonal(&s);
    let g_m = 2.0 * g_cov_w * mmat;
    let mut g_s = Vector3::zeros();
    let mut g_rg = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            g_s[j] += g_m[(i, j)] * rg[(i, j)];
            g_rg[(i, j)] = g_m[(i, j)] * s[j];
        }
    }
    let q = gs.rot.quaternion();
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x);
    let dy = Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y);
    let dz = Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0);
    let g_qhat = Vector4::new(
        g_rg.component_mul(&dw).sum(),
        g_rg.component_mul(&dx).sum(),
        g_rg.component_mul(&dy).sum(),
        g_rg.component_mul(&dz).sum(),
    );
    let qhat = Vector4::new(w, x, y, z);
    let g_rot = g_qhat - qhat * qhat.dot(&g_qhat);

    let o = p.alpha_peak;
    let cov_w = gs.covariance();
    let a = g_cov_w * cov_w - cov_w * g_cov_w;
    let vee = Vector3::new(a[(1, 2)] - a[(2, 1)], a[(2, 0)] - a[(0, 2)], a[(0, 1)] - a[(1, 0)]);
    let pose_omega = g_mu.cross(&(gs.mu - cam.translation)) + vee;

    GaussianGrad {
        mu: g_mu,
        rot: g_rot,
        log_scale: g_s.component_mul(&s),
        logit: g[OP] * o * (1.0 - o),
        color: Vector3::new(g[COL], g[COL + 1], g[COL + 2]),
        pose_omega,
    }
}
