//! Scalar objectives and their gradients with respect to rendered buffers.

use thiserror::Error;

use crate::image::{gaussian_kernel, Image};
use crate::raster::{RenderOutput, RenderUpstream};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no unmasked pixels")]
    EmptyMask,
    #[error("image {0}x{1} is smaller than the 11x11 SSIM window")]
    ImageTooSmall(usize, usize),
    #[error("depth variance below 1e-12 on the mask")]
    DegenerateVariance,
    #[error("negative loss weight")]
    NegativeWeight,
}

/// Opacity threshold of the tracking mask.
pub const TRACKING_OPACITY: f64 = 0.99;
/// MSE below which PSNR is reported as `f64::INFINITY`.
pub const PSNR_MSE_FLOOR: f64 = 1e-12;

const SSIM_SIZE: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub lambda_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_c: 0.8,
            lambda_s: 0.2,
            lambda_d: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if [self.lambda_c, self.lambda_s, self.lambda_d].iter().all(|v| *v >= 0.0) {
            Ok(())
        } else {
            Err(LossError::NegativeWeight)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl PixelMask {
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    /// Pixels whose value is strictly above `threshold`.
    pub fn above(img: &Image, threshold: f64) -> Self {
        assert_eq!(img.channels, 1);
        Self {
            width: img.width,
            height: img.height,
            data: img.data.iter().map(|v| *v > threshold).collect(),
        }
    }

    pub fn and(&self, other: &PixelMask) -> PixelMask {
        PixelMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.data.len() as f64
        }
    }
}

/// Depth supervision: a per-pixel estimate plus the pixels where it is valid.
#[derive(Debug, Clone, Copy)]
pub struct DepthTarget<'a> {
    pub values: &'a Image,
    pub valid: Option<&'a PixelMask>,
}

impl<'a> DepthTarget<'a> {
    pub fn new(values: &'a Image) -> Self {
        Self { values, valid: None }
    }
}

fn check_shape(a: &Image, b: &Image) -> Result<(), LossError> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(LossError::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )))
    }
}

fn check_mask(img: &Image, mask: &PixelMask) -> Result<(), LossError> {
    if mask.width == img.width && mask.height == img.height {
        Ok(())
    } else {
        Err(LossError::ShapeMismatch(format!(
            "mask {}x{} vs image {}x{}",
            mask.width, mask.height, img.width, img.height
        )))
    }
}

/// Mean absolute error over unmasked pixels and all channels.
pub fn photometric_l1(
    rendered: &Image,
    target: &Image,
    mask: Option<&PixelMask>,
) -> Result<(f64, Vec<f64>), LossError> {
    check_shape(rendered, target)?;
    if let Some(m) = mask {
        check_mask(rendered, m)?;
    }
    let ch = rendered.channels;
    let active = |p: usize| mask.map_or(true, |m| m.data[p]);
    let count = (0..rendered.pixel_count()).filter(|&p| active(p)).count() * ch;
    if count == 0 {
        return Err(LossError::EmptyMask);
    }
    let inv = 1.0 / count as f64;
    let mut grad = vec![0.0; rendered.data.len()];
    let mut sum = 0.0;
    for p in 0..rendered.pixel_count() {
        if !active(p) {
            continue;
        }
        for c in 0..ch {
            let i = p * ch + c;
            let d = rendered.data[i] - target.data[i];
            sum += d.abs();
            grad[i] = if d > 0.0 {
                inv
            } else if d < 0.0 {
                -inv
            } else {
                0.0
            };
        }
    }
    Ok((sum * inv, grad))
}

/// Valid-mode separable correlation with `k` of a single-channel plane.
fn correlate_valid(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            let mut acc = 0.0;
            for (a, kv) in k.iter().enumerate() {
                acc += kv * row[x + a];
            }
            tmp[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for (b, kv) in k.iter().enumerate() {
            let row = &tmp[(y + b) * ow..(y + b + 1) * ow];
            let dst = &mut out[y * ow..(y + 1) * ow];
            for (d, s) in dst.iter_mut().zip(row) {
                *d += kv * s;
            }
        }
    }
    out
}

/// Adjoint of [`correlate_valid`]: scatters a valid-size map back to `w x h`.
fn correlate_valid_adjoint(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        let row = &src[y * ow..(y + 1) * ow];
        for (b, kv) in k.iter().enumerate() {
            let dst = &mut tmp[(y + b) * ow..(y + b + 1) * ow];
            for (d, s) in dst.iter_mut().zip(row) {
                *d += kv * s;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (a, kv) in k.iter().enumerate() {
                out[y * w + x + a] += kv * v;
            }
        }
    }
    out
}

/// Mean SSIM over valid window positions and channels, with its gradient
/// with respect to `rendered`.
pub fn ssim(rendered: &Image, target: &Image) -> Result<(f64, Vec<f64>), LossError> {
    check_shape(rendered, target)?;
    let (w, h, ch) = (rendered.width, rendered.height, rendered.channels);
    if w < SSIM_SIZE || h < SSIM_SIZE {
        return Err(LossError::ImageTooSmall(w, h));
    }
    let k = gaussian_kernel(SSIM_SIGMA, SSIM_SIZE / 2);
    let npos = (w + 1 - SSIM_SIZE) * (h + 1 - SSIM_SIZE);
    let norm = 1.0 / (npos * ch) as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; rendered.data.len()];
    for c in 0..ch {
        let x: Vec<f64> = rendered.data.iter().skip(c).step_by(ch).copied().collect();
        let y: Vec<f64> = target.data.iter().skip(c).step_by(ch).copied().collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let mx = correlate_valid(&x, w, h, &k);
        let my = correlate_valid(&y, w, h, &k);
        let exx = correlate_valid(&xx, w, h, &k);
        let eyy = correlate_valid(&yy, w, h, &k);
        let exy = correlate_valid(&xy, w, h, &k);
        let mut g_mx = vec![0.0; npos];
        let mut g_exx = vec![0.0; npos];
        let mut g_exy = vec![0.0; npos];
        for p in 0..npos {
            let (ux, uy) = (mx[p], my[p]);
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * (exy[p] - ux * uy) + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = (exx[p] - ux * ux) + (eyy[p] - uy * uy) + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            g_mx[p] = norm * s * (2.0 * uy / a1 - 2.0 * uy / a2 - 2.0 * ux / b1 + 2.0 * ux / b2);
            g_exx[p] = -norm * s / b2;
            g_exy[p] = norm * 2.0 * s / a2;
        }
        let t_mx = correlate_valid_adjoint(&g_mx, w, h, &k);
        let t_exx = correlate_valid_adjoint(&g_exx, w, h, &k);
        let t_exy = correlate_valid_adjoint(&g_exy, w, h, &k);
        for i in 0..w * h {
            grad[i * ch + c] = t_mx[i] + 2.0 * x[i] * t_exx[i] + y[i] * t_exy[i];
        }
    }
    Ok((total * norm, grad))
}

/// Structural dissimilarity `(1 - SSIM) / 2` and its gradient.
pub fn dssim(rendered: &Image, target: &Image) -> Result<(f64, Vec<f64>), LossError> {
    let (s, g) = ssim(rendered, target)?;
    Ok(((1.0 - s) / 2.0, g.into_iter().map(|v| -0.5 * v).collect()))
}

/// Pearson depth loss `1 - r` over the mask, with the gradient with respect to `d_ren`.
pub fn pearson_depth(
    d_est: &Image,
    d_ren: &Image,
    mask: &PixelMask,
) -> Result<(f64, Vec<f64>), LossError> {
    check_shape(d_est, d_ren)?;
    check_mask(d_ren, mask)?;
    let idx: Vec<usize> = (0..mask.data.len()).filter(|&i| mask.data[i]).collect();
    if idx.len() < 2 {
        return Err(LossError::EmptyMask);
    }
    let n = idx.len() as f64;
    let xm = idx.iter().map(|&i| d_ren.data[i]).sum::<f64>() / n;
    let ym = idx.iter().map(|&i| d_est.data[i]).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &i in &idx {
        let dx = d_ren.data[i] - xm;
        let dy = d_est.data[i] - ym;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx / n <= 1e-12 || syy / n <= 1e-12 {
        return Err(LossError::DegenerateVariance);
    }
    let denom = (sxx * syy).sqrt();
    let r = sxy / denom;
    let mut grad = vec![0.0; d_ren.data.len()];
    for &i in &idx {
        let dx = d_ren.data[i] - xm;
        let dy = d_est.data[i] - ym;
        grad[i] = -(dy / denom - r * dx / sxx);
    }
    Ok((1.0 - r.clamp(-1.0, 1.0), grad))
}

/// Result of a composite loss: value plus gradients in rasterizer layout.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    pub upstream: RenderUpstream,
    /// Fraction of pixels that passed the tracking mask (1 for mapping).
    pub mask_fraction: f64,
    /// Set when the depth term was skipped for a degenerate depth variance.
    pub depth_dropped: bool,
}

fn add_depth_term(
    out: &mut LossEval,
    depth: Option<DepthTarget<'_>>,
    render: &RenderOutput,
    base_mask: &PixelMask,
    lambda_d: f64,
) -> Result<(), LossError> {
    if lambda_d == 0.0 {
        return Ok(());
    }
    let Some(t) = depth else {
        return Ok(());
    };
    check_shape(t.values, &render.depth)?;
    let mask = match t.valid {
        Some(v) => {
            check_mask(&render.depth, v)?;
            base_mask.and(v)
        }
        None => base_mask.clone(),
    };
    match pearson_depth(t.values, &render.depth, &mask) {
        Ok((l, g)) => {
            out.loss += lambda_d * l;
            for (u, gi) in out.upstream.depth.iter_mut().zip(g) {
                *u += lambda_d * gi;
            }
        }
        Err(LossError::DegenerateVariance) | Err(LossError::EmptyMask) => out.depth_dropped = true,
        Err(e) => return Err(e),
    }
    Ok(())
}

/// Tracking objective: masked L1 plus `lambda_d` times the masked Pearson term.
/// Pixels with accumulated opacity at or below 0.99 are excluded.
pub fn tracking_loss(
    render: &RenderOutput,
    rgb: &Image,
    depth: Option<DepthTarget<'_>>,
    w: &LossWeights,
) -> Result<LossEval, LossError> {
    w.validate()?;
    let mask = PixelMask::above(&render.opacity, TRACKING_OPACITY);
    let (l1, g) = photometric_l1(&render.color, rgb, Some(&mask))?;
    let mut out = LossEval {
        loss: l1,
        upstream: RenderUpstream::zeros(rgb.width, rgb.height),
        mask_fraction: mask.fraction(),
        depth_dropped: false,
    };
    out.upstream.color = g;
    add_depth_term(&mut out, depth, render, &mask, w.lambda_d)?;
    Ok(out)
}

/// Mapping objective `lambda_c * L1 + lambda_s * D-SSIM + lambda_d * Pearson`, unmasked.
pub fn mapping_loss(
    render: &RenderOutput,
    rgb: &Image,
    depth: Option<DepthTarget<'_>>,
    w: &LossWeights,
) -> Result<LossEval, LossError> {
    w.validate()?;
    check_shape(&render.color, rgb)?;
    let mut out = LossEval {
        loss: 0.0,
        upstream: RenderUpstream::zeros(rgb.width, rgb.height),
        mask_fraction: 1.0,
        depth_dropped: false,
    };
    if w.lambda_c != 0.0 {
        let (l, g) = photometric_l1(&render.color, rgb, None)?;
        out.loss += w.lambda_c * l;
        for (u, gi) in out.upstream.color.iter_mut().zip(g) {
            *u += w.lambda_c * gi;
        }
    }
    if w.lambda_s != 0.0 {
        let (l, g) = dssim(&render.color, rgb)?;
        out.loss += w.lambda_s * l;
        for (u, gi) in out.upstream.color.iter_mut().zip(g) {
            *u += w.lambda_s * gi;
        }
    }
    let full = PixelMask::full(rgb.width, rgb.height);
    add_depth_term(&mut out, depth, render, &full, w.lambda_d)?;
    Ok(out)
}

/// Peak signal-to-noise ratio for unit-range images; `f64::INFINITY` when MSE < 1e-12.
pub fn psnr(rendered: &Image, target: &Image) -> Result<f64, LossError> {
    check_shape(rendered, target)?;
    if rendered.data.is_empty() {
        return Err(LossError::EmptyMask);
    }
    let mse = rendered
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / rendered.data.len() as f64;
    Ok(if mse < PSNR_MSE_FLOOR {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}
