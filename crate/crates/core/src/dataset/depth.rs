//! Depth sources for tracking and mapping: the sensor, or an emulated
//! monocular network that outputs warped, affinely scaled inverse depth.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DatasetError, Frame};
use crate::image::Image;
use crate::losses::PixelMask;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DepthMode {
    Sensor,
    /// `a/z·(1 + amplitude·w(u, v)) + b` with per-frame random `a > 0`, `b`
    /// and a smooth random warp `w ∈ [-1, 1]`.
    EmulatedRelative { amplitude: f64, seed: u64 },
}

impl DepthMode {
    pub const DEFAULT_WARP: f64 = 0.05;

    pub fn emulated(seed: u64) -> Self {
        DepthMode::EmulatedRelative {
            amplitude: Self::DEFAULT_WARP,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthKind {
    /// Meters.
    Metric,
    /// Affine in inverse depth, unknown scale and shift; grows toward the camera.
    RelativeInverse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthEstimate {
    pub values: Image,
    pub kind: DepthKind,
    /// Pixels where the estimate is defined.
    pub valid: PixelMask,
}

pub fn depth_provider(frame: &Frame, mode: DepthMode) -> Result<DepthEstimate, DatasetError> {
    let depth = frame.depth.as_ref().ok_or(DatasetError::NoSensorDepth(frame.id))?;
    let valid = PixelMask::above(depth, 0.0);
    match mode {
        DepthMode::Sensor => Ok(DepthEstimate {
            values: depth.clone(),
            kind: DepthKind::Metric,
            valid,
        }),
        DepthMode::EmulatedRelative { amplitude, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (frame.id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let a: f64 = rng.gen_range(0.5..2.0);
            let b: f64 = rng.gen_range(-0.5..0.5);
            let (fu, fv): (f64, f64) = (rng.gen_range(0.3..0.8), rng.gen_range(0.3..0.8));
            let (pu, pv): (f64, f64) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
            let (w, h) = (depth.width as f64, depth.height as f64);
            let mut values = Image::new(depth.width, depth.height, 1);
            for y in 0..depth.height {
                for x in 0..depth.width {
                    let z = depth.get(x, y, 0);
                    if z <= 0.0 {
                        continue;
                    }
                    let warp = (2.0 * PI * fu * x as f64 / w + pu).sin() * (2.0 * PI * fv * y as f64 / h + pv).cos();
                    values.set(x, y, 0, a / z * (1.0 + amplitude * warp) + b);
                }
            }
            Ok(DepthEstimate {
                values,
                kind: DepthKind::RelativeInverse,
                valid,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Intrinsics;

    fn frame(depth: Option<Image>) -> Frame {
        Frame {
            id: 3,
            t: 0.0,
            rgb: Image::new(32, 24, 3),
            depth,
            intrinsics: Intrinsics::new(30.0, 30.0, 16.0, 12.0, 32, 24).unwrap(),
        }
    }

    fn ramp_depth() -> Image {
        let mut d = Image::new(32, 24, 1);
        for y in 0..24 {
            for x in 0..32 {
                d.set(x, y, 0, 1.0 + 0.1 * x as f64 + 0.05 * y as f64);
            }
        }
        d
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn sensor_mode_passes_depth_through() {
        let d = ramp_depth();
        let e = depth_provider(&frame(Some(d.clone())), DepthMode::Sensor).unwrap();
        assert_eq!(e.values, d);
        assert_eq!(e.kind, DepthKind::Metric);
        assert!(matches!(
            depth_provider(&frame(None), DepthMode::Sensor),
            Err(DatasetError::NoSensorDepth(3))
        ));
    }

    #[test]
    fn unwarped_estimate_is_affine_in_inverse_depth() {
        let d = ramp_depth();
        let e = depth_provider(&frame(Some(d.clone())), DepthMode::EmulatedRelative { amplitude: 0.0, seed: 1 }).unwrap();
        let inv: Vec<f64> = d.data.iter().map(|z| 1.0 / z).collect();
        assert!((correlation(&e.values.data, &inv) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn warped_estimate_stays_highly_correlated() {
        let d = ramp_depth();
        let inv: Vec<f64> = d.data.iter().map(|z| 1.0 / z).collect();
        for seed in 0..20 {
            let e = depth_provider(&frame(Some(d.clone())), DepthMode::emulated(seed)).unwrap();
            let r = correlation(&e.values.data, &inv);
            assert!(r < 1.0 - 1e-6 && r > 0.9, "seed {seed}: r = {r}");
        }
    }
}
