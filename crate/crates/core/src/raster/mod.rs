//! Tile-based differentiable splatting.
//!
//! Gaussians are projected with the affine approximation of the pinhole
//! model, binned into 16x16 pixel tiles, depth sorted per tile and
//! alpha-composited front to back. Color, accumulated opacity and an
//! opacity-normalized depth are produced in one pass. [`render_backward`]
//! returns gradients for every Gaussian parameter and for the camera pose;
//! the pose gradient is obtained by differentiating the world-to-view
//! transform applied to the Gaussians, with the rasterizer itself working in
//! the camera frame.

mod backward;
mod forward;
mod project;

pub use backward::{render_backward, RenderGradients, RenderUpstream};
pub use forward::{render, render_with_stats, RenderContext, RenderOutput, RenderStats};
pub use project::{project_all, projection_jacobian, ProjectStats, ProjectedGaussian};

use thiserror::Error;

pub const TILE_SIZE: usize = 16;
/// View-space depth below which Gaussians are culled, meters.
pub const NEAR_PLANE: f64 = 0.01;
/// Gaussians whose mean projects beyond this multiple of the half field of
/// view are culled; the affine projection is meaningless out there.
pub const GUARD_BAND: f64 = 1.3;
/// Added to the diagonal of every image-plane covariance, pixels².
pub const COV2D_REGULARIZER: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.999;
/// Compositing stops once transmittance falls below this value.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
/// Accumulated opacity below which rendered depth is reported as 0.
pub const DEPTH_OPACITY_MIN: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("render context was built for {context} gaussians but the map has {map}")]
    ContextMismatch { context: usize, map: usize },
    #[error("upstream gradient buffers have the wrong size: {0}")]
    UpstreamShape(String),
}

/// Rasterizer knobs that change the rendered function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    /// Support radius of each splat in standard deviations (Mahalanobis
    /// distance). A Gaussian contributes to a pixel only inside this ellipse,
    /// and tile binning uses the bounding box of the same ellipse.
    pub support_sigmas: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self { support_sigmas: 3.0 }
    }
}

impl RenderSettings {
    /// Wide support: the truncated tail is about `1e-14` of the peak, so the
    /// rendered buffers (including the opacity-normalized depth) are
    /// continuous to well below finite-difference noise.
    pub fn wide() -> Self {
        Self { support_sigmas: 8.0 }
    }
}
