use rayon::prelude::*;

use crate::gaussian_map::GaussianMap;
use crate::geometry::{Intrinsics, Pose};
use crate::image::Image;

use super::project::{project_all, ProjectStats, ProjectedGaussian};
use super::{RenderSettings, ALPHA_MAX, DEPTH_OPACITY_MIN, TILE_SIZE, TRANSMITTANCE_MIN};

/// Slack added to support boxes so that pixels exactly on the ellipse are
/// decided by the Mahalanobis test rather than by rounding in the box.
const BOX_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Contributor {
    /// Position in the owning tile's depth-sorted entry list.
    pub(crate) entry: u32,
    /// Alpha after clamping.
    pub(crate) alpha: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct TileContext {
    pub(crate) x0: usize,
    pub(crate) y0: usize,
    pub(crate) x1: usize,
    pub(crate) y1: usize,
    /// Indices into `RenderContext::projected`, sorted by (depth, source index).
    pub(crate) entries: Vec<u32>,
    /// Per-pixel ranges into `contrib`, row-major within the tile.
    pub(crate) offsets: Vec<u32>,
    pub(crate) contrib: Vec<Contributor>,
    pub(crate) final_t: Vec<f64>,
    pub(crate) opacity: Vec<f64>,
    pub(crate) depth: Vec<f64>,
}

impl TileContext {
    pub(crate) fn width(&self) -> usize {
        self.x1 - self.x0
    }
}

/// Everything the backward pass needs from a forward render.
#[derive(Debug, Clone)]
pub struct RenderContext {
    pub(crate) width: usize,
    pub(crate) height: usize,
    pub(crate) map_len: usize,
    pub(crate) cam: Pose,
    pub(crate) intrinsics: Intrinsics,
    pub(crate) projected: Vec<ProjectedGaussian>,
    pub(crate) tiles_x: usize,
    pub(crate) tiles: Vec<TileContext>,
}

impl RenderContext {
    pub fn map_len(&self) -> usize {
        self.map_len
    }

    pub fn camera(&self) -> &Pose {
        &self.cam
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    pub fn projected(&self) -> &[ProjectedGaussian] {
        &self.projected
    }

    /// Ordered `(map index, alpha)` pairs that were composited at pixel `(x, y)`, nearest first.
    pub fn contributors(&self, x: usize, y: usize) -> Vec<(usize, f64)> {
        let tile = &self.tiles[(y / TILE_SIZE) * self.tiles_x + x / TILE_SIZE];
        let li = (y - tile.y0) * tile.width() + (x - tile.x0);
        let (s, e) = (tile.offsets[li] as usize, tile.offsets[li + 1] as usize);
        tile.contrib[s..e]
            .iter()
            .map(|c| {
                let p = &self.projected[tile.entries[c.entry as usize] as usize];
                (p.source_index, c.alpha)
            })
            .collect()
    }

    /// Set of map indices that touched at least one pixel.
    pub fn visible_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.map_len];
        for tile in &self.tiles {
            for c in &tile.contrib {
                mask[self.projected[tile.entries[c.entry as usize] as usize].source_index] = true;
            }
        }
        mask
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    /// RGB, black background.
    pub color: Image,
    pub opacity: Image,
    /// Opacity-normalized depth, meters; 0 where opacity < 1e-6.
    pub depth: Image,
    pub context: RenderContext,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RenderStats {
    pub projected: usize,
    pub culling: ProjectStats,
    /// Total number of (pixel, Gaussian) blend terms.
    pub contributions: usize,
}

pub fn render(map: &GaussianMap, cam: &Pose, k: &Intrinsics, settings: &RenderSettings) -> RenderOutput {
    render_with_stats(map, cam, k, settings).0
}

pub fn render_with_stats(
    map: &GaussianMap,
    cam: &Pose,
    k: &Intrinsics,
    settings: &RenderSettings,
) -> (RenderOutput, RenderStats) {
    let (projected, culling) = project_all(map, cam, k, settings);
    let (w, h) = (k.width, k.height);
    let tiles_x = w.div_ceil(TILE_SIZE);
    let tiles_y = h.div_ceil(TILE_SIZE);
    let bins = bin_tiles(&projected, tiles_x, tiles_y, w, h);
    let cut2 = settings.support_sigmas * settings.support_sigmas;

    let tiles: Vec<(TileContext, Vec<f64>)> = bins
        .into_par_iter()
        .enumerate()
        .map(|(ti, entries)| {
            let tx = ti % tiles_x;
            let ty = ti / tiles_x;
            let x0 = tx * TILE_SIZE;
            let y0 = ty * TILE_SIZE;
            render_tile(&projected, entries, x0, y0, (x0 + TILE_SIZE).min(w), (y0 + TILE_SIZE).min(h), cut2)
        })
        .collect();

    let mut color = Image::new(w, h, 3);
    let mut opacity = Image::new(w, h, 1);
    let mut depth = Image::new(w, h, 1);
    let mut contributions = 0;
    for (tile, tile_color) in &tiles {
        contributions += tile.contrib.len();
        let tw = tile.width();
        for y in tile.y0..tile.y1 {
            for x in tile.x0..tile.x1 {
                let li = (y - tile.y0) * tw + (x - tile.x0);
                let o = color.idx(x, y);
                color.data[o..o + 3].copy_from_slice(&tile_color[3 * li..3 * li + 3]);
                opacity.data[y * w + x] = tile.opacity[li];
                depth.data[y * w + x] = tile.depth[li];
            }
        }
    }
    let tiles: Vec<TileContext> = tiles.into_iter().map(|(t, _)| t).collect();

    let stats = RenderStats {
        projected: projected.len(),
        culling,
        contributions,
    };
    let context = RenderContext {
        width: w,
        height: h,
        map_len: map.len(),
        cam: *cam,
        intrinsics: *k,
        projected,
        tiles_x,
        tiles,
    };
    (
        RenderOutput {
            color,
            opacity,
            depth,
            context,
        },
        stats,
    )
}

/// Inclusive pixel index range whose centers fall within `[c - r, c + r]`.
#[inline]
pub(crate) fn pixel_span(c: f64, r: f64, lo: usize, hi: usize) -> Option<(usize, usize)> {
    let a = (c - r - 0.5 - BOX_SLACK).ceil();
    let b = (c + r - 0.5 + BOX_SLACK).floor();
    let a = a.max(lo as f64);
    let b = b.min(hi as f64 - 1.0);
    if a > b {
        None
    } else {
        Some((a as usize, b as usize))
    }
}

fn bin_tiles(
    projected: &[ProjectedGaussian],
    tiles_x: usize,
    tiles_y: usize,
    w: usize,
    h: usize,
) -> Vec<Vec<u32>> {
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (j, p) in projected.iter().enumerate() {
        let Some((xa, xb)) = pixel_span(p.mean2d.x, p.radius.x, 0, w) else {
            continue;
        };
        let Some((ya, yb)) = pixel_span(p.mean2d.y, p.radius.y, 0, h) else {
            continue;
        };
        for ty in ya / TILE_SIZE..=yb / TILE_SIZE {
            for tx in xa / TILE_SIZE..=xb / TILE_SIZE {
                bins[ty * tiles_x + tx].push(j as u32);
            }
        }
    }
    bins.par_iter_mut().for_each(|b| {
        b.sort_by(|&a, &c| {
            let (pa, pc) = (&projected[a as usize], &projected[c as usize]);
            pa.depth
                .total_cmp(&pc.depth)
                .then(pa.source_index.cmp(&pc.source_index))
        })
    });
    bins
}

fn render_tile(
    projected: &[ProjectedGaussian],
    entries: Vec<u32>,
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    cut2: f64,
) -> (TileContext, Vec<f64>) {
    let tw = x1 - x0;
    let npix = tw * (y1 - y0);
    let mut t = vec![1.0f64; npix];
    let mut acc_o = vec![0.0f64; npix];
    let mut acc_d = vec![0.0f64; npix];
    let mut acc_c = vec![0.0f64; 3 * npix];
    let mut done = vec![false; npix];
    let mut remaining = npix;
    // (pixel, entry, alpha) in composite order per pixel.
    let mut trip: Vec<(u32, u32, f64)> = Vec::new();

    for (ei, &pj) in entries.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        let p = &projected[pj as usize];
        let Some((xa, xb)) = pixel_span(p.mean2d.x, p.radius.x, x0, x1) else {
            continue;
        };
        let Some((ya, yb)) = pixel_span(p.mean2d.y, p.radius.y, y0, y1) else {
            continue;
        };
        let [ca, cb, cc] = p.conic;
        for py in ya..=yb {
            let dy = py as f64 + 0.5 - p.mean2d.y;
            let row = (py - y0) * tw;
            for px in xa..=xb {
                let li = row + px - x0;
                if done[li] {
                    continue;
                }
                let dx = px as f64 + 0.5 - p.mean2d.x;
                let m2 = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy;
                if m2 > cut2 {
                    continue;
                }
                let alpha = (p.alpha_peak * (-0.5 * m2).exp()).min(ALPHA_MAX);
                let wgt = alpha * t[li];
                acc_o[li] += wgt;
                acc_d[li] += p.depth * wgt;
                acc_c[3 * li] += p.color.x * wgt;
                acc_c[3 * li + 1] += p.color.y * wgt;
                acc_c[3 * li + 2] += p.color.z * wgt;
                trip.push((li as u32, ei as u32, alpha));
                t[li] *= 1.0 - alpha;
                if t[li] < TRANSMITTANCE_MIN {
                    done[li] = true;
                    remaining -= 1;
                }
            }
        }
    }

    // Stable counting sort by pixel keeps depth order inside each pixel.
    let mut offsets = vec![0u32; npix + 1];
    for &(li, _, _) in &trip {
        offsets[li as usize + 1] += 1;
    }
    for i in 0..npix {
        offsets[i + 1] += offsets[i];
    }
    let mut cursor = offsets.clone();
    let mut contrib = vec![Contributor { entry: 0, alpha: 0.0 }; trip.len()];
    for &(li, e, a) in &trip {
        let slot = &mut cursor[li as usize];
        contrib[*slot as usize] = Contributor { entry: e, alpha: a };
        *slot += 1;
    }

    let depth = acc_d
        .iter()
        .zip(&acc_o)
        .map(|(d, o)| if *o < DEPTH_OPACITY_MIN { 0.0 } else { d / o })
        .collect();
    (
        TileContext {
            x0,
            y0,
            x1,
            y1,
            entries,
            offsets,
            contrib,
            final_t: t,
            opacity: acc_o,
            depth,
        },
        acc_c,
    )
}
