//! No-reference image quality: NIQE features (MSCN coefficients, GGD/AGGD
//! moment-matching fits at two scales) and the Mahalanobis-style score.
//!
//! Model file layout (little endian): magic `MM3DNIQE`, version `u32` (1),
//! patch size `u32`, 36 `f64` means, 1296 `f64` covariance entries row-major.

use std::io::{Read, Write};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::image::{gaussian_kernel, Image};

pub const FEATURES: usize = 36;
pub const DEFAULT_PATCH: usize = 96;
/// Patch size of the bundled model, sized for 160×120 frames.
pub const SYNTHETIC_PATCH: usize = 32;
/// Patches whose sharpness is below this fraction of the sharpest one are ignored.
pub const SHARPNESS_FRACTION: f64 = 0.75;
pub const MIN_CORPUS: usize = 10;
const MAGIC: &[u8; 8] = b"MM3DNIQE";
const VERSION: u32 = 1;
const MSCN_C: f64 = 1.0;
/// Mean local deviation (0–255 scale) below which a patch counts as flat.
const MIN_SHARPNESS: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum NiqeError {
    #[error("no patch passed the sharpness filter")]
    NoQualifiedPatches,
    #[error("image {w}x{h} is smaller than two {patch}-pixel patches per side")]
    ImageTooSmall { w: usize, h: usize, patch: usize },
    #[error("corpus has {0} images, need at least {MIN_CORPUS}")]
    CorpusTooSmall(usize),
    #[error("bad model file: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiqeModel {
    pub patch: usize,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Gaussian-weighted local mean/deviation normalization (7×7, σ = 7/6) on a
/// 0–255 scale. Returns `(mscn, local deviation)`.
pub fn mscn(gray: &Image) -> (Image, Image) {
    let k = gaussian_kernel(7.0 / 6.0, 3);
    let img = Image::from_vec(gray.width, gray.height, 1, gray.data.iter().map(|v| v * 255.0).collect());
    let mu = filter(&img, &k);
    let sq = Image::from_vec(img.width, img.height, 1, img.data.iter().map(|v| v * v).collect());
    let mu2 = filter(&sq, &k);
    let sigma: Vec<f64> = mu2
        .data
        .iter()
        .zip(&mu.data)
        .map(|(m2, m)| (m2 - m * m).max(0.0).sqrt())
        .collect();
    let out = img
        .data
        .iter()
        .zip(&mu.data)
        .zip(&sigma)
        .map(|((v, m), s)| (v - m) / (s + MSCN_C))
        .collect();
    (
        Image::from_vec(img.width, img.height, 1, out),
        Image::from_vec(img.width, img.height, 1, sigma),
    )
}

/// Separable correlation with replicated borders.
fn filter(img: &Image, k: &[f64]) -> Image {
    let r = (k.len() / 2) as isize;
    let (w, h) = (img.width as isize, img.height as isize);
    let mut tmp = vec![0.0; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[(y * w + x) as usize] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * img.data[(y * w + (x + i as isize - r).clamp(0, w - 1)) as usize])
                .sum();
        }
    }
    let mut out = vec![0.0; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            out[(y * w + x) as usize] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[((y + i as isize - r).clamp(0, h - 1) * w + x) as usize])
                .sum();
        }
    }
    Image::from_vec(img.width, img.height, 1, out)
}

const GAMMA_LO: f64 = 0.2;
const GAMMA_STEP: f64 = 0.001;
const GAMMA_COUNT: usize = 9801;

/// `Γ(2/a)² / (Γ(1/a) Γ(3/a))` over the shape grid `[0.2, 10]`, step 0.001.
fn ratio_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0..GAMMA_COUNT)
            .map(|i| {
                let a = GAMMA_LO + i as f64 * GAMMA_STEP;
                (2.0 * ln_gamma(2.0 / a) - ln_gamma(1.0 / a) - ln_gamma(3.0 / a)).exp()
            })
            .collect()
    })
}

fn best_shape(target: f64) -> f64 {
    let (i, _) = ratio_table()
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bd), (i, r)| {
            let d = (r - target).abs();
            if d < bd {
                (i, d)
            } else {
                (bi, bd)
            }
        });
    GAMMA_LO + i as f64 * GAMMA_STEP
}

/// Symmetric generalized Gaussian fit: `(shape, variance)`.
pub fn fit_ggd(x: &[f64]) -> (f64, f64) {
    let n = x.len().max(1) as f64;
    let var = x.iter().map(|v| v * v).sum::<f64>() / n;
    let mean_abs = x.iter().map(|v| v.abs()).sum::<f64>() / n;
    if var <= 0.0 {
        return (GAMMA_LO + (GAMMA_COUNT - 1) as f64 * GAMMA_STEP, 0.0);
    }
    (best_shape(mean_abs * mean_abs / var), var)
}

/// Asymmetric generalized Gaussian fit: `(shape, mean, left variance, right variance)`.
pub fn fit_aggd(x: &[f64]) -> (f64, f64, f64, f64) {
    let (mut ls, mut ln, mut rs, mut rn) = (0.0, 0usize, 0.0, 0usize);
    for v in x {
        if *v < 0.0 {
            ls += v * v;
            ln += 1;
        } else if *v > 0.0 {
            rs += v * v;
            rn += 1;
        }
    }
    let left = if ln > 0 { (ls / ln as f64).sqrt() } else { 0.0 };
    let right = if rn > 0 { (rs / rn as f64).sqrt() } else { 0.0 };
    let n = x.len().max(1) as f64;
    let e2 = x.iter().map(|v| v * v).sum::<f64>() / n;
    let eabs = x.iter().map(|v| v.abs()).sum::<f64>() / n;
    if left <= 0.0 || right <= 0.0 || e2 <= 0.0 {
        return (GAMMA_LO + (GAMMA_COUNT - 1) as f64 * GAMMA_STEP, 0.0, left * left, right * right);
    }
    let g = left / right;
    let r_hat = eabs * eabs / e2;
    let big_r = r_hat * (g.powi(3) + 1.0) * (g + 1.0) / (g * g + 1.0).powi(2);
    let a = best_shape(big_r);
    let (l1, l2, l3) = (ln_gamma(1.0 / a), ln_gamma(2.0 / a), ln_gamma(3.0 / a));
    let mean = (right - left) * (l2 - l1).exp() * ((l1 - l3) / 2.0).exp();
    (a, mean, left * left, right * right)
}

/// 18 features of one MSCN patch.
fn patch_features(m: &Image, x0: usize, y0: usize, p: usize) -> [f64; 18] {
    let at = |x: usize, y: usize| m.data[y * m.width + x];
    let mut f = [0.0; 18];
    let vals: Vec<f64> = (y0..y0 + p).flat_map(|y| (x0..x0 + p).map(move |x| (x, y))).map(|(x, y)| at(x, y)).collect();
    let (a, v) = fit_ggd(&vals);
    f[0] = a;
    f[1] = v;
    let shifts: [(isize, isize); 4] = [(1, 0), (0, 1), (1, 1), (-1, 1)];
    for (si, (dx, dy)) in shifts.iter().enumerate() {
        let mut prod = Vec::with_capacity(p * p);
        for y in y0..y0 + p {
            for x in x0..x0 + p {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < x0 as isize || nx >= (x0 + p) as isize || ny >= (y0 + p) as isize {
                    continue;
                }
                prod.push(at(x, y) * at(nx as usize, ny as usize));
            }
        }
        let (a, mean, l, r) = fit_aggd(&prod);
        f[2 + 4 * si..6 + 4 * si].copy_from_slice(&[a, mean, l, r]);
    }
    f
}

/// Features of every patch that passes the sharpness filter.
pub fn image_features(img: &Image, patch: usize) -> Result<Vec<[f64; FEATURES]>, NiqeError> {
    let gray = if img.channels == 1 { img.clone() } else { img.to_gray() };
    if patch < 4 || gray.width < 2 * patch || gray.height < 2 * patch {
        return Err(NiqeError::ImageTooSmall {
            w: gray.width,
            h: gray.height,
            patch,
        });
    }
    let (nx, ny) = (gray.width / patch, gray.height / patch);
    let (m1, sigma) = mscn(&gray);
    let (m2, _) = mscn(&gray.downsample(2));
    let half = patch / 2;
    let mut patches: Vec<(f64, [f64; FEATURES])> = (0..ny)
        .flat_map(|j| (0..nx).map(move |i| (i, j)))
        .map(|(i, j)| {
            let (x0, y0) = (i * patch, j * patch);
            let mut sharp = 0.0;
            for y in y0..y0 + patch {
                for x in x0..x0 + patch {
                    sharp += sigma.data[y * sigma.width + x];
                }
            }
            let mut f = [0.0; FEATURES];
            f[..18].copy_from_slice(&patch_features(&m1, x0, y0, patch));
            f[18..].copy_from_slice(&patch_features(&m2, i * half, j * half, half));
            (sharp / (patch * patch) as f64, f)
        })
        .collect();
    let max = patches.iter().map(|p| p.0).fold(0.0, f64::max);
    if !(max > MIN_SHARPNESS) {
        return Err(NiqeError::NoQualifiedPatches);
    }
    patches.retain(|p| p.0 >= SHARPNESS_FRACTION * max);
    Ok(patches.into_iter().map(|p| p.1).collect())
}

fn mean_cov(feats: &[[f64; FEATURES]]) -> (DVector<f64>, DMatrix<f64>) {
    let n = feats.len() as f64;
    let mut mean = DVector::zeros(FEATURES);
    for f in feats {
        mean += DVector::from_column_slice(f);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(FEATURES, FEATURES);
    for f in feats {
        let d = DVector::from_column_slice(f) - &mean;
        cov += &d * d.transpose();
    }
    if feats.len() > 1 {
        cov /= n - 1.0;
    }
    (mean, cov)
}

impl NiqeModel {
    /// Fits mean and covariance of the qualified-patch features over a corpus
    /// of pristine images, with covariance regularized by `1e-6·I`.
    pub fn fit(corpus: &[Image], patch: usize) -> Result<NiqeModel, NiqeError> {
        let m = Self::fit_unregularized(corpus, patch)?;
        Ok(NiqeModel {
            cov: m.cov + DMatrix::identity(FEATURES, FEATURES) * 1e-6,
            ..m
        })
    }

    pub fn fit_unregularized(corpus: &[Image], patch: usize) -> Result<NiqeModel, NiqeError> {
        if corpus.len() < MIN_CORPUS {
            return Err(NiqeError::CorpusTooSmall(corpus.len()));
        }
        let per_image: Vec<Vec<[f64; FEATURES]>> = corpus
            .par_iter()
            .map(|img| image_features(img, patch))
            .collect::<Result<_, _>>()?;
        let all: Vec<[f64; FEATURES]> = per_image.into_iter().flatten().collect();
        let (mean, cov) = mean_cov(&all);
        Ok(NiqeModel { patch, mean, cov })
    }

    /// Distance of the image's feature statistics from the model; lower is more natural.
    pub fn score(&self, img: &Image) -> Result<f64, NiqeError> {
        let feats = image_features(img, self.patch)?;
        let (mu, cov) = mean_cov(&feats);
        let d = &mu - &self.mean;
        let pooled = (&self.cov + cov) / 2.0;
        let inv = pooled
            .pseudo_inverse(1e-12)
            .map_err(|e| NiqeError::Format(format!("covariance inversion failed: {e}")))?;
        Ok((d.transpose() * inv * &d)[(0, 0)].max(0.0).sqrt())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), NiqeError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.patch as u32).to_le_bytes())?;
        for v in self.mean.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        for r in 0..FEATURES {
            for c in 0..FEATURES {
                w.write_all(&self.cov[(r, c)].to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<NiqeModel, NiqeError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        parse_model(&bytes)
    }
}

static BUNDLED: &[u8] = include_bytes!("../data/niqe_synthetic.bin");

/// Model fitted on [`crate::dataset::pristine_corpus`] with [`SYNTHETIC_PATCH`].
pub fn bundled_model() -> NiqeModel {
    parse_model(BUNDLED).expect("bundled NIQE model is valid")
}

/// Decodes a model file, validating magic, version, size and covariance symmetry.
pub fn parse_model(bytes: &[u8]) -> Result<NiqeModel, NiqeError> {
    let expected = 8 + 4 + 4 + 8 * (FEATURES + FEATURES * FEATURES);
    if bytes.len() != expected {
        return Err(NiqeError::Format(format!("expected {expected} bytes, got {}", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(NiqeError::Format("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(8);
    if version != VERSION {
        return Err(NiqeError::Format(format!("unsupported version {version}")));
    }
    let patch = u32_at(12) as usize;
    if patch < 4 {
        return Err(NiqeError::Format(format!("patch size {patch} too small")));
    }
    let f64_at = |i: usize| f64::from_le_bytes(bytes[16 + 8 * i..24 + 8 * i].try_into().expect("8 bytes"));
    let mean = DVector::from_fn(FEATURES, |i, _| f64_at(i));
    let cov = DMatrix::from_fn(FEATURES, FEATURES, |r, c| f64_at(FEATURES + r * FEATURES + c));
    if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
        return Err(NiqeError::Format("non-finite entry".into()));
    }
    for r in 0..FEATURES {
        for c in 0..r {
            if cov[(r, c)] != cov[(c, r)] {
                return Err(NiqeError::Format("covariance not symmetric".into()));
            }
        }
    }
    Ok(NiqeModel { patch, mean, cov })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn natural(seed: u64, w: usize, h: usize) -> Image {
        // Sum of randomly placed soft blobs and edges plus fine noise.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Image::filled(w, h, 1, 0.5);
        for _ in 0..40 {
            let (cx, cy) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
            let (s, a) = (rng.gen_range(2.0..12.0), rng.gen_range(-0.3..0.3));
            for y in 0..h {
                for x in 0..w {
                    let d2 = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (s * s);
                    let v = img.get(x, y, 0) + a * (-d2).exp();
                    img.set(x, y, 0, v);
                }
            }
        }
        for v in img.data.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v = (*v + 0.02 * n).clamp(0.0, 1.0);
        }
        img
    }

    #[test]
    fn ggd_recovers_gaussian_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..200_000).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let (a, v) = fit_ggd(&x);
        assert!((a - 2.0).abs() < 0.05, "{a}");
        assert!((v - 4.0).abs() < 0.05);
        let (a, m, l, r) = fit_aggd(&x);
        assert!((a - 2.0).abs() < 0.05 && m.abs() < 0.05 && (l - 4.0).abs() < 0.1 && (r - 4.0).abs() < 0.1);
    }

    #[test]
    fn ratio_table_spans_grid() {
        let t = ratio_table();
        assert_eq!(t.len(), 9801);
        // Gaussian: Γ(1)²/(Γ(1/2)Γ(3/2)) = 2/π.
        let i = ((2.0 - GAMMA_LO) / GAMMA_STEP).round() as usize;
        assert!((t[i] - 2.0 / std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn constant_image_has_no_qualified_patches() {
        let img = Image::filled(64, 64, 1, 0.4);
        assert!(matches!(image_features(&img, 16), Err(NiqeError::NoQualifiedPatches)));
    }

    #[test]
    fn small_corpus_is_rejected() {
        let corpus: Vec<Image> = (0..3).map(|s| natural(s, 64, 64)).collect();
        assert!(matches!(NiqeModel::fit(&corpus, 16), Err(NiqeError::CorpusTooSmall(3))));
    }

    #[test]
    fn identical_corpus_has_zero_covariance() {
        // Texture in one quadrant only, so exactly one patch qualifies per image.
        let mut img = Image::filled(32, 32, 1, 0.5);
        let tex = natural(7, 16, 16);
        for y in 4..12 {
            for x in 4..12 {
                img.set(x, y, 0, tex.get(x, y, 0));
            }
        }
        assert_eq!(image_features(&img, 16).unwrap().len(), 1);
        let m = NiqeModel::fit_unregularized(&vec![img; 10], 16).unwrap();
        assert!(m.cov.abs().max() < 1e-20);
    }

    #[test]
    fn blur_raises_score_and_model_roundtrips() {
        let corpus: Vec<Image> = (0..12).map(|s| natural(s, 96, 96)).collect();
        let model = NiqeModel::fit(&corpus, 24).unwrap();
        assert!(model.cov.clone().cholesky().is_some());
        for img in &corpus[..4] {
            let s0 = model.score(img).unwrap();
            for sigma in [1.0, 2.0, 3.0] {
                let s = model.score(&img.gaussian_blur(sigma)).unwrap();
                assert!(s > s0, "σ={sigma}: {s} <= {s0}");
            }
        }
        let mut buf = Vec::new();
        model.write(&mut buf).unwrap();
        assert_eq!(NiqeModel::read(&buf[..]).unwrap(), model);
        buf[0] = b'X';
        assert!(parse_model(&buf).is_err());
        assert!(parse_model(&buf[..100]).is_err());
    }
}
