//! Dense row-major image buffers and PNG conversion.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image io: {0}")]
    Io(#[from] std::io::Error),
    #[error("png codec: {0}")]
    Codec(#[from] ::image::ImageError),
    #[error("unsupported image layout: {0}")]
    Layout(String),
}

/// Row-major, channel-interleaved `f64` image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

/// Single-channel image holding depth in meters (0 marks an invalid pixel).
pub type DepthMap = Image;

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * channels, "buffer size mismatch");
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.idx(x, y) + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.idx(x, y) + c;
        self.data[i] = v;
    }

    /// ITU-R BT.601 luma, same value range as the input.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        Image::from_vec(self.width, self.height, 1, data)
    }

    /// Box-filter downsampling by an integer factor (trailing rows/columns dropped).
    pub fn downsample(&self, factor: usize) -> Image {
        assert!(factor >= 1);
        if factor == 1 {
            return self.clone();
        }
        let w = self.width / factor;
        let h = self.height / factor;
        let mut out = Image::new(w, h, self.channels);
        let norm = 1.0 / (factor * factor) as f64;
        for y in 0..h {
            for x in 0..w {
                for c in 0..self.channels {
                    let mut acc = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += self.get(x * factor + dx, y * factor + dy, c);
                        }
                    }
                    out.set(x, y, c, acc * norm);
                }
            }
        }
        out
    }

    /// Separable Gaussian blur with replicated borders.
    pub fn gaussian_blur(&self, sigma: f64) -> Image {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel = gaussian_kernel(sigma, radius as usize);
        let (w, h, ch) = (self.width as isize, self.height as isize, self.channels);
        let mut tmp = Image::new(self.width, self.height, ch);
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let mut acc = 0.0;
                    for (k, wgt) in kernel.iter().enumerate() {
                        let xx = (x + k as isize - radius).clamp(0, w - 1);
                        acc += wgt * self.get(xx as usize, y as usize, c);
                    }
                    tmp.set(x as usize, y as usize, c, acc);
                }
            }
        }
        let mut out = Image::new(self.width, self.height, ch);
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let mut acc = 0.0;
                    for (k, wgt) in kernel.iter().enumerate() {
                        let yy = (y + k as isize - radius).clamp(0, h - 1);
                        acc += wgt * tmp.get(x as usize, yy as usize, c);
                    }
                    out.set(x as usize, y as usize, c, acc);
                }
            }
        }
        out
    }

    /// Reads an 8-bit or 16-bit RGB(A)/gray PNG as RGB in `[0, 1]`.
    pub fn load_rgb(path: &Path) -> Result<Image, ImageError> {
        let img = ::image::open(path)?.into_rgb32f();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(f64::from).collect();
        Ok(Image::from_vec(w as usize, h as usize, 3, data))
    }

    pub fn save_rgb8(&self, path: &Path) -> Result<(), ImageError> {
        if self.channels != 3 {
            return Err(ImageError::Layout(format!("expected 3 channels, got {}", self.channels)));
        }
        let bytes: Vec<u8> = self.data.iter().map(|v| to_u8(*v)).collect();
        let buf = ::image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| ImageError::Layout("buffer size".into()))?;
        buf.save(path)?;
        Ok(())
    }

    pub fn save_gray8(&self, path: &Path) -> Result<(), ImageError> {
        if self.channels != 1 {
            return Err(ImageError::Layout(format!("expected 1 channel, got {}", self.channels)));
        }
        let bytes: Vec<u8> = self.data.iter().map(|v| to_u8(*v)).collect();
        let buf = ::image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| ImageError::Layout("buffer size".into()))?;
        buf.save(path)?;
        Ok(())
    }

    /// Reads a 16-bit depth PNG; meters = value / `scale`.
    pub fn load_depth16(path: &Path, scale: f64) -> Result<DepthMap, ImageError> {
        let img = ::image::open(path)?.into_luma16();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f64 / scale).collect();
        Ok(Image::from_vec(w as usize, h as usize, 1, data))
    }

    pub fn save_depth16(&self, path: &Path, scale: f64) -> Result<(), ImageError> {
        if self.channels != 1 {
            return Err(ImageError::Layout(format!("expected 1 channel, got {}", self.channels)));
        }
        let raw: Vec<u16> = self
            .data
            .iter()
            .map(|d| (d * scale).round().clamp(0.0, u16::MAX as f64) as u16)
            .collect();
        let buf = ::image::ImageBuffer::<::image::Luma<u16>, Vec<u16>>::from_raw(
            self.width as u32,
            self.height as u32,
            raw,
        )
        .ok_or_else(|| ImageError::Layout("buffer size".into()))?;
        buf.save(path)?;
        Ok(())
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Normalized 1-D Gaussian taps of length `2 * radius + 1`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}
