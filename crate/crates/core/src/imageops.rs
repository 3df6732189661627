//! Interleaved `H x W x C` float images and the resampling/filtering the rest of
//! the crate needs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major `H x W x C` image. Color images hold values in `[0, 1]`;
/// importance maps are single-channel and only required to be nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    Bicubic,
    Bilinear,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image pixels".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, c: usize) -> &mut f64 {
        &mut self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let src = self.pixel(y, self.width - 1 - x);
                let i = (y * self.width + x) * self.channels;
                out.data[i..i + self.channels].copy_from_slice(src);
            }
        }
        out
    }

    /// Translate by `(dy, dx)`; uncovered pixels take `fill`.
    pub fn shifted(&self, dy: isize, dx: isize, fill: f64) -> Self {
        let mut out = Self::filled(self.height, self.width, self.channels, fill);
        for y in 0..self.height {
            let sy = y as isize - dy;
            if sy < 0 || sy >= self.height as isize {
                continue;
            }
            for x in 0..self.width {
                let sx = x as isize - dx;
                if sx < 0 || sx >= self.width as isize {
                    continue;
                }
                let i = (y * self.width + x) * self.channels;
                out.data[i..i + self.channels].copy_from_slice(self.pixel(sy as usize, sx as usize));
            }
        }
        out
    }

    /// Stack images into an `[N,H,W,C]` tensor.
    pub fn batch(images: &[&Image]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Data("cannot batch zero images".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            if (im.height, im.width, im.channels) != (first.height, first.width, first.channels) {
                return Err(Error::Shape("images in a batch must share one size".into()));
            }
            data.extend_from_slice(&im.data);
        }
        Tensor::new(&[images.len(), first.height, first.width, first.channels], data)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        let (channels, raw, w, h) = match img.color().channel_count() {
            1 | 2 => {
                let g = img.to_luma8();
                (1, g.as_raw().clone(), g.width(), g.height())
            }
            _ => {
                let g = img.to_rgb8();
                (3, g.as_raw().clone(), g.width(), g.height())
            }
        };
        let data = raw.iter().map(|&b| b as f64 / 255.0).collect();
        Self::new(h as usize, w as usize, channels, data)
    }

    fn png_parts(&self) -> Result<(Vec<u8>, image::ExtendedColorType)> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => return Err(Error::Shape(format!("cannot save {c}-channel image as PNG"))),
        };
        Ok((bytes, color))
    }

    /// Write as 8-bit PNG, clamping to `[0, 1]`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (bytes, color) = self.png_parts()?;
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, color)?;
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        use image::ImageEncoder;
        let (bytes, color) = self.png_parts()?;
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out).write_image(&bytes, self.width as u32, self.height as u32, color)?;
        Ok(out)
    }

    /// Scale to `[0, 1]` by the maximum (nonnegative maps only).
    pub fn max_normalized(&self) -> Self {
        let m = self.max();
        if m > 0.0 {
            Self {
                data: self.data.iter().map(|v| v / m).collect(),
                ..self.clone()
            }
        } else {
            self.clone()
        }
    }
}

/// Normalized 1-D Gaussian of odd length `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with a `size x size` kernel and `sigma = size / 7`,
/// zero beyond the borders. `size` must be odd; 1 is the identity.
pub fn gaussian_blur(img: &Image, size: usize) -> Result<Image> {
    if size % 2 == 0 {
        return Err(Error::Config(format!("blur kernel must be odd, got {size}")));
    }
    if size == 1 {
        return Ok(img.clone());
    }
    let k = gaussian_kernel(size, size as f64 / 7.0);
    let r = (size / 2) as isize;
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut tmp = vec![0.0; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            for (ki, &kv) in k.iter().enumerate() {
                let sx = x as isize + ki as isize - r;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                for ch in 0..c {
                    tmp[(y * w + x) * c + ch] += kv * img.data[(y * w + sx as usize) * c + ch];
                }
            }
        }
    }
    let mut out = vec![0.0; img.data.len()];
    for y in 0..h {
        for (ki, &kv) in k.iter().enumerate() {
            let sy = y as isize + ki as isize - r;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            let src = &tmp[sy as usize * w * c..][..w * c];
            for (o, &v) in out[y * w * c..][..w * c].iter_mut().zip(src) {
                *o += kv * v;
            }
        }
    }
    Image::new(h, w, c, out)
}

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

fn linear_weight(t: f64) -> f64 {
    (1.0 - t.abs()).max(0.0)
}

/// Resampling taps along one axis: `(source index, weight)` per output index.
/// Half-pixel centers, edge-clamped, no antialiasing.
fn taps(src: usize, dst: usize, mode: ResizeMode) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = (o as f64 + 0.5) * scale - 0.5;
            let base = pos.floor() as isize;
            let (lo, hi, kernel): (isize, isize, fn(f64) -> f64) = match mode {
                ResizeMode::Bicubic => (-1, 2, cubic_weight),
                ResizeMode::Bilinear => (0, 1, linear_weight),
            };
            (lo..=hi)
                .map(|d| {
                    let i = base + d;
                    let w = kernel(pos - i as f64);
                    (i.clamp(0, src as isize - 1) as usize, w)
                })
                .collect()
        })
        .collect()
}

pub fn resize(img: &Image, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Image> {
    if out_h == 0 || out_w == 0 || img.height == 0 || img.width == 0 {
        return Err(Error::Shape("resize to or from an empty image".into()));
    }
    if (out_h, out_w) == (img.height, img.width) {
        return Ok(img.clone());
    }
    let c = img.channels;
    let ty = taps(img.height, out_h, mode);
    let tx = taps(img.width, out_w, mode);
    // rows first: H x out_w
    let mut tmp = vec![0.0; img.height * out_w * c];
    for y in 0..img.height {
        for (ox, row) in tx.iter().enumerate() {
            for &(sx, w) in row {
                for ch in 0..c {
                    tmp[(y * out_w + ox) * c + ch] += w * img.at(y, sx, ch);
                }
            }
        }
    }
    let mut out = vec![0.0; out_h * out_w * c];
    for (oy, col) in ty.iter().enumerate() {
        for &(sy, w) in col {
            let src = &tmp[sy * out_w * c..][..out_w * c];
            for (o, &v) in out[oy * out_w * c..][..out_w * c].iter_mut().zip(src) {
                *o += w * v;
            }
        }
    }
    Image::new(out_h, out_w, c, out)
}

/// Random-crop-with-padding plus optional horizontal flip, applied identically
/// to an image and its map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augment {
    pub dy: isize,
    pub dx: isize,
    pub flip: bool,
}

impl Augment {
    pub const IDENTITY: Augment = Augment {
        dy: 0,
        dx: 0,
        flip: false,
    };

    /// Draw an offset in `[-pad, pad]` on each axis and a fair coin for the flip.
    pub fn sample(pad: usize, flip: bool, rng: &mut impl rand::Rng) -> Self {
        let p = pad as i64;
        Self {
            dy: rng.random_range(-p..=p) as isize,
            dx: rng.random_range(-p..=p) as isize,
            flip: flip && rng.random_bool(0.5),
        }
    }

    /// Zero-padded crop is a translation of the content by `(dy, dx)`.
    pub fn apply(&self, img: &Image) -> Image {
        let moved = if self.dy == 0 && self.dx == 0 {
            img.clone()
        } else {
            img.shifted(self.dy, self.dx, 0.0)
        };
        if self.flip {
            moved.flip_horizontal()
        } else {
            moved
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn blur_conserves_interior_mass_and_is_symmetric() {
        let mut img = Image::zeros(21, 21, 1);
        *img.at_mut(10, 10, 0) = 1.0;
        let b = gaussian_blur(&img, 7).unwrap();
        let total: f64 = b.data.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((b.at(9, 10, 0) - b.at(11, 10, 0)).abs() < 1e-15);
        assert!((b.at(10, 9, 0) - b.at(10, 11, 0)).abs() < 1e-15);
        assert_eq!(b.max(), b.at(10, 10, 0));
        assert!(gaussian_blur(&img, 4).is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = Image::filled(5, 7, 2, 0.3);
        let r = resize(&img, 3, 9, ResizeMode::Bicubic).unwrap();
        assert!(r.data.iter().all(|v| (v - 0.3).abs() < 1e-12));
        assert_eq!(resize(&img, 5, 7, ResizeMode::Bilinear).unwrap(), img);
    }

    #[test]
    fn bilinear_midpoints() {
        let img = Image::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let r = resize(&img, 1, 4, ResizeMode::Bilinear).unwrap();
        assert_eq!(r.data, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn augment_matches_on_image_and_map() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let coords = Image::new(
            4,
            4,
            2,
            (0..16).flat_map(|i| [(i / 4) as f64, (i % 4) as f64]).collect(),
        )
        .unwrap();
        for _ in 0..20 {
            let a = Augment::sample(1, true, &mut rng);
            let moved = a.apply(&coords);
            let y_only = Image::new(4, 4, 1, coords.data.iter().step_by(2).cloned().collect()).unwrap();
            let y_moved = a.apply(&y_only);
            for p in 0..16 {
                assert_eq!(moved.data[2 * p], y_moved.data[p]);
            }
        }
    }

    #[test]
    fn png_roundtrip_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = Image::new(2, 2, 3, (0..12).map(|i| i as f64 / 11.0).collect()).unwrap();
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back.channels, 3);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
