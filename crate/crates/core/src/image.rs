//! RGB images with `f64` channels in `[0, 1]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `H x W x 3` image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::with_channels(height, width, 3, data)
    }

    /// Builds an image from interleaved data with an explicit channel count;
    /// anything other than 3 channels is rejected.
    pub fn with_channels(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {channels}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// Channel-planar copy (`3 x H x W`), the layout the convolutional
    /// encoder consumes.
    pub fn to_planar(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for (i, px) in self.data.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = px[c];
            }
        }
        out
    }

    /// ITU-R BT.601 luma.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub fn clamp01(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Bilinear resampling with pixel-centre alignment.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("resize target {height}x{width}")));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let taps = |o: usize, scale: f64, limit: usize| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(limit - 1);
            let i1 = (i0 + 1).min(limit - 1);
            (i0, i1, src - i0 as f64)
        };
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            let (y0, y1, fy) = taps(y, sy, self.height);
            for x in 0..width {
                let (x0, x1, fx) = taps(x, sx, self.width);
                for c in 0..3 {
                    let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
                    let bottom = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
                    data.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        Ok(Self { height, width, data })
    }

    /// Separable Gaussian blur with edge clamping. `sigma <= 0` is a no-op.
    pub fn gaussian_blur(&self, sigma: f64) -> Self {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let sum: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= sum);

        let (h, w) = (self.height as isize, self.width as isize);
        let pass = |src: &Image, horizontal: bool| -> Image {
            Image::from_fn(src.height, src.width, |y, x, c| {
                kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| {
                        let off = i as isize - radius;
                        let (yy, xx) = if horizontal {
                            (y as isize, (x as isize + off).clamp(0, w - 1))
                        } else {
                            ((y as isize + off).clamp(0, h - 1), x as isize)
                        };
                        k * src.get(yy as usize, xx as usize, c)
                    })
                    .sum()
            })
        };
        pass(&pass(self, true), false)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::file(path, e))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        Self::new(h as usize, w as usize, data)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::Shape("image buffer size".into()))?;
        buf.save(path.as_ref()).map_err(|e| Error::file(path.as_ref(), e))
    }
}

/// Resizes so the shorter side equals `target`, keeping the aspect ratio
/// (the longer side is rounded to the nearest pixel).
pub fn resize_shortest_side(image: &Image, target: usize) -> Result<Image> {
    if target == 0 {
        return Err(Error::Shape("shortest-side target must be at least 1".into()));
    }
    let (h, w) = (image.height(), image.width());
    let (nh, nw) = if h <= w {
        (target, ((w as f64) * target as f64 / h as f64).round() as usize)
    } else {
        (((h as f64) * target as f64 / w as f64).round() as usize, target)
    };
    image.resize(nh, nw.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(h: usize, w: usize, target: usize) -> (usize, usize) {
        let out = resize_shortest_side(&Image::filled(h, w, 0.5), target).unwrap();
        (out.height(), out.width())
    }

    #[test]
    fn shortest_side_examples() {
        assert_eq!(dims(1024, 2048, 512), (512, 1024));
        assert_eq!(dims(512, 800, 512), (512, 800));
        assert_eq!(dims(300, 400, 512), (512, 683));
        assert_eq!(dims(400, 300, 512), (683, 512));
        assert!(resize_shortest_side(&Image::filled(4, 4, 0.0), 0).is_err());
    }

    #[test]
    fn resize_preserves_constant_images() {
        let img = Image::filled(7, 5, 0.25).resize(13, 3).unwrap();
        assert!(img.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn rejects_wrong_channel_count() {
        assert!(Image::with_channels(2, 2, 1, vec![0.0; 4]).is_err());
        assert!(Image::new(2, 2, vec![0.0; 11]).is_err());
    }

    #[test]
    fn planar_layout() {
        let img = Image::from_fn(1, 2, |_, x, c| (x * 10 + c) as f64);
        assert_eq!(img.to_planar(), vec![0., 10., 1., 11., 2., 12.]);
    }

    #[test]
    fn png_roundtrip_quantizes_to_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = Image::from_fn(3, 4, |y, x, c| ((y + x + c) % 5) as f64 / 4.0);
        img.save_png(&p).unwrap();
        let back = Image::load(&p).unwrap();
        assert_eq!((back.height(), back.width()), (3, 4));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
