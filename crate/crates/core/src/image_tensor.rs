//! RGB image storage with the handful of pixel operations the pipelines need.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};

/// Row-major RGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("image dimensions must be positive".into()));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                height * width * 3
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Alpha-blends `rgb` over pixel `(y, x)` with coverage `a`.
    #[inline]
    pub fn blend_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3], a: f32) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.data[i + c] = self.data[i + c] * (1.0 - a) + rgb[c] * a;
        }
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self { height: h as usize, width: w as usize, data }
    }

    pub fn to_rgb(&self) -> RgbImage {
        let raw: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        ImageBuffer::<Rgb<u8>, _>::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        Ok(Self::from_rgb(&img))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb().save_with_format(path.as_ref(), image::ImageFormat::Png)?;
        Ok(())
    }

    /// Decodes PNG bytes.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
        Ok(Self::from_rgb(&img))
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb().write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Sub-image `[x0, x0+w) x [y0, y0+h)` in pixels.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Shape(format!(
                "crop {x0},{y0} {w}x{h} outside {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Ok(Self { height: h, width: w, data })
    }

    /// Pastes `tile` with its top-left corner at `(x0, y0)`.
    pub fn paste(&mut self, tile: &ImageTensor, x0: usize, y0: usize) {
        for y in 0..tile.height.min(self.height.saturating_sub(y0)) {
            for x in 0..tile.width.min(self.width.saturating_sub(x0)) {
                self.set_pixel(y0 + y, x0 + x, tile.pixel(y, x));
            }
        }
    }

    /// Bilinear resampling with pixel centres aligned at half-integers.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f32;
            for x in 0..width {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f32;
                let (a, b, c, d) = (self.pixel(y0, x0), self.pixel(y0, x1), self.pixel(y1, x0), self.pixel(y1, x1));
                for ch in 0..3 {
                    let top = a[ch] * (1.0 - tx) + b[ch] * tx;
                    let bot = c[ch] * (1.0 - tx) + d[ch] * tx;
                    data.push(top * (1.0 - ty) + bot * ty);
                }
            }
        }
        Self { height, width, data }
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            for x in 0..width {
                let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64) as usize;
                data.extend_from_slice(&self.pixel(sy.min(self.height - 1), sx.min(self.width - 1)));
            }
        }
        Self { height, width, data }
    }

    /// Resizes so both sides are positive multiples of `multiple`, rounding
    /// each side to the nearest multiple. Returns `self` unchanged when
    /// already aligned.
    pub fn fit_to_multiple(&self, multiple: usize) -> Self {
        let fit = |v: usize| (((v as f64 / multiple as f64).round() as usize).max(1)) * multiple;
        let (h, w) = (fit(self.height), fit(self.width));
        if h == self.height && w == self.width {
            self.clone()
        } else {
            self.resize_bilinear(h, w)
        }
    }

    pub fn mean_abs_diff(&self, other: &Self) -> Option<f64> {
        if self.height != other.height || self.width != other.width {
            return None;
        }
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs() as f64).sum();
        Some(s / self.data.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless_on_8bit_values() {
        let mut img = ImageTensor::filled(4, 6, [0.0, 0.5, 1.0]);
        img.set_pixel(1, 2, [1.0, 0.0, 0.2]);
        let q = ImageTensor::from_rgb(&img.to_rgb());
        let back = ImageTensor::from_png_bytes(&q.to_png_bytes().unwrap()).unwrap();
        assert_eq!(back, q);
    }

    #[test]
    fn crop_and_paste() {
        let mut img = ImageTensor::filled(8, 8, [0.0; 3]);
        img.set_pixel(3, 4, [1.0, 1.0, 1.0]);
        let c = img.crop(4, 3, 2, 2).unwrap();
        assert_eq!(c.pixel(0, 0), [1.0; 3]);
        assert!(img.crop(7, 7, 2, 2).is_err());
        let mut canvas = ImageTensor::filled(8, 8, [0.2; 3]);
        canvas.paste(&c, 6, 6);
        assert_eq!(canvas.pixel(6, 6), [1.0; 3]);
    }

    #[test]
    fn resizes_preserve_constant_images() {
        let img = ImageTensor::filled(5, 7, [0.3, 0.6, 0.9]);
        for r in [img.resize_bilinear(20, 28), img.resize_nearest(20, 28), img.fit_to_multiple(16)] {
            assert!(r.data().chunks(3).all(|p| (p[0] - 0.3).abs() < 1e-6 && (p[2] - 0.9).abs() < 1e-6));
        }
        assert_eq!(img.fit_to_multiple(16).height(), 16);
    }

    #[test]
    fn rejects_bad_buffers() {
        assert!(ImageTensor::new(2, 2, vec![0.0; 11]).is_err());
        assert!(ImageTensor::new(1, 1, vec![f32::NAN, 0.0, 0.0]).is_err());
    }
}
