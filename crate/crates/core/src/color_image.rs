//! Dense RGB image with f64 channels in [0, 1], row-major.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, 3 channels per pixel.
    data: Vec<f64>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize) -> Self {
        ColorImage {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for p in 0..width * height {
            img.data[p * 3..p * 3 + 3].copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::DimensionMismatch(format!(
                "color image buffer: expected {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(ColorImage {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn same_size(&self, other: &ColorImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Scalar luminance image (ITU-R BT.601 weights).
    pub fn luminance(&self) -> Vec<f64> {
        (0..self.pixel_count())
            .map(|p| {
                let i = p * 3;
                0.299 * self.data[i] + 0.587 * self.data[i + 1] + 0.114 * self.data[i + 2]
            })
            .collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let c = self.get(x, y);
                let to8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                buf.put_pixel(x as u32, y as u32, image::Rgb([to8(c[0]), to8(c[1]), to8(c[2])]));
            }
        }
        buf.save(path).map_err(|e| Error::Image(e.to_string()))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = ColorImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x as u32, y as u32);
                out.set(
                    x,
                    y,
                    [
                        p.0[0] as f64 / 255.0,
                        p.0[1] as f64 / 255.0,
                        p.0[2] as f64 / 255.0,
                    ],
                );
            }
        }
        Ok(out)
    }
}
