use std::path::Path;

use image::DynamicImage;

use crate::error::{Error, Result};

/// Row-major luminance image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width * height != data.len() {
            return Err(Error::DimMismatch {
                expected: width * height,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::invalid("pixel values must be finite and in [0, 1]"));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value.clamp(0.0, 1.0); width * height],
        }
    }

    /// Builds an image from any values, clamping them into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let v = f(x, y);
                data.push(if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Bilinear resize using pixel-center alignment.
    pub fn resize(&self, new_w: usize, new_h: usize) -> GrayImage {
        if new_w == self.width && new_h == self.height {
            return self.clone();
        }
        self.resample_region(0.0, 0.0, self.width as f64, self.height as f64, new_w, new_h)
    }

    /// Bilinearly samples the axis-aligned region `[x0, x0+w) x [y0, y0+h)`
    /// (in source pixel units) onto an `out_w x out_h` grid.
    pub fn resample_region(
        &self,
        x0: f64,
        y0: f64,
        w: f64,
        h: f64,
        out_w: usize,
        out_h: usize,
    ) -> GrayImage {
        let mut data = Vec::with_capacity(out_w * out_h);
        if self.is_empty() {
            return GrayImage::filled(out_w, out_h, 0.0);
        }
        let sx = w / out_w as f64;
        let sy = h / out_h as f64;
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        for oy in 0..out_h {
            let fy = (y0 + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
            let y_lo = fy.floor() as usize;
            let y_hi = (y_lo + 1).min(self.height - 1);
            let ty = fy - y_lo as f64;
            for ox in 0..out_w {
                let fx = (x0 + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
                let x_lo = fx.floor() as usize;
                let x_hi = (x_lo + 1).min(self.width - 1);
                let tx = fx - x_lo as f64;
                let top = lerp(self.get(x_lo, y_lo), self.get(x_hi, y_lo), tx);
                let bottom = lerp(self.get(x_lo, y_hi), self.get(x_hi, y_hi), tx);
                data.push(lerp(top, bottom, ty).clamp(0.0, 1.0));
            }
        }
        GrayImage {
            width: out_w,
            height: out_h,
            data,
        }
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        let bytes = self.data.iter().map(|v| (v * 255.0).round() as u8).collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }
}

// a + (b - a) t keeps constant inputs exactly constant
#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Loads a PNG or PGM file as luminance. Color inputs are reduced to the
/// average of their RGB channels.
pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(from_dynamic(&img))
}

pub fn from_dynamic(img: &DynamicImage) -> GrayImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(g) => g.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(g) => g.as_raw().iter().map(|&v| v as f64 / 65535.0).collect(),
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLumaA16(_) => {
            img.to_luma16().as_raw().iter().map(|&v| v as f64 / 65535.0).collect()
        }
        _ => img
            .to_rgb8()
            .pixels()
            .map(|p| (p[0] as f64 + p[1] as f64 + p[2] as f64) / (3.0 * 255.0))
            .collect(),
    };
    GrayImage {
        width: w,
        height: h,
        data,
    }
}

/// Writes the image as 8-bit grayscale; the format follows the extension
/// (`.png` or `.pgm`).
pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    img.to_luma8().save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}
