use serde::{Deserialize, Serialize};

use super::image::GrayImage;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PyramidConfig {
    pub num_scales: usize,
    /// Per-level rescale multiplier; level `i` is scaled by `factor^i`.
    pub factor: f64,
    pub patch_size: usize,
    pub stride: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            num_scales: 6,
            factor: std::f64::consts::FRAC_1_SQRT_2,
            patch_size: 16,
            stride: 3,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_scales == 0 {
            return Err(Error::invalid("pyramid needs at least one scale"));
        }
        if !(self.factor > 0.0 && self.factor <= 1.0) {
            return Err(Error::invalid("pyramid factor must lie in (0, 1]"));
        }
        if self.stride == 0 || self.patch_size == 0 {
            return Err(Error::invalid("patch size and stride must be positive"));
        }
        Ok(())
    }

    /// Dimensions of level `i` for a `w x h` input.
    pub fn level_size(&self, w: usize, h: usize, i: usize) -> (usize, usize) {
        let s = self.factor.powi(i as i32);
        ((w as f64 * s).round() as usize, (h as f64 * s).round() as usize)
    }
}

/// Builds the scale pyramid. Level 0 is the input itself; levels whose
/// shorter side falls below `patch_size` are dropped, so list position and
/// scale index coincide.
pub fn build_pyramid(img: &GrayImage, cfg: &PyramidConfig) -> Vec<GrayImage> {
    let mut levels = Vec::with_capacity(cfg.num_scales);
    if img.is_empty() {
        return levels;
    }
    for i in 0..cfg.num_scales {
        let (w, h) = cfg.level_size(img.width(), img.height(), i);
        if w < cfg.patch_size || h < cfg.patch_size || w == 0 || h == 0 {
            break;
        }
        levels.push(if i == 0 { img.clone() } else { img.resize(w, h) });
    }
    levels
}
