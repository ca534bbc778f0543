use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::GrayImage;
use crate::mathkit::Matrix;

/// Provenance of a patch: source image, its label, pyramid level and the
/// top-left corner inside that level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PatchOrigin {
    pub image_id: usize,
    pub class_id: usize,
    pub scale_idx: usize,
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub values: Vec<f64>,
    pub origin: PatchOrigin,
}

/// Dense grid of square patches, row-major vectorized. Positions are
/// `{0, stride, 2 stride, ...}` with the patch fully inside the image.
pub fn extract_patches(img: &GrayImage, patch_size: usize, stride: usize) -> Vec<Patch> {
    grid_positions(img.width(), img.height(), patch_size, stride)
        .into_iter()
        .map(|(x, y)| Patch {
            values: crop(img, x, y, patch_size),
            origin: PatchOrigin {
                x,
                y,
                size: patch_size,
                ..Default::default()
            },
        })
        .collect()
}

pub fn grid_positions(width: usize, height: usize, size: usize, stride: usize) -> Vec<(usize, usize)> {
    if size == 0 || stride == 0 || size > width || size > height {
        return Vec::new();
    }
    let mut out = Vec::new();
    for y in (0..=height - size).step_by(stride) {
        for x in (0..=width - size).step_by(stride) {
            out.push((x, y));
        }
    }
    out
}

pub fn crop(img: &GrayImage, x: usize, y: usize, size: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(size * size);
    for row in y..y + size {
        let start = row * img.width() + x;
        v.extend_from_slice(&img.data()[start..start + size]);
    }
    v
}

/// Mean-subtracts and scales to unit L2 norm; near-constant input becomes
/// the zero vector.
pub fn normalize_values(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter_mut().for_each(|v| *v -= mean);
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-8 {
        values.iter_mut().for_each(|v| *v = 0.0);
    } else {
        values.iter_mut().for_each(|v| *v /= norm);
    }
}

pub fn normalize_patch(p: &Patch) -> Patch {
    let mut out = p.clone();
    normalize_values(&mut out.values);
    out
}

/// Samples `count` neighbors of `p` from `img` (the pyramid level `p` was
/// cut from). Each neighbor is a square of side `s/2`, `s` or `2s`, placed
/// uniformly inside the `2s` window centered on `p` (clipped to the image),
/// bilinearly resized to `s x s` and normalized.
pub fn sample_spatial_neighbors(img: &GrayImage, p: &Patch, count: usize, seed: u64) -> Vec<Patch> {
    let s = p.origin.size;
    let (w, h) = (img.width(), img.height());
    let cx = p.origin.x + s / 2;
    let cy = p.origin.y + s / 2;
    let x0 = cx.saturating_sub(s);
    let y0 = cy.saturating_sub(s);
    let x1 = (cx + s).min(w);
    let y1 = (cy + s).min(h);
    let win_w = x1.saturating_sub(x0);
    let win_h = y1.saturating_sub(y0);
    if s < 2 || win_w < s || win_h < s || p.origin.x + s > w || p.origin.y + s > h {
        return vec![p.clone(); count];
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let choices = [s / 2, s, 2 * s];
    (0..count)
        .map(|_| {
            let side = choices[rng.random_range(0..choices.len())].min(win_w).min(win_h).max(1);
            let ox = x0 + rng.random_range(0..=win_w - side);
            let oy = y0 + rng.random_range(0..=win_h - side);
            let region = img.resample_region(ox as f64, oy as f64, side as f64, side as f64, s, s);
            let mut values = region.data().to_vec();
            normalize_values(&mut values);
            Patch {
                values,
                origin: PatchOrigin {
                    x: ox,
                    y: oy,
                    size: side,
                    ..p.origin
                },
            }
        })
        .collect()
}

/// Uniformly keeps at most `budget` items, preserving their original order.
pub fn subsample_indices(n: usize, budget: usize, rng: &mut impl Rng) -> Vec<usize> {
    if n <= budget {
        return (0..n).collect();
    }
    let mut idx = sample(rng, n, budget).into_vec();
    idx.sort_unstable();
    idx
}

/// Patch vectors stacked as matrix rows with their provenance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PatchStore {
    pub values: Matrix,
    pub origins: Vec<PatchOrigin>,
}

impl PatchStore {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.origins.iter().map(|o| o.class_id).collect()
    }

    pub fn push(&mut self, p: Patch) {
        self.values
            .push_row(&p.values)
            .expect("patches in one store share a dimension");
        self.origins.push(p.origin);
    }
}
