//! Hierarchical composition of learned layers.
//!
//! Layer 1 filters normalized pixel patches. Every higher layer sees a
//! larger receptive field: it concatenates a `g x g` grid of lower-layer
//! feature vectors, projects the result with PCA, normalizes it and
//! applies its own filter bank. Features are `|W x|` with the full bank;
//! the per-class selections only matter during training.

pub mod io;
pub mod train;

use std::collections::HashMap;

use crate::dataio::{build_pyramid, crop, normalize_values, GrayImage, PyramidConfig};
use crate::dsfl::{FilterBank, SelectionMask};
use crate::encode::{Codebook, CodingParams};
use crate::error::{Error, Result};
use crate::mathkit::{Matrix, PcaModel};
use crate::svmlite::OvrModel;

pub use io::{
    load_model, load_patch_store, read_feature_blocks, save_model, save_patch_store, write_feature_blocks, FeatureBlock,
};
pub use train::{
    build_codebooks, collect_layer_pool, derive_seed, fit_classifier, layer_features, select_exemplars, train_deep,
    train_deep_images, train_stack, LayerPool, LayerReport, TrainImages,
};

/// Where a layer looks, in pixels of the scaled image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerGeometry {
    pub receptive_field: usize,
    /// Side of the grid of lower-layer positions; 1 for the first layer.
    pub grid: usize,
    /// Offset between neighboring grid cells; 0 for the first layer.
    pub step: usize,
    pub num_scales: usize,
    pub stride: usize,
}

impl LayerGeometry {
    pub fn first(patch_size: usize, num_scales: usize, stride: usize) -> Self {
        Self {
            receptive_field: patch_size,
            grid: 1,
            step: 0,
            num_scales,
            stride,
        }
    }

    /// A layer on top of `lower`: cells half a lower receptive field apart.
    pub fn above(lower: &LayerGeometry, grid: usize, num_scales: usize, stride: usize) -> Self {
        let step = (lower.receptive_field / 2).max(1);
        Self {
            receptive_field: lower.receptive_field + (grid - 1) * step,
            grid,
            step,
            num_scales,
            stride,
        }
    }

    /// Anchors on a `width x height` level, row-major.
    pub fn anchors(&self, width: usize, height: usize) -> Vec<(usize, usize)> {
        crate::dataio::grid_positions(width, height, self.receptive_field, self.stride)
    }

    /// Lower-layer positions feeding the input at `(x, y)`, grid rows outer.
    pub fn cells(&self, x: usize, y: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.grid).flat_map(move |gy| (0..self.grid).map(move |gx| (x + gx * self.step, y + gy * self.step)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerModel {
    pub geometry: LayerGeometry,
    pub bank: FilterBank,
    /// Training selections, kept for inspection.
    pub masks: Vec<SelectionMask>,
    /// Projection of the aggregated input; absent on the first layer.
    pub pca: Option<PcaModel>,
}

impl LayerModel {
    pub fn num_filters(&self) -> usize {
        self.bank.num_filters()
    }

    /// Width of the vector this layer consumes before any projection.
    pub fn raw_input_dim(&self, lower: Option<&LayerModel>) -> usize {
        match lower {
            None => self.geometry.receptive_field * self.geometry.receptive_field,
            Some(l) => self.geometry.grid * self.geometry.grid * l.num_filters(),
        }
    }

    /// Applies the projection and normalization to raw inputs.
    pub fn finish_inputs(&self, raw: Matrix) -> Result<Matrix> {
        finish_inputs(self.pca.as_ref(), raw)
    }
}

pub(crate) fn finish_inputs(pca: Option<&PcaModel>, raw: Matrix) -> Result<Matrix> {
    let Some(pca) = pca else { return Ok(raw) };
    let mut out = Matrix::zeros(raw.rows(), pca.output_dim());
    for (i, r) in raw.iter_rows().enumerate() {
        let mut y = pca.transform(r)?;
        normalize_values(&mut y);
        out.row_mut(i).copy_from_slice(&y);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepModel {
    pub layers: Vec<LayerModel>,
    pub pyramid_factor: f64,
    /// One per layer once built; empty before.
    pub codebooks: Vec<Codebook>,
    pub encoding: CodingParams,
    pub classifier: Option<OvrModel>,
}

impl DeepModel {
    /// Checks that every dimension lines up.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(crate::error::FormatError::Inconsistent(m).into());
        if self.layers.is_empty() {
            return bad("model has no layers".into());
        }
        if !(self.pyramid_factor > 0.0 && self.pyramid_factor <= 1.0) {
            return bad(format!("pyramid factor {}", self.pyramid_factor));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let g = layer.geometry;
            if g.num_scales == 0 || g.stride == 0 || g.receptive_field == 0 || g.grid == 0 {
                return bad(format!("layer {}: degenerate geometry", l + 1));
            }
            let lower = l.checked_sub(1).map(|i| &self.layers[i]);
            let raw = layer.raw_input_dim(lower);
            match (lower, &layer.pca) {
                (None, None) => {
                    if g.grid != 1 || layer.bank.input_dim() != raw {
                        return bad("layer 1: filters do not match the patch size".into());
                    }
                }
                (Some(lo), Some(pca)) => {
                    if LayerGeometry::above(&lo.geometry, g.grid, g.num_scales, g.stride) != g {
                        return bad(format!("layer {}: receptive field does not follow the layer below", l + 1));
                    }
                    if pca.input_dim() != raw || pca.output_dim() != layer.bank.input_dim() {
                        return bad(format!("layer {}: projection dimensions disagree", l + 1));
                    }
                }
                _ => return bad(format!("layer {}: projection present only above the first layer", l + 1)),
            }
            if layer.masks.iter().any(|m| m.alpha.len() != layer.num_filters()) {
                return bad(format!("layer {}: mask length differs from filter count", l + 1));
            }
        }
        if !self.codebooks.is_empty() {
            if self.codebooks.len() != self.layers.len() {
                return bad("codebook count differs from layer count".into());
            }
            for (l, (cb, layer)) in self.codebooks.iter().zip(&self.layers).enumerate() {
                if cb.dim() != layer.num_filters() || cb.size() < self.encoding.knn {
                    return bad(format!("codebook {} does not fit its layer", l + 1));
                }
            }
        }
        if let Some(c) = &self.classifier {
            if self.codebooks.is_empty() {
                return bad("classifier without codebooks".into());
            }
            if c.dim() != crate::encode::descriptor_len(self) {
                return bad("classifier dimension differs from descriptor length".into());
            }
        }
        Ok(())
    }

    /// Largest pyramid depth any layer uses.
    pub fn max_scales(&self) -> usize {
        self.layers.iter().map(|l| l.geometry.num_scales).max().unwrap_or(1)
    }

    /// Scale levels shared by every layer.
    pub fn pyramid(&self, img: &GrayImage) -> Vec<GrayImage> {
        pyramid_levels(img, self.pyramid_factor, self.layers[0].geometry.receptive_field, self.max_scales())
    }
}

pub(crate) fn pyramid_levels(img: &GrayImage, factor: f64, patch_size: usize, scales: usize) -> Vec<GrayImage> {
    build_pyramid(
        img,
        &PyramidConfig {
            num_scales: scales,
            factor,
            patch_size,
            stride: 1,
        },
    )
}

/// Concatenates, for every anchor, the lower-layer vectors on its `g x g`
/// grid (grid rows outer, columns inner). Each output row is a fresh copy.
pub fn aggregate_receptive_field(
    lower_positions: &[(usize, usize)],
    lower_features: &Matrix,
    anchors: &[(usize, usize)],
    grid: usize,
    step: usize,
) -> Result<Matrix> {
    if lower_positions.len() != lower_features.rows() {
        return Err(Error::DimMismatch {
            expected: lower_features.rows(),
            got: lower_positions.len(),
        });
    }
    let index: HashMap<(usize, usize), usize> = lower_positions.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    let d = lower_features.cols();
    let mut out = Matrix::zeros(anchors.len(), grid * grid * d);
    for (r, &(x, y)) in anchors.iter().enumerate() {
        let row = out.row_mut(r);
        for gy in 0..grid {
            for gx in 0..grid {
                let p = (x + gx * step, y + gy * step);
                let &i = index
                    .get(&p)
                    .ok_or_else(|| Error::invalid(format!("no lower-layer feature at {p:?}")))?;
                let k = (gy * grid + gx) * d;
                row[k..k + d].copy_from_slice(lower_features.row(i));
            }
        }
    }
    Ok(out)
}

/// Inputs of a layer with geometry `geom` sitting on `lower`, before its own
/// projection: normalized crops when `lower` is empty, aggregated lower
/// features otherwise.
pub fn raw_inputs(
    level: &GrayImage,
    lower: &[LayerModel],
    geom: &LayerGeometry,
    positions: &[(usize, usize)],
) -> Result<Matrix> {
    if lower.is_empty() {
        let s = geom.receptive_field;
        let mut out = Matrix::zeros(positions.len(), s * s);
        for (r, &(x, y)) in positions.iter().enumerate() {
            if x + s > level.width() || y + s > level.height() {
                return Err(Error::invalid(format!("patch at ({x}, {y}) leaves the image")));
            }
            let mut v = crop(level, x, y, s);
            normalize_values(&mut v);
            out.row_mut(r).copy_from_slice(&v);
        }
        return Ok(out);
    }
    let mut needed: Vec<(usize, usize)> = positions.iter().flat_map(|&(x, y)| geom.cells(x, y)).collect();
    needed.sort_unstable_by_key(|&(x, y)| (y, x));
    needed.dedup();
    let feats = responses(level, lower, &needed)?;
    aggregate_receptive_field(&needed, &feats, positions, geom.grid, geom.step)
}

/// `|W x|` of the top layer of `stack` at `positions` of one level.
pub fn responses(level: &GrayImage, stack: &[LayerModel], positions: &[(usize, usize)]) -> Result<Matrix> {
    let (top, lower) = stack.split_last().ok_or_else(|| Error::invalid("empty layer stack"))?;
    let raw = raw_inputs(level, lower, &top.geometry, positions)?;
    top.bank.transform_rows(&top.finish_inputs(raw)?)
}

/// Features of one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleFeatures {
    pub scale_idx: usize,
    pub width: usize,
    pub height: usize,
    /// Top-left corners in the scaled image, one per feature row.
    pub positions: Vec<(usize, usize)>,
    pub features: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub layer_idx: usize,
    pub receptive_field: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub scales: Vec<ScaleFeatures>,
}

impl FeatureMap {
    pub fn len(&self) -> usize {
        self.scales.iter().map(|s| s.positions.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All feature rows and their centers in original-image coordinates.
    pub fn stacked(&self) -> (Matrix, Vec<(f64, f64)>) {
        let dim = self.scales.first().map_or(0, |s| s.features.cols());
        let mut feats = Matrix::zeros(0, dim);
        let mut centers = Vec::with_capacity(self.len());
        let half = self.receptive_field as f64 / 2.0;
        for s in &self.scales {
            let sx = self.image_width as f64 / s.width as f64;
            let sy = self.image_height as f64 / s.height as f64;
            for (i, &(x, y)) in s.positions.iter().enumerate() {
                feats.push_row(s.features.row(i)).expect("same width");
                centers.push(((x as f64 + half) * sx, (y as f64 + half) * sy));
            }
        }
        (feats, centers)
    }
}

/// Dense features of layer `l` (0-based) over the layer's scales.
/// Levels too small for one receptive field are skipped.
pub fn extract_features(img: &GrayImage, model: &DeepModel, l: usize) -> Result<FeatureMap> {
    let layer = model
        .layers
        .get(l)
        .ok_or_else(|| Error::invalid(format!("model has no layer {}", l + 1)))?;
    let levels = model.pyramid(img);
    let g = layer.geometry;
    let mut scales = Vec::new();
    for (scale_idx, level) in levels.iter().enumerate().take(g.num_scales) {
        let positions = g.anchors(level.width(), level.height());
        if positions.is_empty() {
            continue;
        }
        let features = responses(level, &model.layers[..=l], &positions)?;
        scales.push(ScaleFeatures {
            scale_idx,
            width: level.width(),
            height: level.height(),
            positions,
            features,
        });
    }
    Ok(FeatureMap {
        layer_idx: l,
        receptive_field: g.receptive_field,
        image_width: img.width(),
        image_height: img.height(),
        scales,
    })
}
