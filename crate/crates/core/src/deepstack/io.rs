//! Model files and feature-map export.

use std::path::Path;

use super::{DeepModel, LayerGeometry, LayerModel};
use crate::dataio::{PatchOrigin, PatchStore};
use crate::dsfl::{FilterBank, SelectionMask};
use crate::encode::{Codebook, CodingParams};
use crate::error::{Error, FormatError, Result};
use crate::mathkit::{Matrix, PcaModel};
use crate::persist::{read_file, write_atomic, Reader, Writer};
use crate::svmlite::{LinearSvmModel, OvrModel};

pub const MODEL_KIND: &str = "model";

/// Serializes a model. Matrices are stored as `f32`; models produced by
/// training already hold `f32`-representable values, so a load returns an
/// identical model.
pub fn model_to_bytes(model: &DeepModel) -> Vec<u8> {
    let mut w = Writer::new(MODEL_KIND);
    w.f64(model.pyramid_factor);
    w.usize(model.layers.len());
    for layer in &model.layers {
        let g = layer.geometry;
        for v in [g.receptive_field, g.grid, g.step, g.num_scales, g.stride] {
            w.usize(v);
        }
        w.matrix_f32(&layer.bank.w);
        w.usize(layer.masks.len());
        for m in &layer.masks {
            w.usize(m.alpha.len());
            m.alpha.iter().for_each(|&a| w.bool(a));
        }
        w.bool(layer.pca.is_some());
        if let Some(p) = &layer.pca {
            w.vec_f32(&p.mean);
            w.matrix_f32(&p.components);
        }
    }
    w.usize(model.encoding.knn);
    w.f64(model.encoding.beta);
    w.bool(model.encoding.signed_pooling);
    w.usize(model.codebooks.len());
    for cb in &model.codebooks {
        w.matrix_f32(&cb.centers);
    }
    w.bool(model.classifier.is_some());
    if let Some(c) = &model.classifier {
        w.usize(c.models.len());
        for m in &c.models {
            w.vec_f32(&m.w);
            w.f64(m.b);
            w.f64(m.lambda_reg);
        }
    }
    w.into_bytes()
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<DeepModel> {
    let mut r = Reader::new(bytes, MODEL_KIND)?;
    let pyramid_factor = r.f64("pyramid factor")?;
    let num_layers = r.usize("layer count")?;
    let mut layers = Vec::with_capacity(num_layers.min(64));
    for l in 0..num_layers {
        let mut g = [0usize; 5];
        for v in &mut g {
            *v = r.usize("layer geometry")?;
        }
        let geometry = LayerGeometry {
            receptive_field: g[0],
            grid: g[1],
            step: g[2],
            num_scales: g[3],
            stride: g[4],
        };
        let bank = FilterBank::new(r.matrix_f32("filter bank")?, l)
            .map_err(|e| FormatError::Inconsistent(format!("layer {}: {e}", l + 1)))?;
        let num_masks = r.usize("mask count")?;
        let mut masks = Vec::with_capacity(num_masks.min(4096));
        for _ in 0..num_masks {
            let n = r.usize("mask length")?;
            let alpha = (0..n).map(|_| r.bool("mask")).collect::<Result<Vec<_>>>()?;
            masks.push(SelectionMask { alpha });
        }
        let pca = if r.bool("projection flag")? {
            Some(PcaModel {
                mean: r.vec_f32("projection mean")?,
                components: r.matrix_f32("projection")?,
            })
        } else {
            None
        };
        layers.push(LayerModel {
            geometry,
            bank,
            masks,
            pca,
        });
    }
    let encoding = CodingParams {
        knn: r.usize("knn")?,
        beta: r.f64("beta")?,
        signed_pooling: r.bool("pooling flag")?,
    };
    let num_cb = r.usize("codebook count")?;
    let mut codebooks = Vec::with_capacity(num_cb.min(64));
    for layer_idx in 0..num_cb {
        codebooks.push(Codebook {
            centers: r.matrix_f32("codebook")?,
            layer_idx,
        });
    }
    let classifier = if r.bool("classifier flag")? {
        let c = r.usize("class count")?;
        let mut models = Vec::with_capacity(c.min(4096));
        for _ in 0..c {
            models.push(LinearSvmModel {
                w: r.vec_f32("classifier weights")?,
                b: r.f64("classifier bias")?,
                lambda_reg: r.f64("classifier lambda")?,
            });
        }
        Some(OvrModel { models })
    } else {
        None
    };
    r.finish()?;
    let model = DeepModel {
        layers,
        pyramid_factor,
        codebooks,
        encoding,
        classifier,
    };
    model.validate()?;
    Ok(model)
}

pub fn save_model(model: &DeepModel, path: &Path) -> Result<()> {
    model.validate()?;
    write_atomic(path, &model_to_bytes(model))
}

pub fn load_model(path: &Path) -> Result<DeepModel> {
    model_from_bytes(&read_file(path)?)
}

/// One exported matrix of features: every row is a position of one scale
/// of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock {
    pub image: String,
    pub scale: usize,
    pub features: Matrix,
}

/// Encodes blocks as `image<TAB>scale<TAB>rows<TAB>cols\n` followed by
/// `rows * cols` little-endian `f32` values.
pub fn feature_blocks_to_bytes(blocks: &[FeatureBlock]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for b in blocks {
        if b.image.contains(['\t', '\n']) {
            return Err(Error::invalid(format!("image name {:?} contains a tab or newline", b.image)));
        }
        let header = format!("{}\t{}\t{}\t{}\n", b.image, b.scale, b.features.rows(), b.features.cols());
        out.extend_from_slice(header.as_bytes());
        for &v in b.features.as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn feature_blocks_from_bytes(bytes: &[u8]) -> Result<Vec<FeatureBlock>> {
    let mut blocks = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or(FormatError::Truncated("feature block header"))?;
        let header = std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| FormatError::BadString)?;
        pos += nl + 1;
        let fields: Vec<&str> = header.split('\t').collect();
        let bad = || FormatError::Inconsistent(format!("feature block header {header:?}"));
        if fields.len() != 4 {
            return Err(bad().into());
        }
        let scale: usize = fields[1].parse().map_err(|_| bad())?;
        let rows: usize = fields[2].parse().map_err(|_| bad())?;
        let cols: usize = fields[3].parse().map_err(|_| bad())?;
        let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).ok_or_else(bad)?;
        if bytes.len() - pos < n {
            return Err(FormatError::Truncated("feature block").into());
        }
        let data = bytes[pos..pos + n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        pos += n;
        blocks.push(FeatureBlock {
            image: fields[0].to_string(),
            scale,
            features: Matrix::from_vec(rows, cols, data)?,
        });
    }
    Ok(blocks)
}

pub fn write_feature_blocks(path: &Path, blocks: &[FeatureBlock]) -> Result<()> {
    write_atomic(path, &feature_blocks_to_bytes(blocks)?)
}

pub fn read_feature_blocks(path: &Path) -> Result<Vec<FeatureBlock>> {
    feature_blocks_from_bytes(&read_file(path)?)
}

pub const PATCHES_KIND: &str = "patches";

/// Serializes a patch pool with values kept at full precision.
pub fn save_patch_store(store: &PatchStore, path: &Path) -> Result<()> {
    let mut w = Writer::new(PATCHES_KIND);
    w.matrix_f64(&store.values);
    w.usize(store.origins.len());
    for o in &store.origins {
        for v in [o.image_id, o.class_id, o.scale_idx, o.x, o.y, o.size] {
            w.usize(v);
        }
    }
    write_atomic(path, &w.into_bytes())
}

pub fn load_patch_store(path: &Path) -> Result<PatchStore> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes, PATCHES_KIND)?;
    let values = r.matrix_f64("patch values")?;
    let n = r.usize("patch count")?;
    if n != values.rows() {
        return Err(FormatError::Inconsistent(format!("{n} origins for {} patches", values.rows())).into());
    }
    let mut origins = Vec::with_capacity(n);
    for _ in 0..n {
        let mut f = [0usize; 6];
        for v in &mut f {
            *v = r.usize("patch origin")?;
        }
        origins.push(PatchOrigin {
            image_id: f[0],
            class_id: f[1],
            scale_idx: f[2],
            x: f[3],
            y: f[4],
            size: f[5],
        });
    }
    r.finish()?;
    Ok(PatchStore { values, origins })
}
