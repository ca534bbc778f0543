//! Layer-by-layer training of the stack, codebooks and classifier.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{extract_features, finish_inputs, pyramid_levels, raw_inputs, DeepModel, LayerGeometry, LayerModel};
use crate::config::{ExemplarConfig, ExemplarMethod, PipelineConfig};
use crate::dataio::{load_gray, sample_spatial_neighbors, subsample_indices, DatasetManifest, GrayImage, Patch, PatchOrigin, PatchStore, Split};
use crate::dsfl::{init_filter_bank, train_layer, FilterBank, TrainBatch};
use crate::encode::{build_codebook, describe_images, sample_codebook_features, Codebook};
use crate::error::{Error, Result};
use crate::exemplar::{nn_select, split_candidates, svm_select, ExemplarSet};
use crate::mathkit::{pca_fit, Matrix};
use crate::svmlite::{train_ovr, OvrModel};

// independent random streams
const STREAM_PATCHES: u64 = 1;
const STREAM_PCA: u64 = 2;
const STREAM_EXEMPLARS: u64 = 3;
const STREAM_UNLABELED: u64 = 4;
const STREAM_NEIGHBORS: u64 = 5;
const STREAM_INIT: u64 = 6;
const STREAM_CODEBOOK_SAMPLE: u64 = 7;
const STREAM_CODEBOOK: u64 = 8;
const STREAM_CLASSIFIER: u64 = 9;

/// Mixes a base seed with a stream id and an index (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64, idx: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(idx.wrapping_mul(0xD1B5_4A32_D192_ED69));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Labeled images held in memory, in manifest order.
#[derive(Debug, Clone)]
pub struct TrainImages {
    pub images: Vec<GrayImage>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl TrainImages {
    pub fn new(images: Vec<GrayImage>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::DimMismatch {
                expected: images.len(),
                got: labels.len(),
            });
        }
        if images.is_empty() {
            return Err(Error::invalid("no training images"));
        }
        if labels.iter().any(|&l| l >= num_classes) {
            return Err(Error::invalid("training label out of range"));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn load(manifest: &DatasetManifest, split: Split) -> Result<Self> {
        let entries: Vec<_> = manifest.split(split).collect();
        let images = entries
            .par_iter()
            .map(|e| load_gray(&manifest.resolve(e)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(images, entries.iter().map(|e| e.class_id).collect(), manifest.num_classes)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// A layer's training inputs with their provenance, and the projection
/// fitted on them (higher layers only).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPool {
    pub store: PatchStore,
    pub pca: Option<crate::mathkit::PcaModel>,
}

fn geometry_for(cfg: &PipelineConfig, lower: &[LayerModel]) -> LayerGeometry {
    let lc = &cfg.layers[lower.len()];
    match lower.last() {
        None => LayerGeometry::first(cfg.data.patch_size, lc.num_scales, lc.stride),
        Some(lo) => LayerGeometry::above(&lo.geometry, lc.grid, lc.num_scales, lc.stride),
    }
}

fn max_scales(cfg: &PipelineConfig) -> usize {
    cfg.layers.iter().map(|l| l.num_scales).max().unwrap_or(1)
}

fn levels_of(img: &GrayImage, cfg: &PipelineConfig) -> Vec<GrayImage> {
    pyramid_levels(img, cfg.data.pyramid_factor, cfg.data.patch_size, max_scales(cfg))
}

/// Samples up to `patches_per_image` anchors per image across the layer's
/// scales and computes their inputs on top of `lower`. Above the first
/// layer a PCA is fitted on a label-blind subsample and applied, followed
/// by normalization.
pub fn collect_layer_pool(
    images: &TrainImages,
    lower: &[LayerModel],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<LayerPool> {
    let l = lower.len();
    if l >= cfg.layers.len() {
        return Err(Error::invalid(format!("config has no layer {}", l + 1)));
    }
    let geom = geometry_for(cfg, lower);
    let per_image = images
        .images
        .par_iter()
        .enumerate()
        .map(|(image_id, img)| -> Result<(Vec<PatchOrigin>, Matrix)> {
            let levels = levels_of(img, cfg);
            let mut cands = Vec::new();
            for (s, level) in levels.iter().enumerate().take(geom.num_scales) {
                cands.extend(geom.anchors(level.width(), level.height()).into_iter().map(|(x, y)| (s, x, y)));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_PATCHES, (l as u64) << 32 | image_id as u64));
            let keep = subsample_indices(cands.len(), cfg.data.patches_per_image, &mut rng);
            let mut by_scale: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
            for &k in &keep {
                let (s, x, y) = cands[k];
                by_scale.entry(s).or_default().push((x, y));
            }
            let mut origins = Vec::with_capacity(keep.len());
            let mut raw = Matrix::zeros(0, 0);
            for (s, positions) in by_scale {
                let block = raw_inputs(&levels[s], lower, &geom, &positions)?;
                if raw.rows() == 0 {
                    raw = Matrix::zeros(0, block.cols());
                }
                for (i, &(x, y)) in positions.iter().enumerate() {
                    raw.push_row(block.row(i))?;
                    origins.push(PatchOrigin {
                        image_id,
                        class_id: images.labels[image_id],
                        scale_idx: s,
                        x,
                        y,
                        size: geom.receptive_field,
                    });
                }
            }
            Ok((origins, raw))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut origins = Vec::new();
    let mut raw = Matrix::zeros(0, 0);
    for (o, m) in per_image {
        if m.rows() == 0 {
            continue;
        }
        if raw.rows() == 0 {
            raw = Matrix::zeros(0, m.cols());
        }
        for r in m.iter_rows() {
            raw.push_row(r)?;
        }
        origins.extend(o);
    }
    if origins.is_empty() {
        return Err(Error::invalid(format!(
            "layer {}: no image is large enough for a {}px receptive field",
            l + 1,
            geom.receptive_field
        )));
    }

    let pca = if l == 0 {
        None
    } else {
        let lc = &cfg.layers[l];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_PCA, l as u64));
        let idx = subsample_indices(raw.rows(), lc.pca_samples, &mut rng);
        let mut pca = pca_fit(&raw.select_rows(&idx), lc.pca_dim)?;
        pca.round_to_f32();
        Some(pca)
    };
    let values = finish_inputs(pca.as_ref(), raw)?;
    Ok(LayerPool {
        store: PatchStore { values, origins },
        pca,
    })
}

/// Runs the configured exemplar selection on the pool of layer `layer`
/// (0-based).
pub fn select_exemplars(
    store: &PatchStore,
    num_classes: usize,
    cfg: &ExemplarConfig,
    seed: u64,
    layer: usize,
) -> Result<ExemplarSet> {
    let labels = store.labels();
    let set = match cfg.method {
        ExemplarMethod::Nn => nn_select(&store.values, &labels, num_classes, &cfg.nn)?,
        ExemplarMethod::Svm => {
            let s = derive_seed(seed, STREAM_EXEMPLARS, layer as u64);
            let (train, val) = split_candidates(&labels, num_classes, s);
            svm_select(&store.values, &labels, num_classes, &train, &val, &cfg.svm, s)?.exemplars
        }
    };
    set.validate(&labels)?;
    Ok(set)
}

/// Assembles the training batch of layer `lower.len()`: the exemplars, an
/// unlabeled subsample of the pool as large as the exemplar set, and
/// `hyper.m` spatial neighbors of every unlabeled patch.
fn build_batch(
    images: &TrainImages,
    lower: &[LayerModel],
    pool: &LayerPool,
    exemplars: &ExemplarSet,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<TrainBatch> {
    let l = lower.len();
    let geom = geometry_for(cfg, lower);
    let m = cfg.layers[l].hyper.m;
    let store = &pool.store;

    let mut ex_rows = Vec::new();
    let mut ex_labels = Vec::new();
    for (c, idx) in exemplars.per_class.iter().enumerate() {
        ex_rows.extend_from_slice(idx);
        ex_labels.extend(std::iter::repeat_n(c, idx.len()));
    }
    if ex_rows.is_empty() {
        return Err(Error::invalid(format!("layer {}: no exemplars selected", l + 1)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_UNLABELED, l as u64));
    let unlabeled = subsample_indices(store.len(), ex_rows.len(), &mut rng);

    let mut by_image: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (j, &i) in unlabeled.iter().enumerate() {
        by_image.entry(store.origins[i].image_id).or_default().push(j);
    }
    let groups: Vec<(usize, Vec<usize>)> = by_image.into_iter().collect();
    let neighbor_rows = groups
        .par_iter()
        .map(|(image_id, js)| -> Result<Vec<(usize, Matrix)>> {
            let levels = levels_of(&images.images[*image_id], cfg);
            js.iter()
                .map(|&j| {
                    let i = unlabeled[j];
                    let o = store.origins[i];
                    let level = &levels[o.scale_idx];
                    let s = derive_seed(seed, STREAM_NEIGHBORS, (l as u64) << 32 | i as u64);
                    let block = if l == 0 {
                        let p = Patch {
                            values: store.values.row(i).to_vec(),
                            origin: o,
                        };
                        let ns = sample_spatial_neighbors(level, &p, m, s);
                        Matrix::from_rows(&ns.iter().map(|n| n.values.as_slice()).collect::<Vec<_>>())?
                    } else {
                        let anchors = shifted_anchors(level, &geom, o.x, o.y, m, s);
                        finish_inputs(pool.pca.as_ref(), raw_inputs(level, lower, &geom, &anchors)?)?
                    };
                    Ok((j, block))
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;

    let dim = store.dim();
    let mut omega = vec![Matrix::zeros(unlabeled.len(), dim); m];
    for (j, block) in neighbor_rows.into_iter().flatten() {
        for (k, o) in omega.iter_mut().enumerate() {
            o.row_mut(j).copy_from_slice(block.row(k));
        }
    }
    TrainBatch::new(
        store.values.select_rows(&unlabeled),
        omega,
        store.values.select_rows(&ex_rows),
        ex_labels,
        images.num_classes,
    )
}

/// `count` anchors displaced by up to half a receptive field from `(x, y)`,
/// clipped so the field stays inside the level.
fn shifted_anchors(level: &GrayImage, geom: &LayerGeometry, x: usize, y: usize, count: usize, seed: u64) -> Vec<(usize, usize)> {
    let rf = geom.receptive_field;
    let half = (rf / 2) as i64;
    let max_x = (level.width() - rf) as i64;
    let max_y = (level.height() - rf) as i64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let nx = (x as i64 + rng.random_range(-half..=half)).clamp(0, max_x);
            let ny = (y as i64 + rng.random_range(-half..=half)).clamp(0, max_y);
            (nx as usize, ny as usize)
        })
        .collect()
}

/// Training summary of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub layer: usize,
    pub pool_size: usize,
    pub exemplars: usize,
    pub rounds: usize,
    pub converged: bool,
    pub rolled_back: bool,
    pub objective: Vec<f64>,
}

/// Trains every configured layer. The first layer uses the given pool and
/// exemplars; each higher layer builds its own pool on top of the layers
/// below and re-runs exemplar selection on it.
///
/// With `random_filters` set, banks keep their random initialization; the
/// pools and projections are still computed.
pub fn train_stack(
    images: &TrainImages,
    first_pool: &LayerPool,
    first_exemplars: &ExemplarSet,
    cfg: &PipelineConfig,
    seed: u64,
    random_filters: bool,
) -> Result<(Vec<LayerModel>, Vec<LayerReport>)> {
    cfg.validate()?;
    let mut layers: Vec<LayerModel> = Vec::with_capacity(cfg.layers.len());
    let mut reports = Vec::new();
    for (l, lc) in cfg.layers.iter().enumerate() {
        let geometry = geometry_for(cfg, &layers);
        let owned;
        let (pool, exemplars) = if l == 0 {
            (first_pool, first_exemplars)
        } else {
            let pool = collect_layer_pool(images, &layers, cfg, seed)?;
            let ex = if random_filters {
                ExemplarSet::default()
            } else {
                select_exemplars(&pool.store, images.num_classes, &cfg.exemplars, seed, l)?
            };
            owned = (pool, ex);
            (&owned.0, &owned.1)
        };
        log::info!(
            "layer {}: {} inputs of dimension {}, {} exemplars",
            l + 1,
            pool.store.len(),
            pool.store.dim(),
            exemplars.total()
        );
        let init_seed = derive_seed(seed, STREAM_INIT, l as u64);
        let (bank, masks, report) = if random_filters {
            let mut w = init_filter_bank(lc.num_filters, pool.store.dim(), init_seed);
            w.round_to_f32();
            (FilterBank::new(w, l)?, Vec::new(), None)
        } else {
            let batch = build_batch(images, &layers, pool, exemplars, cfg, seed)?;
            let t = train_layer(&batch, &lc.hyper, lc.num_filters, l, init_seed)?;
            if t.degraded {
                log::warn!("layer {}: line search degraded during training", l + 1);
            }
            let report = LayerReport {
                layer: l,
                pool_size: pool.store.len(),
                exemplars: exemplars.total(),
                rounds: t.rounds,
                converged: t.converged,
                rolled_back: t.rolled_back,
                objective: t.history.clone(),
            };
            (t.bank, t.masks, Some(report))
        };
        reports.extend(report);
        layers.push(LayerModel {
            geometry,
            bank,
            masks,
            pca: pool.pca.clone(),
        });
    }
    Ok((layers, reports))
}

/// Per-image dense features of layer `l`, rounded to `f32` like the
/// exported feature files.
pub fn layer_features(images: &[GrayImage], model: &DeepModel, l: usize) -> Result<Vec<Matrix>> {
    images
        .par_iter()
        .map(|img| {
            let mut f = extract_features(img, model, l)?.stacked().0;
            f.round_to_f32();
            Ok(f)
        })
        .collect()
}

/// Learns one codebook per layer from per-image feature matrices.
pub fn build_codebooks(per_layer: &[Vec<Matrix>], cfg: &PipelineConfig, seed: u64) -> Result<Vec<Codebook>> {
    per_layer
        .iter()
        .enumerate()
        .map(|(l, feats)| {
            let sample = sample_codebook_features(feats, cfg.encode.codebook_samples, derive_seed(seed, STREAM_CODEBOOK_SAMPLE, l as u64))?;
            build_codebook(
                &sample,
                cfg.encode.codebook_size,
                cfg.encode.kmeans_iters,
                l,
                derive_seed(seed, STREAM_CODEBOOK, l as u64),
            )
        })
        .collect()
}

/// One-vs-rest SVM on training descriptors, rounded to `f32`.
pub fn fit_classifier(descriptors: &Matrix, labels: &[usize], num_classes: usize, cfg: &PipelineConfig, seed: u64) -> Result<OvrModel> {
    let mut m = train_ovr(
        descriptors,
        labels,
        num_classes,
        cfg.classifier.lambda_reg,
        cfg.classifier.epochs,
        derive_seed(seed, STREAM_CLASSIFIER, 0),
    )?;
    m.round_to_f32();
    Ok(m)
}

/// The whole training pipeline on in-memory images.
pub fn train_deep_images(images: &TrainImages, cfg: &PipelineConfig, seed: u64, random_filters: bool) -> Result<DeepModel> {
    let pool = collect_layer_pool(images, &[], cfg, seed)?;
    let ex = if random_filters {
        ExemplarSet::default()
    } else {
        select_exemplars(&pool.store, images.num_classes, &cfg.exemplars, seed, 0)?
    };
    let (layers, _) = train_stack(images, &pool, &ex, cfg, seed, random_filters)?;
    let mut model = DeepModel {
        layers,
        pyramid_factor: cfg.data.pyramid_factor,
        codebooks: Vec::new(),
        encoding: cfg.encode.coding(),
        classifier: None,
    };
    let feats = (0..model.layers.len())
        .map(|l| layer_features(&images.images, &model, l))
        .collect::<Result<Vec<_>>>()?;
    model.codebooks = build_codebooks(&feats, cfg, seed)?;
    let desc = describe_images(&images.images, &model)?;
    model.classifier = Some(fit_classifier(&desc, &images.labels, images.num_classes, cfg, seed)?);
    model.validate()?;
    Ok(model)
}

/// Trains the full model from the training split of a manifest.
pub fn train_deep(manifest: &DatasetManifest, cfg: &PipelineConfig, seed: u64) -> Result<DeepModel> {
    let images = TrainImages::load(manifest, Split::Train)?;
    train_deep_images(&images, cfg, seed, false)
}
