//! Fixtures and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use ddsfl::config::PipelineConfig;
use ddsfl::dataio::{GrayImage, Split};
use ddsfl::deepstack::TrainImages;
use ddsfl::dsfl::TrainBatch;
use ddsfl::mathkit::Matrix;
use ddsfl::synth::{generate, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let v = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, v).unwrap()
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Quadratic-time nearest-neighbor exemplar selection written straight from
/// the definitions: coverage sets, reaching scores with the maximum pairwise
/// distance for classes that never reach, and the top `eps` fraction of each
/// class.
pub fn nn_select_oracle(x: &Matrix, labels: &[usize], num_classes: usize, m: usize, eps: f64) -> Vec<Vec<usize>> {
    let n = x.rows();
    let mut dist = vec![vec![0.0; n]; n];
    let mut max_d: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            dist[i][j] = l2(x.row(i), x.row(j));
            max_d = max_d.max(dist[i][j]);
        }
    }
    // covers[l] = the m nearest rows to l, ties broken by index
    let covers: Vec<Vec<usize>> = (0..n)
        .map(|l| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != l).collect();
            others.sort_by(|&a, &b| dist[l][a].total_cmp(&dist[l][b]).then(a.cmp(&b)));
            others.truncate(m);
            others
        })
        .collect();
    let score: Vec<f64> = (0..n)
        .map(|j| {
            let mut total = 0.0;
            for c in (0..num_classes).filter(|&c| c != labels[j]) {
                let reach: Vec<f64> = (0..n)
                    .filter(|&l| labels[l] == c && covers[l].contains(&j))
                    .map(|l| dist[l][j])
                    .collect();
                total += if reach.is_empty() {
                    max_d
                } else {
                    reach.iter().sum::<f64>() / reach.len() as f64
                };
            }
            total / (num_classes - 1) as f64
        })
        .collect();
    (0..num_classes)
        .map(|c| {
            let mut idx: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            let keep = ((eps * idx.len() as f64 + 1e-9).floor() as usize).clamp(1, idx.len());
            idx.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
            idx.truncate(keep);
            idx.sort_unstable();
            idx
        })
        .collect()
}

/// Random points around one center per class, plus `common` near-copies of
/// a single point inside every class. Returns the rows, their labels and the
/// indices of the common copies.
pub fn planted_common_patch(seed: u64, num_classes: usize, per_class: usize, common: usize) -> (Matrix, Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 6;
    let shared: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut planted = Vec::new();
    for c in 0..num_classes {
        let center: Vec<f64> = (0..dim).map(|_| rng.random_range(-8.0..8.0)).collect();
        for i in 0..per_class {
            if i < common {
                planted.push(rows.len());
                rows.push(shared.iter().map(|v| v + 1e-3 * rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
            } else {
                rows.push(center.iter().map(|v| v + rng.random_range(-1.0..1.0)).collect());
            }
            labels.push(c);
        }
    }
    (Matrix::from_rows(&rows).unwrap(), labels, planted)
}

/// Tight class-specific clusters plus one cluster every class shares.
pub struct SvmPlanted {
    pub x: Matrix,
    pub labels: Vec<usize>,
    /// Planted cluster of each row; `common_id` marks the shared one.
    pub cluster_of: Vec<usize>,
    pub common_id: usize,
    pub specific_count: usize,
}

pub fn svm_planted(seed: u64, num_classes: usize, per_class_clusters: usize, size: usize) -> SvmPlanted {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 8;
    let mut center = || -> Vec<f64> { (0..dim).map(|_| rng.random_range(-4.0..4.0)).collect() };
    let centers: Vec<Vec<f64>> = (0..num_classes * per_class_clusters).map(|_| center()).collect();
    let shared = center();
    let common_id = centers.len();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut cluster_of = Vec::new();
    for c in 0..num_classes {
        let own = (0..per_class_clusters).map(|k| c * per_class_clusters + k);
        for id in own.chain([common_id]) {
            let base = if id == common_id { &shared } else { &centers[id] };
            for _ in 0..size {
                rows.push(base.iter().map(|v| v + 0.05 * rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
                labels.push(c);
                cluster_of.push(id);
            }
        }
    }
    SvmPlanted {
        x: Matrix::from_rows(&rows).unwrap(),
        labels,
        cluster_of,
        common_id,
        specific_count: common_id,
    }
}

/// Planted cluster holding most of `members`.
pub fn majority_cluster(cluster_of: &[usize], members: &[usize]) -> usize {
    let mut counts = std::collections::BTreeMap::new();
    for &i in members {
        *counts.entry(cluster_of[i]).or_insert(0usize) += 1;
    }
    counts.into_iter().max_by_key(|&(id, n)| (n, std::cmp::Reverse(id))).unwrap().0
}

/// The oriented-grating benchmark: 3 classes of 64x64 images, 20 training
/// and 10 test images per class.
pub fn grating_benchmark(seed: u64) -> (TrainImages, Vec<(GrayImage, usize)>) {
    let scfg = SynthConfig {
        noise: 0.35,
        contrast: 0.12,
        ..Default::default()
    };
    split_items(generate(&scfg, seed).unwrap(), scfg.num_classes)
}

pub fn small_gratings(seed: u64, size: usize, train: usize, test: usize) -> (TrainImages, Vec<(GrayImage, usize)>) {
    let scfg = SynthConfig {
        width: size,
        height: size,
        train_per_class: train,
        test_per_class: test,
        noise: 0.3,
        ..Default::default()
    };
    split_items(generate(&scfg, seed).unwrap(), scfg.num_classes)
}

fn split_items(items: Vec<(GrayImage, usize, Split)>, num_classes: usize) -> (TrainImages, Vec<(GrayImage, usize)>) {
    let (mut imgs, mut labels, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (img, c, split) in items {
        match split {
            Split::Train => {
                imgs.push(img);
                labels.push(c);
            }
            _ => test.push((img, c)),
        }
    }
    (TrainImages::new(imgs, labels, num_classes).unwrap(), test)
}

/// Pipeline settings for the grating benchmark.
pub fn grating_config(layers: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.data.patches_per_image = 60;
    cfg.layers.truncate(layers);
    for l in &mut cfg.layers {
        l.num_filters = 64;
        l.pca_dim = 64;
    }
    cfg.encode.codebook_size = 128;
    cfg.encode.codebook_samples = 20_000;
    cfg
}

/// A configuration small enough for many quick end-to-end runs.
pub fn tiny_config(layers: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.data.patches_per_image = 20;
    cfg.layers.truncate(layers);
    for l in &mut cfg.layers {
        l.num_filters = 8;
        l.pca_dim = 8;
        l.pca_samples = 500;
        l.hyper.outer_rounds = 2;
        l.hyper.warm_iters = 20;
        l.hyper.w_iters = 10;
    }
    cfg.encode.codebook_size = 8;
    cfg.encode.codebook_samples = 2000;
    cfg.classifier.epochs = 5;
    cfg
}

#[derive(Debug)]
pub struct SvmOutcome {
    /// A surviving cluster descends from a k-means cluster dominated by the
    /// shared cluster.
    pub common_kept: bool,
    /// Planted class-specific clusters with a surviving descendant.
    pub specific_kept: usize,
}

/// Follows each surviving cluster back to the k-means cluster it grew from
/// and to the planted cluster that dominated it.
pub fn svm_outcome(p: &SvmPlanted, sel: &ddsfl::exemplar::SvmSelection) -> SvmOutcome {
    let planted_of = |class_id: usize, origin: usize| {
        let init = sel
            .initial
            .iter()
            .find(|c| c.class_id == class_id && c.origin == origin)
            .expect("survivor descends from an initial cluster");
        majority_cluster(&p.cluster_of, &init.members)
    };
    let lineage: std::collections::BTreeSet<usize> =
        sel.clusters.iter().map(|c| planted_of(c.class_id, c.origin)).collect();
    SvmOutcome {
        common_kept: lineage.contains(&p.common_id),
        specific_kept: lineage.iter().filter(|&&id| id != p.common_id).count(),
    }
}

fn f32_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let mut m = uniform(rng, rows, cols);
    m.round_to_f32();
    m
}

/// A complete model with random, `f32`-representable parameters and the
/// default layer geometry. `filters[l]` is the bank size of layer `l` and
/// `pca_dim` the projection width of every layer above the first.
pub fn random_model(seed: u64, filters: &[usize], pca_dim: usize, b: usize, classes: usize) -> ddsfl::deepstack::DeepModel {
    use ddsfl::deepstack::{DeepModel, LayerGeometry, LayerModel};
    use ddsfl::dsfl::{FilterBank, SelectionMask};
    use ddsfl::encode::{Codebook, CodingParams};
    use ddsfl::mathkit::PcaModel;
    use ddsfl::svmlite::{LinearSvmModel, OvrModel};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales = [2, 2, 1];
    let mut layers: Vec<LayerModel> = Vec::new();
    for (l, &d) in filters.iter().enumerate() {
        let (geometry, pca, d0) = match layers.last() {
            None => (LayerGeometry::first(16, scales[0], 4), None, 256),
            Some(lower) => {
                let g = LayerGeometry::above(&lower.geometry, 3, scales[l.min(2)], 8);
                let raw = 9 * lower.num_filters();
                let mut mean: Vec<f64> = (0..raw).map(|_| rng.random_range(0.0..0.5)).collect();
                mean.iter_mut().for_each(|v| *v = *v as f32 as f64);
                let pca = PcaModel {
                    mean,
                    components: f32_matrix(&mut rng, pca_dim, raw),
                };
                (g, Some(pca), pca_dim)
            }
        };
        let masks = (0..classes)
            .map(|_| SelectionMask {
                alpha: (0..d).map(|_| rng.random_bool(0.5)).collect(),
            })
            .collect();
        layers.push(LayerModel {
            geometry,
            bank: FilterBank::new(f32_matrix(&mut rng, d, d0), l).unwrap(),
            masks,
            pca,
        });
    }
    let codebooks = layers
        .iter()
        .enumerate()
        .map(|(l, layer)| Codebook {
            centers: {
                let mut c = f32_matrix(&mut rng, b, layer.num_filters());
                c.as_mut_slice().iter_mut().for_each(|v| *v = v.abs());
                c
            },
            layer_idx: l,
        })
        .collect();
    let dim = 21 * b * layers.len();
    let classifier = OvrModel {
        models: (0..classes)
            .map(|_| LinearSvmModel {
                w: f32_matrix(&mut rng, 1, dim).into_vec(),
                b: rng.random_range(-1.0f32..1.0) as f64,
                lambda_reg: 1e-4,
            })
            .collect(),
    };
    DeepModel {
        layers,
        pyramid_factor: std::f64::consts::FRAC_1_SQRT_2,
        codebooks,
        encoding: CodingParams {
            knn: 3,
            beta: 1e-4,
            signed_pooling: false,
        },
        classifier: Some(classifier),
    }
}

pub fn noise_image(seed: u64, width: usize, height: usize) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GrayImage::from_fn(width, height, |_, _| rng.random_range(0.0..1.0))
}

/// Three classes, each living near its own 2-D subspace of R^d0, plus a
/// shared direction common to all classes.
pub fn subspace_batch(seed: u64, d0: usize, per_class: usize) -> TrainBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bases: Vec<Matrix> = (0..3).map(|_| uniform(&mut rng, 2, d0)).collect();
    let shared = uniform(&mut rng, 1, d0);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (c, basis) in bases.iter().enumerate() {
        for _ in 0..per_class {
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(-1.0..1.0);
            let s: f64 = rng.random_range(-0.5..0.5);
            let row: Vec<f64> = (0..d0)
                .map(|k| a * basis[(0, k)] + b * basis[(1, k)] + s * shared[(0, k)] + 0.01 * rng.random_range(-1.0..1.0))
                .collect();
            rows.push(row);
            labels.push(c);
        }
    }
    let ex = Matrix::from_rows(&rows).unwrap();
    let x_all = ex.clone();
    let mut omega = x_all.clone();
    for v in omega.as_mut_slice() {
        *v += 0.05 * rng.random_range(-1.0..1.0);
    }
    TrainBatch::new(x_all, vec![omega], ex, labels, 3).unwrap()
}
