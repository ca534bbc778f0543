//! Global image descriptors and classification.
//!
//! Local features are coded against a per-layer codebook with
//! locality-constrained linear coding, max-pooled over a 1x1, 2x2, 4x4
//! spatial pyramid, and the per-layer vectors are concatenated and
//! normalized. A one-vs-rest linear SVM classifies the result.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::patch::subsample_indices;
use crate::dataio::{load_gray, DatasetManifest, GrayImage, ManifestEntry, Split};
use crate::deepstack::{extract_features, DeepModel};
use crate::error::{Error, Result};
use crate::mathkit::matrix::sq_dist;
use crate::mathkit::{kmeans, Matrix};
use crate::persist::{read_file, write_atomic, Reader, Writer};

/// Pyramid grid sides.
pub const SPM_LEVELS: [usize; 3] = [1, 2, 4];

/// Regions in the pooling pyramid.
pub fn spm_regions() -> usize {
    SPM_LEVELS.iter().map(|l| l * l).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncodeConfig {
    pub codebook_size: usize,
    pub knn: usize,
    pub beta: f64,
    /// Pool signed codes instead of their magnitudes.
    pub signed_pooling: bool,
    /// Features sampled per layer for codebook learning.
    pub codebook_samples: usize,
    pub kmeans_iters: usize,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        Self {
            codebook_size: 2000,
            knn: 5,
            beta: 1e-4,
            signed_pooling: false,
            codebook_samples: 200_000,
            kmeans_iters: 30,
        }
    }
}

impl EncodeConfig {
    pub fn coding(&self) -> CodingParams {
        CodingParams {
            knn: self.knn,
            beta: self.beta,
            signed_pooling: self.signed_pooling,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.knn == 0 || self.codebook_size < self.knn {
            return Err(Error::Config("need codebook_size >= knn >= 1".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config("beta must be > 0".into()));
        }
        Ok(())
    }
}

/// Coding settings stored with a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodingParams {
    pub knn: usize,
    pub beta: f64,
    pub signed_pooling: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `B x D`, one codeword per row.
    pub centers: Matrix,
    pub layer_idx: usize,
}

impl Codebook {
    pub fn size(&self) -> usize {
        self.centers.rows()
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }
}

/// k-means codebook; centers are rounded to `f32` precision.
pub fn build_codebook(features: &Matrix, b: usize, iters: usize, layer_idx: usize, seed: u64) -> Result<Codebook> {
    if features.rows() < b {
        return Err(Error::invalid(format!(
            "codebook of {b} words needs at least {b} features, got {}",
            features.rows()
        )));
    }
    let mut centers = kmeans(features, b, iters, seed)?.centers;
    centers.round_to_f32();
    Ok(Codebook { centers, layer_idx })
}

/// Sum-to-one weights on a few codewords.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode {
    pub idx: Vec<usize>,
    pub weights: Vec<f64>,
}

impl SparseCode {
    pub fn to_dense(&self, b: usize) -> Vec<f64> {
        let mut v = vec![0.0; b];
        for (&i, &w) in self.idx.iter().zip(&self.weights) {
            v[i] = w;
        }
        v
    }
}

/// Approximate locality-constrained linear code of `f`.
///
/// On the `knn` nearest codewords, minimizes `||f - sum c_i b_i||^2` subject
/// to `sum c_i = 1`. With `Z` the codewords shifted by `-f`, the solution
/// is `C^{-1} 1` normalized to unit sum, where `C = Z Z^T` plus
/// `beta * trace(C)` on the diagonal.
pub fn llc_encode(cb: &Codebook, f: &[f64], knn: usize, beta: f64) -> Result<SparseCode> {
    if f.len() != cb.dim() {
        return Err(Error::DimMismatch {
            expected: cb.dim(),
            got: f.len(),
        });
    }
    let k = knn.min(cb.size()).max(1);
    let mut d: Vec<(f64, usize)> = cb.centers.iter_rows().map(|c| sq_dist(c, f)).zip(0..).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if d.len() > k {
        d.select_nth_unstable_by(k - 1, cmp);
        d.truncate(k);
    }
    d.sort_by(cmp);
    let idx: Vec<usize> = d.into_iter().map(|(_, i)| i).collect();

    let dim = f.len();
    let z = DMatrix::from_fn(k, dim, |r, c| cb.centers[(idx[r], c)] - f[c]);
    let mut c = &z * z.transpose();
    let tr = c.trace();
    let reg = if tr > 0.0 { beta * tr } else { beta };
    for i in 0..k {
        c[(i, i)] += reg;
    }
    let ones = DVector::from_element(k, 1.0);
    let w = match c.clone().cholesky() {
        Some(ch) => ch.solve(&ones),
        None => c
            .lu()
            .solve(&ones)
            .ok_or_else(|| Error::Numeric("singular coding system".into()))?,
    };
    let s = w.sum();
    if !s.is_finite() || s == 0.0 {
        return Err(Error::Numeric("degenerate coding weights".into()));
    }
    Ok(SparseCode {
        idx,
        weights: w.iter().map(|v| v / s).collect(),
    })
}

pub fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Max-pools codes over the spatial pyramid.
///
/// `centers` are patch centers in original-image coordinates. Each region
/// holds the elementwise max of `|code|` (or of the signed code) over the
/// patches centered inside it; empty regions stay zero. The output has
/// `21 * b` entries and unit L2 norm unless every code is zero.
pub fn spm_pool(
    codes: &[SparseCode],
    centers: &[(f64, f64)],
    width: usize,
    height: usize,
    b: usize,
    signed: bool,
) -> Result<Vec<f64>> {
    if codes.len() != centers.len() {
        return Err(Error::DimMismatch {
            expected: codes.len(),
            got: centers.len(),
        });
    }
    let regions = spm_regions();
    let init = if signed { f64::NEG_INFINITY } else { 0.0 };
    let mut out = vec![init; regions * b];
    let mut touched = vec![false; regions];
    if codes.is_empty() {
        log::warn!("image without patches pools to a zero descriptor");
    }
    for (code, &(cx, cy)) in codes.iter().zip(centers) {
        let mut offset = 0;
        for &level in &SPM_LEVELS {
            let gx = cell(cx, width, level);
            let gy = cell(cy, height, level);
            let region = offset + gy * level + gx;
            touched[region] = true;
            let block = &mut out[region * b..(region + 1) * b];
            if signed {
                // codewords outside the support count as zero
                for v in block.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            for (&i, &w) in code.idx.iter().zip(&code.weights) {
                let v = if signed { w } else { w.abs() };
                if v > block[i] {
                    block[i] = v;
                }
            }
            offset += level * level;
        }
    }
    for (r, &t) in touched.iter().enumerate() {
        if !t {
            out[r * b..(r + 1) * b].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    l2_normalize(&mut out);
    Ok(out)
}

fn cell(c: f64, extent: usize, level: usize) -> usize {
    if extent == 0 {
        return 0;
    }
    let g = (c / extent as f64 * level as f64).floor();
    (g.max(0.0) as usize).min(level - 1)
}

/// Concatenated, normalized per-layer pyramid descriptors of one image.
pub fn describe_image(img: &GrayImage, model: &DeepModel) -> Result<Vec<f64>> {
    if model.codebooks.len() != model.layers.len() {
        return Err(Error::invalid("model has no codebooks; run `codebook` first"));
    }
    let mut out = Vec::new();
    for (l, cb) in model.codebooks.iter().enumerate() {
        let fm = extract_features(img, model, l)?;
        let (feats, centers) = fm.stacked();
        let codes = (0..feats.rows())
            .map(|i| llc_encode(cb, feats.row(i), model.encoding.knn, model.encoding.beta))
            .collect::<Result<Vec<_>>>()?;
        out.extend(spm_pool(&codes, &centers, img.width(), img.height(), cb.size(), model.encoding.signed_pooling)?);
    }
    l2_normalize(&mut out);
    Ok(out)
}

/// Descriptor length of a complete model.
pub fn descriptor_len(model: &DeepModel) -> usize {
    model.codebooks.iter().map(|c| c.size() * spm_regions()).sum()
}

/// Descriptors of many images, computed in parallel, in input order.
pub fn describe_images(images: &[GrayImage], model: &DeepModel) -> Result<Matrix> {
    let rows = images
        .par_iter()
        .map(|img| describe_image(img, model))
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, descriptor_len(model)));
    }
    Matrix::from_rows(&rows)
}

/// Samples at most `budget` rows of per-image feature maps for codebook
/// learning, without looking at labels. Sampled rows are rounded to `f32`.
pub fn sample_codebook_features(per_image: &[Matrix], budget: usize, seed: u64) -> Result<Matrix> {
    let total: usize = per_image.iter().map(Matrix::rows).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = subsample_indices(total, budget, &mut rng);
    let dim = per_image.iter().map(Matrix::cols).find(|&c| c > 0).unwrap_or(0);
    let mut out = Matrix::zeros(0, dim);
    let mut it = keep.into_iter().peekable();
    let mut base = 0;
    for m in per_image {
        while let Some(&g) = it.peek() {
            if g >= base + m.rows() {
                break;
            }
            out.push_row(m.row(g - base))?;
            it.next();
        }
        base += m.rows();
    }
    out.round_to_f32();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    /// Recall of each class; `NaN` for classes without test images.
    pub per_class: Vec<f64>,
    /// `confusion[truth][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    pub fn from_predictions(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::DimMismatch {
                expected: truth.len(),
                got: predicted.len(),
            });
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::invalid("class id out of range"));
            }
            confusion[t][p] += 1;
        }
        let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
        let accuracy = if truth.is_empty() {
            0.0
        } else {
            correct as f64 / truth.len() as f64
        };
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                if n == 0 {
                    f64::NAN
                } else {
                    row[c] as f64 / n as f64
                }
            })
            .collect();
        Ok(Self {
            accuracy,
            per_class,
            confusion,
        })
    }

    /// Mean of the defined per-class accuracies.
    pub fn mean_class_accuracy(&self) -> f64 {
        let v: Vec<f64> = self.per_class.iter().copied().filter(|a| !a.is_nan()).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    /// `metric<TAB>value` lines.
    pub fn report(&self) -> String {
        let mut s = String::new();
        let total: usize = self.confusion.iter().flatten().sum();
        let _ = writeln!(s, "accuracy\t{:.6}", self.accuracy);
        let _ = writeln!(s, "mean_class_accuracy\t{:.6}", self.mean_class_accuracy());
        let _ = writeln!(s, "num_test\t{total}");
        for (c, a) in self.per_class.iter().enumerate() {
            let _ = writeln!(s, "class_{c}_accuracy\t{a:.6}");
        }
        s
    }

    /// Confusion counts as CSV with a header row of predicted ids.
    pub fn confusion_csv(&self) -> String {
        let c = self.confusion.len();
        let mut s = String::from("truth");
        for p in 0..c {
            let _ = write!(s, ",pred_{p}");
        }
        s.push('\n');
        for (t, row) in self.confusion.iter().enumerate() {
            let _ = write!(s, "{t}");
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Classifies every test image of the manifest.
pub fn evaluate(model: &DeepModel, manifest: &DatasetManifest) -> Result<Metrics> {
    let classifier = model
        .classifier
        .as_ref()
        .ok_or_else(|| Error::invalid("model has no classifier; run `train` first"))?;
    let entries: Vec<_> = manifest.split(Split::Test).collect();
    if entries.is_empty() {
        return Err(Error::invalid("manifest has no test images"));
    }
    let predicted = entries
        .par_iter()
        .map(|e| {
            let img = load_gray(&manifest.resolve(e))?;
            classifier.predict(&describe_image(&img, model)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<usize> = entries.iter().map(|e| e.class_id).collect();
    Metrics::from_predictions(&truth, &predicted, manifest.num_classes)
}

pub const DESCRIPTORS_KIND: &str = "descriptors";

/// Writes descriptors (one row per manifest entry, full precision) and the
/// `row<TAB>path<TAB>class_id<TAB>split` index beside them.
pub fn save_descriptors(bin: &Path, idx: &Path, descriptors: &Matrix, entries: &[ManifestEntry]) -> Result<()> {
    if descriptors.rows() != entries.len() {
        return Err(Error::DimMismatch {
            expected: entries.len(),
            got: descriptors.rows(),
        });
    }
    let mut w = Writer::new(DESCRIPTORS_KIND);
    w.matrix_f64(descriptors);
    write_atomic(bin, &w.into_bytes())?;
    let mut text = String::new();
    for (i, e) in entries.iter().enumerate() {
        let _ = writeln!(text, "{i}\t{}\t{}\t{}", e.path, e.class_id, e.split);
    }
    write_atomic(idx, text.as_bytes())
}

/// Reads descriptors and their index.
pub fn load_descriptors(bin: &Path, idx: &Path) -> Result<(Matrix, Vec<ManifestEntry>)> {
    let bytes = read_file(bin)?;
    let mut r = Reader::new(&bytes, DESCRIPTORS_KIND)?;
    let m = r.matrix_f64("descriptors")?;
    r.finish()?;
    let text = std::fs::read_to_string(idx).map_err(|e| Error::io(idx, e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let bad = |msg: &str| Error::Parse {
            path: idx.to_path_buf(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad("expected row, path, class_id and split"));
        }
        if f[0].parse::<usize>().ok() != Some(i) {
            return Err(bad("rows must be numbered from 0 in order"));
        }
        entries.push(ManifestEntry {
            path: f[1].to_string(),
            class_id: f[2].parse().map_err(|_| bad("bad class id"))?,
            split: f[3].parse().map_err(|e: String| bad(&e))?,
        });
    }
    if entries.len() != m.rows() {
        return Err(Error::DimMismatch {
            expected: m.rows(),
            got: entries.len(),
        });
    }
    Ok((m, entries))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cb(rows: &[[f64; 2]]) -> Codebook {
        Codebook {
            centers: Matrix::from_rows(rows).unwrap(),
            layer_idx: 0,
        }
    }

    #[test]
    fn codeword_encodes_to_itself() {
        let c = cb(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 2.0], [3.0, 0.5]]);
        // two other neighbors in two dimensions: the shifts are independent
        let code = llc_encode(&c, &[1.0, 0.0], 3, 1e-4).unwrap();
        let dense = code.to_dense(6);
        assert!(dense[1] >= 0.99, "{dense:?}");
        assert!((dense.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(code.idx.len(), 3);
    }

    #[test]
    fn single_neighbor_gets_full_weight() {
        let c = cb(&[[0.0, 0.0], [5.0, 5.0]]);
        let code = llc_encode(&c, &[4.0, 4.5], 1, 1e-4).unwrap();
        assert_eq!(code.idx, vec![1]);
        assert_eq!(code.weights, vec![1.0]);
    }

    #[test]
    fn midpoint_splits_evenly() {
        let c = cb(&[[-1.0, 0.0], [1.0, 0.0], [9.0, 9.0]]);
        let code = llc_encode(&c, &[0.0, 0.0], 2, 1e-4).unwrap();
        let d = code.to_dense(3);
        assert!((d[0] - 0.5).abs() < 1e-6 && (d[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn pooling_geometry() {
        let code = SparseCode {
            idx: vec![0],
            weights: vec![1.0],
        };
        let v = spm_pool(&[code], &[(1.0, 1.0)], 64, 64, 2, false).unwrap();
        assert_eq!(v.len(), 42);
        let on: Vec<usize> = (0..42).filter(|&i| v[i] != 0.0).collect();
        // region 0 (1x1), region 1 (top-left of 2x2), region 5 (top-left of 4x4)
        assert_eq!(on, vec![0, 2, 10]);
    }

    #[test]
    fn pooling_takes_max_magnitude() {
        let a = SparseCode {
            idx: vec![0, 1],
            weights: vec![1.5, -0.5],
        };
        let b = SparseCode {
            idx: vec![1],
            weights: vec![1.0],
        };
        let v = spm_pool(&[a, b], &[(1.0, 1.0), (60.0, 60.0)], 64, 64, 2, false).unwrap();
        // 1x1 block holds (1.5, 1.0) before normalization
        let ratio = v[0] / v[1];
        assert!((ratio - 1.5).abs() < 1e-12);
    }

    #[test]
    fn metrics_examples() {
        let m = Metrics::from_predictions(&[0, 0, 1, 1], &[0, 0, 0, 0], 2).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.per_class, vec![1.0, 0.0]);
        let m = Metrics::from_predictions(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.confusion, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        assert!(m.report().starts_with("accuracy\t1.000000\n"));
    }
}
