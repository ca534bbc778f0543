use nalgebra::{DMatrix, SymmetricEigen};

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// k x D_in, orthonormal rows, descending eigenvalue order.
    pub components: Matrix,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.rows()
    }

    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(Error::DimMismatch {
                expected: self.mean.len(),
                got: x.len(),
            });
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok(self.components.iter_rows().map(|c| dot(c, &centered)).collect())
    }

    pub fn reconstruct(&self, y: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &w) in self.components.iter_rows().zip(y) {
            for (o, v) in out.iter_mut().zip(c) {
                *o += w * v;
            }
        }
        out
    }

    pub fn round_to_f32(&mut self) {
        for v in &mut self.mean {
            *v = *v as f32 as f64;
        }
        self.components.round_to_f32();
    }
}

pub fn pca_fit(data: &Matrix, k: usize) -> Result<PcaModel> {
    pca_fit_with_spectrum(data, k).map(|(m, _)| m)
}

/// Fits PCA from the eigendecomposition of the sample covariance and also
/// returns the full eigenvalue spectrum in descending order.
pub fn pca_fit_with_spectrum(data: &Matrix, k: usize) -> Result<(PcaModel, Vec<f64>)> {
    let (n, d) = (data.rows(), data.cols());
    if n < 2 {
        return Err(Error::invalid("PCA needs at least 2 samples"));
    }
    if k == 0 || k > d || k > n - 1 {
        return Err(Error::invalid(format!(
            "PCA dimension {k} out of range for {n} samples of dimension {d}"
        )));
    }
    let mut mean = vec![0.0; d];
    for row in data.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut centered = data.clone();
    for i in 0..n {
        for (v, m) in centered.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let mut cov = centered.t_mul(&centered);
    cov.scale(1.0 / (n - 1) as f64);
    // symmetrize against rounding in the product
    for i in 0..d {
        for j in (i + 1)..d {
            let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, cov.as_slice()));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut components = Matrix::zeros(k, d);
    for (r, &col) in order.iter().take(k).enumerate() {
        let v = eig.eigenvectors.column(col);
        // fix the sign so the largest-magnitude entry is positive
        let mut pivot = 0;
        for j in 0..d {
            if v[j].abs() > v[pivot].abs() {
                pivot = j;
            }
        }
        let s = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components[(r, j)] = s * v[j];
        }
    }
    let spectrum = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    Ok((PcaModel { mean, components }, spectrum))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn line_data_principal_axis() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let data = Matrix::from_rows(&rows).unwrap();
        let (m, eig) = pca_fit_with_spectrum(&data, 1).unwrap();
        let s5 = 5f64.sqrt();
        assert!((m.components[(0, 0)] - 1.0 / s5).abs() < 1e-9);
        assert!((m.components[(0, 1)] - 2.0 / s5).abs() < 1e-9);
        assert!(eig[1].abs() < 1e-9);
    }

    #[test]
    fn full_rank_transform_is_isometric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..4).map(|_| rng.random::<f64>()).collect())
            .collect();
        let data = Matrix::from_rows(&rows).unwrap();
        let m = pca_fit(&data, 4).unwrap();
        let a = m.transform(&rows[0]).unwrap();
        let b = m.transform(&rows[1]).unwrap();
        let d_in = super::super::matrix::sq_dist(&rows[0], &rows[1]).sqrt();
        let d_out = super::super::matrix::sq_dist(&a, &b).sqrt();
        assert!((d_in - d_out).abs() < 1e-8);
    }

    #[test]
    fn mean_maps_to_origin() {
        let rows = vec![vec![1.0, 2.0, 3.0], vec![3.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let data = Matrix::from_rows(&rows).unwrap();
        let m = pca_fit(&data, 2).unwrap();
        let z = m.transform(&m.mean.clone()).unwrap();
        assert!(z.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn rejects_oversized_k() {
        let data = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(pca_fit(&data, 2).is_err());
        assert!(pca_fit(&data, 1).is_ok());
    }
}
