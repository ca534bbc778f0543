//! Linear SVMs trained with Pegasos-style stochastic subgradient steps.
//!
//! The bias is carried as an extra constant feature and shares the L2
//! penalty, which keeps it on the same averaged trajectory as `w`. The
//! returned model is the average of the last 10% of iterates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mathkit::matrix::dot;
use crate::mathkit::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvmModel {
    pub w: Vec<f64>,
    pub b: f64,
    pub lambda_reg: f64,
}

impl LinearSvmModel {
    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.w.len() {
            return Err(Error::DimMismatch {
                expected: self.w.len(),
                got: x.len(),
            });
        }
        Ok(dot(&self.w, x) + self.b)
    }

    /// A sample fires when its score is strictly above -1.
    pub fn fires(&self, x: &[f64]) -> Result<bool> {
        Ok(self.score(x)? > -1.0)
    }

    /// Balanced primal objective: mean hinge over positives and over
    /// negatives, averaged, plus `lambda/2 * (|w|^2 + b^2)`.
    pub fn objective(&self, pos: &Matrix, neg: &Matrix) -> f64 {
        let hinge = |m: &Matrix, y: f64| {
            let total: f64 = m
                .iter_rows()
                .map(|x| (1.0 - y * (dot(&self.w, x) + self.b)).max(0.0))
                .sum();
            total / m.rows().max(1) as f64
        };
        0.5 * (hinge(pos, 1.0) + hinge(neg, -1.0))
            + 0.5 * self.lambda_reg * (dot(&self.w, &self.w) + self.b * self.b)
    }

    pub fn round_to_f32(&mut self) {
        for v in &mut self.w {
            *v = *v as f32 as f64;
        }
        self.b = self.b as f32 as f64;
        self.lambda_reg = self.lambda_reg as f32 as f64;
    }
}

pub fn train_binary(
    pos: &Matrix,
    neg: &Matrix,
    lambda_reg: f64,
    epochs: usize,
    seed: u64,
) -> Result<LinearSvmModel> {
    if pos.rows() == 0 || neg.rows() == 0 {
        return Err(Error::invalid("binary SVM needs positive and negative samples"));
    }
    if pos.cols() != neg.cols() {
        return Err(Error::DimMismatch {
            expected: pos.cols(),
            got: neg.cols(),
        });
    }
    if !pos.is_finite() || !neg.is_finite() {
        return Err(Error::NonFinite("SVM training features"));
    }
    if !(lambda_reg > 0.0) {
        return Err(Error::invalid("SVM regularization must be positive"));
    }

    let d = pos.cols();
    let total = epochs.max(1) * (pos.rows() + neg.rows());
    let tail_start = total - (total / 10).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // theta = scale * v, with |v|^2 tracked incrementally; index d holds the bias
    let mut v = vec![0.0; d + 1];
    let mut scale = 1.0;
    let mut v_sq = 0.0;
    let radius_sq = 1.0 / lambda_reg;
    let mut avg = vec![0.0; d + 1];
    let mut avg_count = 0usize;

    for t in 1..=total {
        let (x, y) = if rng.random::<bool>() {
            (pos.row(rng.random_range(0..pos.rows())), 1.0)
        } else {
            (neg.row(rng.random_range(0..neg.rows())), -1.0)
        };
        let eta = 1.0 / (lambda_reg * t as f64);
        let vx = dot(&v[..d], x) + v[d];
        let margin = y * scale * vx;

        if t == 1 {
            // (1 - eta lambda) = 0 on the first step
            v.iter_mut().for_each(|e| *e = 0.0);
            scale = 1.0;
            v_sq = 0.0;
        } else {
            scale *= 1.0 - eta * lambda_reg;
        }
        if margin < 1.0 {
            let a = eta * y / scale;
            let vx_now = if t == 1 { 0.0 } else { vx };
            let x_sq = dot(x, x) + 1.0;
            for (vi, xi) in v[..d].iter_mut().zip(x) {
                *vi += a * xi;
            }
            v[d] += a;
            v_sq += 2.0 * a * vx_now + a * a * x_sq;
        }
        let norm_sq = scale * scale * v_sq;
        if norm_sq > radius_sq {
            scale *= (radius_sq / norm_sq).sqrt();
        }
        if scale < 1e-9 {
            v.iter_mut().for_each(|e| *e *= scale);
            v_sq *= scale * scale;
            scale = 1.0;
        }
        if t > tail_start {
            for (a, vi) in avg.iter_mut().zip(&v) {
                *a += scale * vi;
            }
            avg_count += 1;
        }
    }

    let inv = 1.0 / avg_count as f64;
    let b = avg[d] * inv;
    avg.truncate(d);
    avg.iter_mut().for_each(|a| *a *= inv);
    Ok(LinearSvmModel {
        w: avg,
        b,
        lambda_reg,
    })
}

/// One-vs-rest collection of binary models.
#[derive(Debug, Clone, PartialEq)]
pub struct OvrModel {
    pub models: Vec<LinearSvmModel>,
}

impl OvrModel {
    pub fn num_classes(&self) -> usize {
        self.models.len()
    }

    pub fn dim(&self) -> usize {
        self.models.first().map_or(0, |m| m.dim())
    }

    /// Highest-scoring class; ties go to the smallest class id.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (c, m) in self.models.iter().enumerate() {
            let s = m.score(x)?;
            if s > best_score {
                best_score = s;
                best = c;
            }
        }
        Ok(best)
    }

    pub fn round_to_f32(&mut self) {
        self.models.iter_mut().for_each(LinearSvmModel::round_to_f32);
    }
}

pub fn train_ovr(
    data: &Matrix,
    labels: &[usize],
    num_classes: usize,
    lambda_reg: f64,
    epochs: usize,
    seed: u64,
) -> Result<OvrModel> {
    if data.rows() != labels.len() {
        return Err(Error::DimMismatch {
            expected: data.rows(),
            got: labels.len(),
        });
    }
    if num_classes == 0 {
        return Err(Error::invalid("one-vs-rest needs at least one class"));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::invalid(format!("label {l} >= class count {num_classes}")));
        }
        by_class[l].push(i);
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::invalid(format!("class {c} has no training samples")));
    }
    if num_classes == 1 {
        // nothing to separate; a constant scorer predicts the only class
        return Ok(OvrModel {
            models: vec![LinearSvmModel {
                w: vec![0.0; data.cols()],
                b: 1.0,
                lambda_reg,
            }],
        });
    }
    let models = (0..num_classes)
        .map(|c| {
            let neg_idx: Vec<usize> = (0..data.rows()).filter(|&i| labels[i] != c).collect();
            let pos = data.select_rows(&by_class[c]);
            let neg = data.select_rows(&neg_idx);
            train_binary(&pos, &neg, lambda_reg, epochs, seed.wrapping_add(c as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OvrModel { models })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mathkit::{lbfgs_minimize, LbfgsParams};
    use rand_distr::{Distribution, Normal};

    fn col(v: &[f64]) -> Matrix {
        Matrix::from_rows(&v.iter().map(|&x| vec![x]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn separates_1d() {
        let pos = col(&[2.0, 3.0]);
        let neg = col(&[-2.0, -3.0]);
        let m = train_binary(&pos, &neg, 1e-3, 50, 1).unwrap();
        for x in [2.0, 3.0] {
            assert!(m.score(&[x]).unwrap() > 0.0);
        }
        for x in [-2.0, -3.0] {
            assert!(m.score(&[x]).unwrap() < 0.0);
        }
    }

    #[test]
    fn identical_classes_are_chance() {
        let data = col(&[1.0, 2.0, 3.0, 4.0]);
        let m = train_binary(&data, &data, 1e-2, 20, 3).unwrap();
        let pos_right = data.iter_rows().filter(|x| m.score(x).unwrap() > 0.0).count();
        let neg_right = data.iter_rows().filter(|x| m.score(x).unwrap() <= 0.0).count();
        let acc = (pos_right + neg_right) as f64 / 8.0;
        assert!((acc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn deterministic_given_seed() {
        let pos = col(&[1.0, 2.5, 0.3]);
        let neg = col(&[-1.0, 0.1]);
        let a = train_binary(&pos, &neg, 1e-2, 30, 9).unwrap();
        let b = train_binary(&pos, &neg, 1e-2, 30, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_non_finite() {
        let pos = col(&[f64::NAN]);
        let neg = col(&[1.0]);
        assert!(matches!(
            train_binary(&pos, &neg, 1e-2, 1, 0),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn score_and_fire_threshold() {
        let m = LinearSvmModel {
            w: vec![1.0, 0.0],
            b: 0.0,
            lambda_reg: 1.0,
        };
        assert_eq!(m.score(&[-0.5, 9.0]).unwrap(), -0.5);
        assert!(m.fires(&[-0.5, 9.0]).unwrap());
        assert!(!m.fires(&[-1.0, 0.0]).unwrap());
        assert!(m.score(&[1.0]).is_err());
        let dead = LinearSvmModel {
            w: vec![0.0],
            b: -2.0,
            lambda_reg: 1.0,
        };
        assert!(!dead.fires(&[123.0]).unwrap());
    }

    #[test]
    fn ovr_three_clusters() {
        let centers = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let c = i % 3;
            rows.push(vec![
                centers[c][0] + noise.sample(&mut rng),
                centers[c][1] + noise.sample(&mut rng),
            ]);
            labels.push(c);
        }
        let data = Matrix::from_rows(&rows).unwrap();
        let m = train_ovr(&data, &labels, 3, 1e-4, 100, 2).unwrap();
        let correct = data
            .iter_rows()
            .zip(&labels)
            .filter(|(x, &l)| m.predict(x).unwrap() == l)
            .count();
        assert_eq!(correct, 60);
    }

    #[test]
    fn ovr_ties_and_single_class() {
        let flat = LinearSvmModel {
            w: vec![0.0],
            b: 0.5,
            lambda_reg: 1.0,
        };
        let m = OvrModel {
            models: vec![flat.clone(), flat.clone(), flat],
        };
        assert_eq!(m.predict(&[3.0]).unwrap(), 0);

        let data = col(&[1.0, 2.0]);
        let one = train_ovr(&data, &[0, 0], 1, 1e-3, 5, 0).unwrap();
        assert_eq!(one.predict(&[-7.0]).unwrap(), 0);
        assert!(train_ovr(&data, &[0, 0], 2, 1e-3, 5, 0).is_err());
    }

    #[test]
    fn pegasos_matches_smoothed_lbfgs_objective() {
        // 50-point separable set, compared against L-BFGS on a softplus-smoothed
        // version of the same balanced objective
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let noise = Normal::new(0.0, 0.4).unwrap();
        let mut pos_rows = Vec::new();
        let mut neg_rows = Vec::new();
        for i in 0..50 {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            let row = vec![sign * 1.5 + noise.sample(&mut rng), noise.sample(&mut rng)];
            if sign > 0.0 {
                pos_rows.push(row);
            } else {
                neg_rows.push(row);
            }
        }
        let pos = Matrix::from_rows(&pos_rows).unwrap();
        let neg = Matrix::from_rows(&neg_rows).unwrap();
        let lambda = 0.05;
        let model = train_binary(&pos, &neg, lambda, 400, 4).unwrap();
        let peg = model.objective(&pos, &neg);

        let tau = 1e-3;
        let smooth = |t: &[f64], g: &mut [f64]| {
            g.iter_mut().for_each(|v| *v = 0.0);
            let mut val = 0.0;
            for (m, y) in [(&pos, 1.0), (&neg, -1.0)] {
                let wgt = 0.5 / m.rows() as f64;
                for x in m.iter_rows() {
                    let z = (1.0 - y * (t[0] * x[0] + t[1] * x[1] + t[2])) / tau;
                    let (sp, sig) = if z > 30.0 {
                        (z, 1.0)
                    } else {
                        ((1.0 + z.exp()).ln(), 1.0 / (1.0 + (-z).exp()))
                    };
                    val += wgt * tau * sp;
                    g[0] -= wgt * sig * y * x[0];
                    g[1] -= wgt * sig * y * x[1];
                    g[2] -= wgt * sig * y;
                }
            }
            for i in 0..3 {
                val += 0.5 * lambda * t[i] * t[i];
                g[i] += lambda * t[i];
            }
            val
        };
        let params = LbfgsParams {
            max_iters: 2000,
            grad_tol: 1e-9,
            ..Default::default()
        };
        let r = lbfgs_minimize(smooth, &[0.0; 3], &params);
        let oracle = LinearSvmModel {
            w: r.theta[..2].to_vec(),
            b: r.theta[2],
            lambda_reg: lambda,
        }
        .objective(&pos, &neg);
        assert!((peg - oracle).abs() <= 0.1 * oracle, "pegasos {peg} vs lbfgs {oracle}");
    }
}
