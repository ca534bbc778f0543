//! Cost terms and their gradients with respect to the filter bank.
//!
//! With `Z = X W^T` (one response row per input) and `R = X - Z W`, the
//! reconstruction cost `sum ||x - W^T W x||^2` has gradient
//! `-2 (Z^T R + P^T X)` where `P = R W^T`. Restricting a class to its
//! selected filters zeroes the unselected columns of `Z` and `P`, so the
//! same expression serves the per-class term and leaves unselected rows of
//! the gradient at zero. Terms built on `|Z|` push their derivative through
//! `sign(Z)` with `sign(0) = 0`.

use super::{LayerHyperparams, SelectionMask, TrainBatch, TripletCache};
use crate::mathkit::matrix::sign0;
use crate::mathkit::Matrix;

/// Per-term values of the layer objective at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveParts {
    pub unsupervised: f64,
    /// Shareable reconstruction per class, without the selection penalty.
    pub shareable: Vec<f64>,
    pub discriminative: Vec<f64>,
    pub active: Vec<usize>,
}

impl ObjectiveParts {
    /// The quantity minimized over `W` with the selections fixed.
    pub fn w_step(&self, hp: &LayerHyperparams) -> f64 {
        self.unsupervised
            + hp.gamma * self.shareable.iter().sum::<f64>()
            + hp.eta * self.discriminative.iter().sum::<f64>()
    }

    /// Full objective including the selection penalty.
    pub fn total(&self, hp: &LayerHyperparams) -> f64 {
        self.w_step(hp) + hp.gamma * hp.lambda2 * self.active.iter().sum::<usize>() as f64
    }

    /// Class `c`'s share of [`total`](Self::total).
    pub fn class_total(&self, c: usize, hp: &LayerHyperparams) -> f64 {
        hp.gamma * (self.shareable[c] + hp.lambda2 * self.active[c] as f64) + hp.eta * self.discriminative[c]
    }
}

fn mask_cols(z: &mut Matrix, mask: &[f64]) {
    let d = mask.len();
    for (k, v) in z.as_mut_slice().iter_mut().enumerate() {
        *v *= mask[k % d];
    }
}

/// Reconstruction error of `x` through the rows of `w` whose responses
/// survive in `z`; `z` must equal `x w^T` with unselected columns zeroed.
fn reconstruction(x: &Matrix, z: &Matrix, w: &Matrix, mask: Option<&[f64]>) -> (f64, Matrix, Matrix) {
    let mut r = x.clone();
    r.add_scaled(-1.0, &z.mul(w));
    let value = r.sq_norm();
    let mut p = r.mul_t(w);
    if let Some(m) = mask {
        mask_cols(&mut p, m);
    }
    // returns the pieces so callers can fold extra X-side terms into P
    (value, r, p)
}

/// Global term: reconstruction of every patch, spatial consistency with its
/// sampled neighbors, and the sum of feature magnitudes.
pub fn cost_unsupervised(w: &Matrix, x: &Matrix, omega: &[Matrix], hp: &LayerHyperparams) -> (f64, Matrix) {
    let z = x.mul_t(w);
    let (mut value, r, p) = reconstruction(x, &z, w, None);
    let mut grad = z.t_mul(&r);
    grad.scale(-2.0);

    // coefficient matrix multiplying X in the gradient: -2P + l1 sign(Z) + spatial part
    let mut a = p;
    a.scale(-2.0);
    if hp.lambda1 != 0.0 {
        value += hp.lambda1 * z.as_slice().iter().map(|v| v.abs()).sum::<f64>();
        for (av, zv) in a.as_mut_slice().iter_mut().zip(z.as_slice()) {
            *av += hp.lambda1 * sign0(*zv);
        }
    }
    if hp.xi != 0.0 && !omega.is_empty() {
        let wt = hp.xi / omega.len() as f64;
        for om in omega {
            let zm = om.mul_t(w);
            let mut b = Matrix::zeros(zm.rows(), zm.cols());
            let mut sp = 0.0;
            for ((bv, av), (zv, zmv)) in b
                .as_mut_slice()
                .iter_mut()
                .zip(a.as_mut_slice().iter_mut())
                .zip(z.as_slice().iter().zip(zm.as_slice()))
            {
                let diff = zv.abs() - zmv.abs();
                sp += diff.abs();
                let s = sign0(diff);
                *av += wt * s * sign0(*zv);
                *bv = -wt * s * sign0(*zmv);
            }
            value += wt * sp;
            grad.add_scaled(1.0, &b.t_mul(om));
        }
    }
    grad.add_scaled(1.0, &a.t_mul(x));
    (value, grad)
}

/// Class reconstruction through the selected filters only. The selection
/// penalty is not included.
pub fn cost_shareable(w: &Matrix, mask: &SelectionMask, xc: &Matrix) -> (f64, Matrix) {
    let m = mask.as_f64();
    let mut z = xc.mul_t(w);
    mask_cols(&mut z, &m);
    shareable_from_z(w, &m, xc, &z)
}

fn shareable_from_z(w: &Matrix, m: &[f64], xc: &Matrix, z: &Matrix) -> (f64, Matrix) {
    let (value, r, p) = reconstruction(xc, z, w, Some(m));
    let mut grad = z.t_mul(&r);
    grad.add_scaled(1.0, &p.t_mul(xc));
    grad.scale(-2.0);
    (value, grad)
}

/// Accumulates the triplet hinge of class `c` given the responses of all
/// exemplars. Adds `dL/dZ` (already masked and passed through `sign`) into
/// `dz`, scaled by `weight`.
fn discriminative_from_z(
    z: &Matrix,
    mask: &SelectionMask,
    class_id: usize,
    cache: &TripletCache,
    delta: f64,
    weight: f64,
    dz: Option<&mut Matrix>,
) -> f64 {
    let active = mask.active();
    let d = z.cols();
    let mut g = dz.as_ref().map(|_| Matrix::zeros(z.rows(), d));
    let mut value = 0.0;
    let dist = |a: usize, b: usize| -> f64 {
        active
            .iter()
            .map(|&k| {
                let t = z[(a, k)].abs() - z[(b, k)].abs();
                t * t
            })
            .sum()
    };
    for j in cache.members(class_id) {
        let pos = &cache.pos[j];
        let neg = &cache.neg[j];
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let dp = pos.iter().map(|&p| dist(j, p)).sum::<f64>() / pos.len() as f64;
        let dn = neg.iter().map(|&n| dist(j, n)).sum::<f64>() / neg.len() as f64;
        let h = delta + dp - dn;
        if h <= 0.0 {
            continue;
        }
        value += h;
        if let Some(g) = g.as_mut() {
            for (list, sgn) in [(pos, 1.0), (neg, -1.0)] {
                let s = sgn * 2.0 / list.len() as f64;
                for &o in list {
                    for &k in &active {
                        let diff = z[(j, k)].abs() - z[(o, k)].abs();
                        g[(j, k)] += s * diff;
                        g[(o, k)] -= s * diff;
                    }
                }
            }
        }
    }
    if let (Some(dz), Some(g)) = (dz, g) {
        for ((dv, gv), zv) in dz.as_mut_slice().iter_mut().zip(g.as_slice()).zip(z.as_slice()) {
            *dv += weight * gv * sign0(*zv);
        }
    }
    value
}

/// Triplet hinge of class `c` measured in the class's selected-filter space.
pub fn cost_discriminative(
    w: &Matrix,
    mask: &SelectionMask,
    class_id: usize,
    x_ex: &Matrix,
    cache: &TripletCache,
    hp: &LayerHyperparams,
) -> (f64, Matrix) {
    let z = x_ex.mul_t(w);
    let mut dz = Matrix::zeros(z.rows(), z.cols());
    let value = discriminative_from_z(&z, mask, class_id, cache, hp.delta, 1.0, Some(&mut dz));
    (value, dz.t_mul(x_ex))
}

fn evaluate(
    w: &Matrix,
    batch: &TrainBatch,
    masks: &[SelectionMask],
    cache: Option<&TripletCache>,
    hp: &LayerHyperparams,
    want_grad: bool,
) -> (ObjectiveParts, Option<Matrix>) {
    let (unsup, mut grad) = cost_unsupervised(w, &batch.x_all, &batch.omega, hp);
    let c_count = batch.num_classes;
    let mut parts = ObjectiveParts {
        unsupervised: unsup,
        shareable: vec![0.0; c_count],
        discriminative: vec![0.0; c_count],
        active: masks.iter().map(SelectionMask::active_count).collect(),
    };
    let need_sha = hp.gamma != 0.0 || !want_grad;
    let need_dis = cache.is_some() && (hp.eta != 0.0 || !want_grad);
    if !(need_sha || need_dis) || batch.exemplars.rows() == 0 {
        return (parts, want_grad.then_some(grad));
    }
    let z_ex = batch.exemplars.mul_t(w);
    if need_sha {
        for (c, idx) in batch.class_members().iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            let m = masks[c].as_f64();
            let xc = batch.exemplars.select_rows(idx);
            let mut zc = z_ex.select_rows(idx);
            mask_cols(&mut zc, &m);
            let (v, g) = shareable_from_z(w, &m, &xc, &zc);
            parts.shareable[c] = v;
            if want_grad {
                grad.add_scaled(hp.gamma, &g);
            }
        }
    }
    if let (true, Some(cache)) = (need_dis, cache) {
        let mut dz = want_grad.then(|| Matrix::zeros(z_ex.rows(), z_ex.cols()));
        for (c, mask) in masks.iter().enumerate() {
            parts.discriminative[c] = discriminative_from_z(&z_ex, mask, c, cache, hp.delta, hp.eta, dz.as_mut());
        }
        if let Some(dz) = dz {
            grad.add_scaled(1.0, &dz.t_mul(&batch.exemplars));
        }
    }
    (parts, want_grad.then_some(grad))
}

/// Objective minimized over `W` with fixed selections, with its gradient.
pub fn w_step_objective(
    w: &Matrix,
    batch: &TrainBatch,
    masks: &[SelectionMask],
    cache: Option<&TripletCache>,
    hp: &LayerHyperparams,
) -> (f64, Matrix) {
    let (parts, grad) = evaluate(w, batch, masks, cache, hp, true);
    (parts.w_step(hp), grad.expect("gradient requested"))
}

/// Every term of the layer objective, evaluated without gradients.
pub fn full_objective(
    w: &Matrix,
    batch: &TrainBatch,
    masks: &[SelectionMask],
    cache: Option<&TripletCache>,
    hp: &LayerHyperparams,
) -> ObjectiveParts {
    evaluate(w, batch, masks, cache, hp, false).0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthonormal_square_bank_reconstructs_exactly() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let w = Matrix::from_rows(&[vec![s, s], vec![s, -s]]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        let hp = LayerHyperparams {
            xi: 0.0,
            lambda1: 0.0,
            ..Default::default()
        };
        let (v, _) = cost_unsupervised(&w, &x, &[], &hp);
        assert!(v < 1e-24);
        let (v, _) = cost_shareable(&w, &SelectionMask::full(2), &x);
        assert!(v < 1e-24);
    }

    #[test]
    fn empty_selection_costs_input_energy() {
        let w = Matrix::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.1]]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        let (v, g) = cost_shareable(&w, &SelectionMask::empty(2), &x);
        assert_eq!(v, x.sq_norm());
        assert!(g.as_slice().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn sparsity_term_is_feature_sum() {
        let w = Matrix::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.1], vec![-0.5, 0.5]]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        let base = LayerHyperparams {
            xi: 0.0,
            lambda1: 0.0,
            ..Default::default()
        };
        let with = LayerHyperparams { lambda1: 1.0, ..base.clone() };
        let (v0, _) = cost_unsupervised(&w, &x, &[], &base);
        let (v1, _) = cost_unsupervised(&w, &x, &[], &with);
        let feature_sum: f64 = x
            .iter_rows()
            .flat_map(|r| w.iter_rows().map(move |f| crate::mathkit::matrix::dot(f, r).abs()))
            .sum();
        assert!((v1 - v0 - feature_sum).abs() < 1e-12);
    }
}
