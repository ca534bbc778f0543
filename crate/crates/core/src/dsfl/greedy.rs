//! Greedy forward selection of one class's filters.
//!
//! Candidate scores are updated incrementally. Adding filter `d` with
//! responses `z_d` changes the residual by `-z_d w_d^T`, so the squared
//! error moves by `-2 z_d^T R w_d + ||z_d||^2 ||w_d||^2`; `R W^T` is kept
//! up to date with one rank-one correction per step. The triplet distances
//! are sums over the selected filters, so each filter's contribution to
//! every hinge argument is precomputed once.

use super::{LayerHyperparams, SelectionMask, TripletCache};
use crate::mathkit::Matrix;

/// One accepted greedy step.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyStep {
    pub filter: usize,
    /// Selection objective after adding `filter`.
    pub objective: f64,
    /// Shareable reconstruction after adding `filter`.
    pub shareable: f64,
}

pub fn greedy_select_alpha(
    w: &Matrix,
    class_id: usize,
    x_ex: &Matrix,
    cache: &TripletCache,
    hp: &LayerHyperparams,
) -> SelectionMask {
    greedy_select_alpha_traced(w, class_id, x_ex, cache, hp).0
}

/// Selection objective: class reconstruction through the selected filters,
/// plus `lambda2` per selected filter, plus `eta` times the class's triplet
/// hinge. Returns the mask and the accepted steps in order.
pub fn greedy_select_alpha_traced(
    w: &Matrix,
    class_id: usize,
    x_ex: &Matrix,
    cache: &TripletCache,
    hp: &LayerHyperparams,
) -> (SelectionMask, Vec<GreedyStep>) {
    let d = w.rows();
    let members: Vec<usize> = cache.members(class_id).collect();
    let cap = hp.active_cap(d);
    let mut mask = SelectionMask::empty(d);
    let mut steps = Vec::new();
    if members.is_empty() || d == 0 {
        return (mask, steps);
    }

    let xc = x_ex.select_rows(&members);
    let zc = xc.mul_t(w);
    let mut q = zc.clone();
    let gram = w.mul_t(w);
    let mut shareable = xc.sq_norm();
    let z_sq: Vec<f64> = (0..d).map(|k| (0..zc.rows()).map(|i| zc[(i, k)] * zc[(i, k)]).sum()).collect();

    // hinge arguments per anchor and each filter's additive contribution
    let use_dis = hp.eta != 0.0;
    let mut anchors: Vec<usize> = Vec::new();
    let mut contrib: Vec<Vec<f64>> = Vec::new();
    if use_dis {
        let a = x_ex.mul_t(w);
        for &j in &members {
            let (pos, neg) = (&cache.pos[j], &cache.neg[j]);
            if pos.is_empty() || neg.is_empty() {
                continue;
            }
            let row: Vec<f64> = (0..d)
                .map(|k| {
                    let aj = a[(j, k)].abs();
                    let mean_sq = |list: &[usize]| {
                        list.iter()
                            .map(|&o| {
                                let t = aj - a[(o, k)].abs();
                                t * t
                            })
                            .sum::<f64>()
                            / list.len() as f64
                    };
                    mean_sq(pos) - mean_sq(neg)
                })
                .collect();
            anchors.push(j);
            contrib.push(row);
        }
    }
    let mut margin = vec![hp.delta; anchors.len()];
    let hinge = |m: &[f64]| m.iter().map(|&h| h.max(0.0)).sum::<f64>();
    let mut objective = shareable + hp.eta * hinge(&margin);

    while steps.len() < cap {
        let mut best: Option<(f64, f64, usize)> = None;
        for k in (0..d).filter(|&k| !mask.alpha[k]) {
            let cross: f64 = (0..zc.rows()).map(|i| zc[(i, k)] * q[(i, k)]).sum();
            let sha = shareable - 2.0 * cross + z_sq[k] * gram[(k, k)];
            let dis = if use_dis {
                margin
                    .iter()
                    .zip(&contrib)
                    .map(|(h, row)| (h + row[k]).max(0.0))
                    .sum::<f64>()
            } else {
                0.0
            };
            let obj = sha + hp.lambda2 * (steps.len() + 1) as f64 + hp.eta * dis;
            if best.is_none_or(|(b, _, _)| obj < b) {
                best = Some((obj, sha, k));
            }
        }
        let Some((obj, sha, k)) = best else { break };
        if !steps.is_empty() {
            if obj >= objective {
                break;
            }
            if shareable <= 0.0 || (shareable - sha) / shareable < hp.greedy_tol {
                break;
            }
        }
        mask.alpha[k] = true;
        for i in 0..q.rows() {
            let zik = zc[(i, k)];
            for e in 0..d {
                q[(i, e)] -= zik * gram[(k, e)];
            }
        }
        for (h, row) in margin.iter_mut().zip(&contrib) {
            *h += row[k];
        }
        shareable = sha;
        objective = obj;
        steps.push(GreedyStep {
            filter: k,
            objective,
            shareable,
        });
    }
    (mask, steps)
}
