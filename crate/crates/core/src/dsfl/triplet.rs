use rayon::prelude::*;

use super::SelectionMask;
use crate::error::{Error, Result};
use crate::mathkit::matrix::sq_dist;
use crate::mathkit::Matrix;

/// Nearest same-class and other-class exemplars of every exemplar.
///
/// Indices are rows of the stacked exemplar matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletCache {
    pub labels: Vec<usize>,
    pub pos: Vec<Vec<usize>>,
    pub neg: Vec<Vec<usize>>,
}

impl TripletCache {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// A cache carrying labels but no triplets, for objectives without the
    /// discriminative term.
    pub fn unpaired(labels: &[usize]) -> Self {
        let n = labels.len();
        Self {
            labels: labels.to_vec(),
            pos: vec![Vec::new(); n],
            neg: vec![Vec::new(); n],
        }
    }

    pub fn members(&self, class_id: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.labels.len()).filter(move |&j| self.labels[j] == class_id)
    }

    /// Checks the structural contract: no self entries, positives share the
    /// anchor's class, negatives do not.
    pub fn validate(&self) -> Result<()> {
        for j in 0..self.len() {
            let c = self.labels[j];
            if self.pos[j].iter().any(|&p| p == j || self.labels[p] != c) {
                return Err(Error::invalid(format!("bad positive set for exemplar {j}")));
            }
            if self.neg[j].iter().any(|&n| self.labels[n] == c) {
                return Err(Error::invalid(format!("bad negative set for exemplar {j}")));
            }
        }
        Ok(())
    }
}

fn k_nearest(f: &Matrix, j: usize, candidates: &[usize], k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = candidates
        .iter()
        .filter(|&&o| o != j)
        .map(|&o| (sq_dist(f.row(j), f.row(o)), o))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if d.len() > k {
        d.select_nth_unstable_by(k - 1, cmp);
        d.truncate(k);
    }
    d.sort_by(cmp);
    d.into_iter().map(|(_, o)| o).collect()
}

/// Recomputes the triplet sets. Distances for anchors of class `c` are taken
/// between `|W^c x|` features, where `W^c` keeps only `c`'s selected rows.
/// A class with `K` or fewer exemplars gets all of its other members as
/// positives.
pub fn refresh_triplets(
    w: &Matrix,
    masks: &[SelectionMask],
    x_ex: &Matrix,
    labels: &[usize],
    k: usize,
) -> Result<TripletCache> {
    if labels.len() != x_ex.rows() {
        return Err(Error::DimMismatch {
            expected: x_ex.rows(),
            got: labels.len(),
        });
    }
    let num_classes = masks.len();
    let mut members = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::invalid(format!("label {l} has no selection mask")));
        }
        members[l].push(i);
    }
    for (c, m) in members.iter().enumerate() {
        if !m.is_empty() && m.len() <= k {
            log::warn!("class {c} has {} exemplars; positive sets shrink to {}", m.len(), m.len() - 1);
        }
    }

    let z = x_ex.mul_t(w);
    let n = labels.len();
    let mut pos = vec![Vec::new(); n];
    let mut neg = vec![Vec::new(); n];
    for (c, own) in members.iter().enumerate() {
        if own.is_empty() {
            continue;
        }
        let mut f = z.clone();
        let d = f.cols();
        let mask = &masks[c].alpha;
        for (idx, v) in f.as_mut_slice().iter_mut().enumerate() {
            *v = if mask[idx % d] { v.abs() } else { 0.0 };
        }
        let others: Vec<usize> = (0..n).filter(|&i| labels[i] != c).collect();
        let sets: Vec<(usize, Vec<usize>, Vec<usize>)> = own
            .par_iter()
            .map(|&j| (j, k_nearest(&f, j, own, k), k_nearest(&f, j, &others, k)))
            .collect();
        for (j, p, q) in sets {
            pos[j] = p;
            neg[j] = q;
        }
    }
    Ok(TripletCache {
        labels: labels.to_vec(),
        pos,
        neg,
    })
}
