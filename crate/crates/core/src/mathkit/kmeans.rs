use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::matrix::{sq_dist, Matrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centers: Matrix,
    pub assignment: Vec<usize>,
    /// Within-cluster sum of squares after each Lloyd step.
    pub sse_history: Vec<f64>,
}

impl KMeansResult {
    pub fn sse(&self) -> f64 {
        self.sse_history.last().copied().unwrap_or(0.0)
    }
}

/// k-means++ seeding followed by Lloyd iterations.
///
/// A cluster that loses all its points is re-seeded with the point farthest
/// from its current center.
pub fn kmeans(data: &Matrix, k: usize, iters: usize, seed: u64) -> Result<KMeansResult> {
    let n = data.rows();
    if k == 0 {
        return Err(Error::invalid("k-means needs k >= 1"));
    }
    if n < k {
        return Err(Error::invalid(format!("k-means: {n} points for {k} clusters")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_init(data, k, &mut rng);
    let mut assignment = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let mut sse_history = Vec::new();

    // assignment and update alternate; the SSE is recorded after each update
    assign(data, &centers, &mut assignment, &mut dists);
    for _ in 0..iters.max(1) {
        reseed_empty(data, &mut centers, &mut assignment, &mut dists);
        update_centers(data, &assignment, &mut centers);
        let changed = assign(data, &centers, &mut assignment, &mut dists);
        sse_history.push(dists.iter().sum());
        if !changed {
            break;
        }
    }
    Ok(KMeansResult {
        centers,
        assignment,
        sse_history,
    })
}

fn plus_plus_init(data: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = data.rows();
    let mut centers = Matrix::zeros(k, data.cols());
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from_slice(data.row(first));
    let mut best: Vec<f64> = data.iter_rows().map(|r| sq_dist(r, data.row(first))).collect();
    for c in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in best.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from_slice(data.row(pick));
        for (i, b) in best.iter_mut().enumerate() {
            let d = sq_dist(data.row(i), centers.row(c));
            if d < *b {
                *b = d;
            }
        }
    }
    centers
}

/// Nearest-center assignment, ties to the lowest center index. Returns
/// whether any assignment changed.
fn assign(data: &Matrix, centers: &Matrix, assignment: &mut [usize], dists: &mut [f64]) -> bool {
    let mut changed = false;
    for (i, row) in data.iter_rows().enumerate() {
        let (best, d) = nearest(row, centers);
        if assignment[i] != best {
            assignment[i] = best;
            changed = true;
        }
        dists[i] = d;
    }
    changed
}

pub(crate) fn nearest(x: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, center) in centers.iter_rows().enumerate() {
        let d = sq_dist(x, center);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

fn reseed_empty(data: &Matrix, centers: &mut Matrix, assignment: &mut [usize], dists: &mut [f64]) {
    let k = centers.rows();
    let mut counts = vec![0usize; k];
    for &a in assignment.iter() {
        counts[a] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        // farthest point from its own center, among clusters that can spare one
        let mut far = None;
        let mut far_d = -1.0;
        for (i, &d) in dists.iter().enumerate() {
            if counts[assignment[i]] > 1 && d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        let Some(i) = far else { break };
        counts[assignment[i]] -= 1;
        counts[c] = 1;
        assignment[i] = c;
        dists[i] = 0.0;
        centers.row_mut(c).copy_from_slice(data.row(i));
    }
}

fn update_centers(data: &Matrix, assignment: &[usize], centers: &mut Matrix) {
    let k = centers.rows();
    let mut sums = Matrix::zeros(k, data.cols());
    let mut counts = vec![0usize; k];
    for (row, &a) in data.iter_rows().zip(assignment) {
        counts[a] += 1;
        for (s, v) in sums.row_mut(a).iter_mut().zip(row) {
            *s += v;
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            continue;
        }
        let inv = 1.0 / counts[c] as f64;
        for (dst, s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
            *dst = s * inv;
        }
    }
}
