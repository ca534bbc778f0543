use std::cmp::Ordering;

use rayon::prelude::*;

use super::kdforest::{ForestParams, KdForest};
use crate::mathkit::matrix::sq_dist;
use crate::mathkit::Matrix;

/// Query rows processed per distance block.
const QUERY_BLOCK: usize = 256;
/// Extra candidates kept from the blocked pass before exact re-ranking.
const RERANK_SLACK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SearchMode {
    Exact {
        /// Reference rows per shard; bounds the distance block size.
        shard_size: usize,
    },
    Approx(ForestParams),
}

impl Default for SearchMode {
    fn default() -> Self {
        SearchMode::Exact { shard_size: 4096 }
    }
}

/// For every row, its `m` nearest other rows under L2 as `(distance, index)`
/// sorted by distance then index. Duplicates of a row are kept; the row
/// itself is not.
pub fn coverage_sets(x: &Matrix, m: usize, mode: SearchMode) -> Vec<Vec<(f64, usize)>> {
    let n = x.rows();
    let m = m.min(n.saturating_sub(1));
    if m == 0 {
        return vec![Vec::new(); n];
    }
    let mut out = match mode {
        SearchMode::Exact { shard_size } => exact_sharded(x, m, shard_size.max(1)),
        SearchMode::Approx(p) => {
            let forest = KdForest::build(x, p.trees, p.seed);
            (0..n)
                .into_par_iter()
                .map(|i| forest.knn_of_row(i, m, p.checks))
                .collect()
        }
    };
    for row in &mut out {
        for c in row.iter_mut() {
            c.0 = c.0.sqrt();
        }
    }
    out
}

fn cmp_cand(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Blocked search: distances from a block of queries to one shard of
/// reference rows come from a single matrix product, the per-query
/// candidate lists are merged across shards, and the survivors are
/// re-ranked with directly computed distances.
fn exact_sharded(x: &Matrix, m: usize, shard_size: usize) -> Vec<Vec<(f64, usize)>> {
    let n = x.rows();
    let keep = (m + RERANK_SLACK).min(n - 1);
    let norms: Vec<f64> = x.iter_rows().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let shards: Vec<(usize, Matrix)> = (0..n)
        .step_by(shard_size)
        .map(|s| {
            let idx: Vec<usize> = (s..(s + shard_size).min(n)).collect();
            (s, x.select_rows(&idx))
        })
        .collect();

    let blocks: Vec<usize> = (0..n).step_by(QUERY_BLOCK).collect();
    blocks
        .into_par_iter()
        .flat_map_iter(|q0| {
            let q_idx: Vec<usize> = (q0..(q0 + QUERY_BLOCK).min(n)).collect();
            let q = x.select_rows(&q_idx);
            let mut cands: Vec<Vec<(f64, usize)>> = vec![Vec::with_capacity(keep * 2); q_idx.len()];
            for (s0, shard) in &shards {
                let g = q.mul_t(shard);
                for (qi, &i) in q_idx.iter().enumerate() {
                    let list = &mut cands[qi];
                    for (sj, gv) in g.row(qi).iter().enumerate() {
                        let j = s0 + sj;
                        if j == i {
                            continue;
                        }
                        list.push((norms[i] + norms[j] - 2.0 * gv, j));
                    }
                    if list.len() > keep {
                        list.select_nth_unstable_by(keep - 1, cmp_cand);
                        list.truncate(keep);
                    }
                }
            }
            q_idx
                .into_iter()
                .zip(cands)
                .map(|(i, list)| {
                    let mut exact: Vec<(f64, usize)> = list
                        .into_iter()
                        .map(|(_, j)| (sq_dist(x.row(i), x.row(j)), j))
                        .collect();
                    exact.sort_by(cmp_cand);
                    exact.truncate(m);
                    exact
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Largest pairwise L2 distance among the rows. The maximizing pairs are
/// located with blocked products and confirmed with direct distances.
pub fn max_pairwise_distance(x: &Matrix) -> f64 {
    let n = x.rows();
    if n < 2 {
        return 0.0;
    }
    let norms: Vec<f64> = x.iter_rows().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let scale = norms.iter().cloned().fold(0.0, f64::max);
    let slack = 1e-9 * (4.0 * scale + 1.0);

    let mut approx_max = f64::NEG_INFINITY;
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for q0 in (0..n).step_by(QUERY_BLOCK) {
        let q_idx: Vec<usize> = (q0..(q0 + QUERY_BLOCK).min(n)).collect();
        let q = x.select_rows(&q_idx);
        let ref_idx: Vec<usize> = (q0..n).collect();
        let r = x.select_rows(&ref_idx);
        let g = q.mul_t(&r);
        for (qi, &i) in q_idx.iter().enumerate() {
            for (rj, gv) in g.row(qi).iter().enumerate() {
                let j = q0 + rj;
                if j <= i {
                    continue;
                }
                let d = norms[i] + norms[j] - 2.0 * gv;
                if d >= approx_max - slack {
                    if d > approx_max {
                        approx_max = d;
                        pairs.retain(|p| p.2 >= approx_max - slack);
                    }
                    pairs.push((i, j, d));
                }
            }
        }
    }
    pairs
        .iter()
        .map(|&(i, j, _)| sq_dist(x.row(i), x.row(j)))
        .fold(0.0, f64::max)
        .sqrt()
}
