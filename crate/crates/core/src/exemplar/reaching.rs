use super::coverage::{coverage_sets, max_pairwise_distance};
use super::{ExemplarSet, NnSelectConfig};
use crate::error::{Error, Result};
use crate::mathkit::Matrix;

/// Reaching score of every row.
///
/// Row `j` of class `c` is reached by row `l` of another class when `j` is in
/// the coverage set of `l`. Per other class the score is the mean distance of
/// the reaching rows; a class that never reaches `j` contributes
/// `unreached_value`. The final score averages over the `C - 1` other classes.
pub fn reaching_scores(
    labels: &[usize],
    num_classes: usize,
    coverage: &[Vec<(f64, usize)>],
    unreached_value: f64,
) -> Result<Vec<f64>> {
    if num_classes < 2 {
        return Err(Error::invalid("reaching scores need at least two classes"));
    }
    let n = labels.len();
    if coverage.len() != n {
        return Err(Error::DimMismatch {
            expected: n,
            got: coverage.len(),
        });
    }
    let mut count = vec![0usize; n * num_classes];
    let mut dist = vec![0.0f64; n * num_classes];
    for (l, cover) in coverage.iter().enumerate() {
        let reacher = labels[l];
        for &(d, j) in cover {
            if labels[j] != reacher {
                count[j * num_classes + reacher] += 1;
                dist[j * num_classes + reacher] += d;
            }
        }
    }
    Ok((0..n)
        .map(|j| {
            let own = labels[j];
            let total: f64 = (0..num_classes)
                .filter(|&c| c != own)
                .map(|c| {
                    let k = j * num_classes + c;
                    if count[k] == 0 {
                        unreached_value
                    } else {
                        dist[k] / count[k] as f64
                    }
                })
                .sum();
            total / (num_classes - 1) as f64
        })
        .collect())
}

/// Number of exemplars kept from a class of `n` patches.
pub fn keep_count(eps: f64, n: usize) -> usize {
    // the small offset absorbs products like 0.29 * 100 = 28.999...
    (((eps * n as f64) + 1e-9).floor() as usize).clamp(1, n.max(1))
}

/// Ranks each class by reaching score (high first, ties by index) and keeps
/// the top `eps_nn` fraction.
pub fn nn_select(x: &Matrix, labels: &[usize], num_classes: usize, cfg: &NnSelectConfig) -> Result<ExemplarSet> {
    cfg.validate()?;
    if labels.len() != x.rows() {
        return Err(Error::DimMismatch {
            expected: x.rows(),
            got: labels.len(),
        });
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::invalid(format!("label {l} >= class count {num_classes}")));
        }
        members[l].push(i);
    }
    if let Some(c) = members.iter().position(Vec::is_empty) {
        return Err(Error::invalid(format!("class {c} has no patches")));
    }

    let coverage = coverage_sets(x, cfg.m_nn, cfg.search_mode());
    let unreached = max_pairwise_distance(x);
    let scores = reaching_scores(labels, num_classes, &coverage, unreached)?;
    Ok(select_top(&members, &scores, cfg.eps_nn))
}

pub(crate) fn select_top(members: &[Vec<usize>], scores: &[f64], eps: f64) -> ExemplarSet {
    let per_class = members
        .iter()
        .map(|idx| {
            let mut ranked = idx.clone();
            ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            ranked.truncate(keep_count(eps, idx.len()));
            ranked.sort_unstable();
            ranked
        })
        .collect();
    ExemplarSet { per_class }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exemplar::SearchMode;

    #[test]
    fn single_reach_at_distance_two() {
        // row 0 (class 0) is covered once by row 1 (class 1) at distance 2
        let labels = [0, 1];
        let coverage = vec![vec![(2.0, 1)], vec![(2.0, 0)]];
        let s = reaching_scores(&labels, 2, &coverage, 99.0).unwrap();
        assert_eq!(s, vec![2.0, 2.0]);
    }

    #[test]
    fn common_patch_scores_near_zero() {
        let labels = [0, 1, 1, 1];
        let coverage = vec![vec![(1e-9, 1)], vec![(1e-9, 0)], vec![(1e-9, 0)], vec![(1e-9, 0)]];
        let s = reaching_scores(&labels, 2, &coverage, 5.0).unwrap();
        assert!(s[0] < 1e-8);
    }

    #[test]
    fn never_reached_gets_max_distance() {
        // 1-D points: class 0 at 0 and 1, class 1 at 10; M = 1
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![10.0]]).unwrap();
        let labels = [0, 0, 1];
        let cov = coverage_sets(&x, 1, SearchMode::default());
        let s = reaching_scores(&labels, 2, &cov, max_pairwise_distance(&x)).unwrap();
        // row 0 is never reached by class 1 -> max pairwise distance 10
        assert_eq!(s[0], 10.0);
        // row 1 is reached by row 2 at distance 9
        assert_eq!(s[1], 9.0);
    }

    #[test]
    fn keep_counts() {
        assert_eq!(keep_count(0.1, 100), 10);
        assert_eq!(keep_count(0.29, 100), 29);
        assert_eq!(keep_count(0.1, 3), 1);
        assert_eq!(keep_count(1.0, 7), 7);
    }

    #[test]
    fn eps_one_keeps_everything() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![3.0], vec![7.0]]).unwrap();
        let cfg = NnSelectConfig {
            m_nn: 1,
            eps_nn: 1.0,
            ..Default::default()
        };
        let e = nn_select(&x, &[0, 1, 0, 1], 2, &cfg).unwrap();
        assert_eq!(e.per_class, vec![vec![0, 2], vec![1, 3]]);
    }

    #[test]
    fn empty_class_is_error() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(nn_select(&x, &[0, 0], 2, &NnSelectConfig::default()).is_err());
    }
}
