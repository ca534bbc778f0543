use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ExemplarSet, SvmSelectConfig};
use crate::error::{Error, Result};
use crate::mathkit::{kmeans, Matrix};
use crate::svmlite::train_binary;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cluster {
    pub class_id: usize,
    /// Index of the k-means cluster this one descends from.
    pub origin: usize,
    /// Global row indices.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SvmSelection {
    pub exemplars: ExemplarSet,
    /// Clusters as seeded by k-means, before any round.
    pub initial: Vec<Cluster>,
    pub clusters: Vec<Cluster>,
    /// Cluster count before the first round and after each round.
    pub cluster_counts: Vec<usize>,
    pub rounds: usize,
    pub converged: bool,
}

/// Splits each class's candidates into two equal halves.
pub fn split_candidates(labels: &[usize], num_classes: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Vec::new();
    let mut b = Vec::new();
    for c in 0..num_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        // Fisher-Yates with the seeded generator
        for i in (1..idx.len()).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        let half = idx.len().div_ceil(2);
        a.extend_from_slice(&idx[..half]);
        b.extend_from_slice(&idx[half..]);
    }
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

/// Discriminative clustering with per-cluster linear SVMs.
///
/// Clusters start from per-class k-means on `train`. Each round trains one
/// SVM per cluster (members positive, sampled other-class rows negative) and
/// scores the held-out half. A cluster is dropped when it fires on fewer
/// than `eps_svm` same-class rows, or when more than `ceil(C/2)` classes each
/// have at least `eps_svm` fired rows. Survivors take their top `m_svm`
/// fired same-class rows as new members, and the halves swap.
pub fn svm_select(
    x: &Matrix,
    labels: &[usize],
    num_classes: usize,
    train: &[usize],
    val: &[usize],
    cfg: &SvmSelectConfig,
    seed: u64,
) -> Result<SvmSelection> {
    cfg.validate()?;
    if labels.len() != x.rows() {
        return Err(Error::DimMismatch {
            expected: x.rows(),
            got: labels.len(),
        });
    }
    for c in 0..num_classes {
        let in_train = train.iter().any(|&i| labels[i] == c);
        let in_val = val.iter().any(|&i| labels[i] == c);
        if !in_train || !in_val {
            return Err(Error::invalid(format!(
                "class {c} needs candidates in both halves"
            )));
        }
    }

    let initial = initial_clusters(x, labels, num_classes, train, cfg, seed)?;
    let mut clusters = initial.clone();
    let mut cluster_counts = vec![clusters.len()];
    let halves = [train, val];
    let mut cur = 0;
    let mut two_back: Option<Vec<Cluster>> = None;
    let mut converged = false;
    let mut rounds = 0;
    let class_limit = num_classes.div_ceil(2);

    while rounds < cfg.max_rounds {
        let (tr, va) = (halves[cur], halves[1 - cur]);
        let mut survivors = Vec::with_capacity(clusters.len());
        for (k, cl) in clusters.iter().enumerate() {
            let round_seed = seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add((rounds as u64) << 32)
                .wrapping_add(k as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(round_seed);
            let pool: Vec<usize> = tr.iter().copied().filter(|&i| labels[i] != cl.class_id).collect();
            let neg_idx: Vec<usize> = if pool.len() > cfg.negative_cap {
                let mut s: Vec<usize> = sample(&mut rng, pool.len(), cfg.negative_cap)
                    .into_iter()
                    .map(|p| pool[p])
                    .collect();
                s.sort_unstable();
                s
            } else {
                pool
            };
            let pos = x.select_rows(&cl.members);
            let neg = x.select_rows(&neg_idx);
            let model = train_binary(&pos, &neg, cfg.lambda_reg, cfg.epochs, round_seed)?;

            let mut fired_per_class = vec![0usize; num_classes];
            let mut same: Vec<(f64, usize)> = Vec::new();
            for &i in va {
                let s = model.score(x.row(i))?;
                if s > -1.0 {
                    fired_per_class[labels[i]] += 1;
                    if labels[i] == cl.class_id {
                        same.push((s, i));
                    }
                }
            }
            if same.len() < cfg.eps_svm {
                continue;
            }
            let classes_fired = fired_per_class.iter().filter(|&&n| n >= cfg.eps_svm).count();
            if classes_fired > class_limit {
                continue;
            }
            same.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            same.truncate(cfg.m_svm);
            let mut members: Vec<usize> = same.into_iter().map(|(_, i)| i).collect();
            members.sort_unstable();
            survivors.push(Cluster {
                class_id: cl.class_id,
                origin: cl.origin,
                members,
            });
        }
        rounds += 1;
        cluster_counts.push(survivors.len());
        // members alternate halves, so compare with the round before last
        let stable = two_back.as_ref().is_some_and(|old| *old == survivors);
        two_back = Some(std::mem::replace(&mut clusters, survivors));
        cur = 1 - cur;
        if stable {
            converged = true;
            break;
        }
    }

    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for cl in &clusters {
        per_class[cl.class_id].extend_from_slice(&cl.members);
    }
    for v in &mut per_class {
        v.sort_unstable();
        v.dedup();
    }
    Ok(SvmSelection {
        exemplars: ExemplarSet { per_class },
        initial,
        clusters,
        cluster_counts,
        rounds,
        converged,
    })
}

fn initial_clusters(
    x: &Matrix,
    labels: &[usize],
    num_classes: usize,
    train: &[usize],
    cfg: &SvmSelectConfig,
    seed: u64,
) -> Result<Vec<Cluster>> {
    let mut clusters = Vec::new();
    for c in 0..num_classes {
        let idx: Vec<usize> = train.iter().copied().filter(|&i| labels[i] == c).collect();
        let k = cfg.clusters_for(idx.len());
        let km = kmeans(&x.select_rows(&idx), k, cfg.kmeans_iters, seed.wrapping_add(c as u64))?;
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (pos, &a) in km.assignment.iter().enumerate() {
            groups[a].push(idx[pos]);
        }
        for (origin, members) in groups.into_iter().enumerate() {
            if !members.is_empty() {
                clusters.push(Cluster {
                    class_id: c,
                    origin,
                    members,
                });
            }
        }
    }
    Ok(clusters)
}
