//! Randomized k-d forest for approximate nearest-neighbor search.
//!
//! Each tree splits on a dimension drawn at random from the few highest
//! variance dimensions of the node, at the node mean. Queries descend all
//! trees best-bin-first from a shared priority queue and stop after a budget
//! of distinct distance evaluations. When the budget is never exhausted the
//! search is exact.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mathkit::matrix::sq_dist;
use crate::mathkit::Matrix;

const LEAF_SIZE: usize = 8;
const TOP_VARIANCE_DIMS: usize = 5;
const VARIANCE_SAMPLE: usize = 128;

#[derive(Debug, Clone)]
enum Node {
    Leaf(Vec<usize>),
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
}

#[derive(Debug, Clone)]
pub struct KdForest<'a> {
    data: &'a Matrix,
    trees: Vec<Tree>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForestParams {
    pub trees: usize,
    /// Maximum distinct points whose distance is evaluated per query.
    pub checks: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            trees: 4,
            checks: 512,
            seed: 0x5eed,
        }
    }
}

impl<'a> KdForest<'a> {
    pub fn build(data: &'a Matrix, trees: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trees = (0..trees.max(1))
            .map(|_| {
                let mut t = Tree { nodes: Vec::new() };
                let idx: Vec<usize> = (0..data.rows()).collect();
                build_node(data, idx, &mut t.nodes, &mut rng);
                t
            })
            .collect();
        Self { data, trees }
    }

    /// Up to `k` neighbors of row `query` (itself excluded), sorted by
    /// `(squared distance, index)`.
    pub fn knn_of_row(&self, query: usize, k: usize, checks: usize) -> Vec<(f64, usize)> {
        self.knn(self.data.row(query), Some(query), k, checks)
    }

    pub fn knn(&self, q: &[f64], exclude: Option<usize>, k: usize, checks: usize) -> Vec<(f64, usize)> {
        let n = self.data.rows();
        let mut visited = vec![false; n];
        let mut best: BinaryHeap<Cand> = BinaryHeap::new();
        let mut queue: BinaryHeap<std::cmp::Reverse<Bin>> = BinaryHeap::new();
        let mut checked = 0usize;

        for (t, _) in self.trees.iter().enumerate() {
            queue.push(std::cmp::Reverse(Bin { bound: 0.0, tree: t, node: 0 }));
        }

        while let Some(std::cmp::Reverse(bin)) = queue.pop() {
            let full = best.len() == k;
            if full && bin.bound > best.peek().map_or(f64::INFINITY, |c| c.dist) {
                break;
            }
            if full && checked >= checks {
                break;
            }
            let tree = &self.trees[bin.tree];
            let mut node = bin.node;
            let bound = bin.bound;
            loop {
                match &tree.nodes[node] {
                    Node::Split { dim, value, left, right } => {
                        let diff = q[*dim] - value;
                        let (near, far) = if diff < 0.0 { (*left, *right) } else { (*right, *left) };
                        queue.push(std::cmp::Reverse(Bin {
                            bound: bound.max(diff * diff),
                            tree: bin.tree,
                            node: far,
                        }));
                        node = near;
                    }
                    Node::Leaf(points) => {
                        for &p in points {
                            if Some(p) == exclude || visited[p] {
                                continue;
                            }
                            visited[p] = true;
                            checked += 1;
                            let cand = Cand {
                                dist: sq_dist(q, self.data.row(p)),
                                idx: p,
                            };
                            if best.len() < k {
                                best.push(cand);
                            } else if cand < *best.peek().unwrap() {
                                best.pop();
                                best.push(cand);
                            }
                        }
                        break;
                    }
                }
            }
        }
        let mut out: Vec<(f64, usize)> = best.into_iter().map(|c| (c.dist, c.idx)).collect();
        out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
        out
    }
}

fn build_node(data: &Matrix, idx: Vec<usize>, nodes: &mut Vec<Node>, rng: &mut ChaCha8Rng) -> usize {
    let id = nodes.len();
    nodes.push(Node::Leaf(Vec::new()));
    if idx.len() <= LEAF_SIZE {
        nodes[id] = Node::Leaf(idx);
        return id;
    }
    let d = data.cols();
    let sample = &idx[..idx.len().min(VARIANCE_SAMPLE)];
    let mut mean = vec![0.0; d];
    for &i in sample {
        for (m, v) in mean.iter_mut().zip(data.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= sample.len() as f64);
    let mut var = vec![0.0; d];
    for &i in sample {
        for ((s, v), m) in var.iter_mut().zip(data.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let mut dims: Vec<usize> = (0..d).collect();
    dims.sort_by(|&a, &b| var[b].partial_cmp(&var[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let top = TOP_VARIANCE_DIMS.min(d);
    let dim = dims[rng.random_range(0..top)];
    let value = mean[dim];

    let (left, right): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| data[(i, dim)] < value);
    if left.is_empty() || right.is_empty() {
        // all values equal along the chosen axis; keep as an oversized leaf
        nodes[id] = Node::Leaf(idx);
        return id;
    }
    let l = build_node(data, left, nodes, rng);
    let r = build_node(data, right, nodes, rng);
    nodes[id] = Node::Split {
        dim,
        value,
        left: l,
        right: r,
    };
    id
}

#[derive(Debug, Clone, Copy)]
struct Cand {
    dist: f64,
    idx: usize,
}

impl PartialEq for Cand {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Cand {}
impl PartialOrd for Cand {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Cand {
    fn cmp(&self, o: &Self) -> Ordering {
        self.dist.total_cmp(&o.dist).then(self.idx.cmp(&o.idx))
    }
}

#[derive(Debug, Clone, Copy)]
struct Bin {
    bound: f64,
    tree: usize,
    node: usize,
}

impl PartialEq for Bin {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Bin {}
impl PartialOrd for Bin {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Bin {
    fn cmp(&self, o: &Self) -> Ordering {
        self.bound
            .total_cmp(&o.bound)
            .then(self.tree.cmp(&o.tree))
            .then(self.node.cmp(&o.node))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..n * d).map(|_| rng.random::<f64>()).collect();
        Matrix::from_vec(n, d, v).unwrap()
    }

    #[test]
    fn matches_brute_force_with_ample_budget() {
        let data = random(300, 6, 2);
        let forest = KdForest::build(&data, 4, 1);
        for q in (0..300).step_by(17) {
            let got = forest.knn_of_row(q, 7, usize::MAX);
            let mut all: Vec<(f64, usize)> = (0..300)
                .filter(|&j| j != q)
                .map(|j| (sq_dist(data.row(q), data.row(j)), j))
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            assert_eq!(got, all[..7].to_vec());
        }
    }

    #[test]
    fn small_budget_has_reasonable_recall() {
        let data = random(2000, 8, 5);
        let forest = KdForest::build(&data, 4, 3);
        let mut hit = 0;
        let mut total = 0;
        for q in (0..2000).step_by(40) {
            let got: Vec<usize> = forest.knn_of_row(q, 10, 400).into_iter().map(|c| c.1).collect();
            let mut all: Vec<(f64, usize)> = (0..2000)
                .filter(|&j| j != q)
                .map(|j| (sq_dist(data.row(q), data.row(j)), j))
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            total += 10;
            hit += all[..10].iter().filter(|c| got.contains(&c.1)).count();
        }
        let recall = hit as f64 / total as f64;
        assert!(recall >= 0.9, "recall {recall}");
    }
}
