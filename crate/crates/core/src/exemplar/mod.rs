//! Exemplar selection: which training patches a layer learns from.
//!
//! Two strategies are provided. Nearest-neighbor selection ranks patches by
//! how far other classes have to reach to cover them and drops the common
//! ones. SVM selection grows per-class discriminative clusters and drops the
//! ones that are noisy or fire everywhere.

pub mod coverage;
pub mod kdforest;
pub mod reaching;
pub mod svm_select;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use coverage::{coverage_sets, max_pairwise_distance, SearchMode};
pub use kdforest::ForestParams;
pub use reaching::{keep_count, nn_select, reaching_scores};
pub use svm_select::{split_candidates, svm_select, Cluster, SvmSelection};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NnSelectConfig {
    /// Coverage-set size.
    pub m_nn: usize,
    /// Fraction of each class kept.
    pub eps_nn: f64,
    /// Use the randomized k-d forest instead of exact search.
    pub approx: bool,
    pub trees: usize,
    pub checks: usize,
    pub shard_size: usize,
}

impl Default for NnSelectConfig {
    fn default() -> Self {
        Self {
            m_nn: 10,
            eps_nn: 0.1,
            approx: false,
            trees: 4,
            checks: 512,
            shard_size: 4096,
        }
    }
}

impl NnSelectConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_nn == 0 {
            return Err(Error::invalid("m_nn must be at least 1"));
        }
        if !(self.eps_nn > 0.0 && self.eps_nn <= 1.0) {
            return Err(Error::invalid("eps_nn must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn search_mode(&self) -> SearchMode {
        if self.approx {
            SearchMode::Approx(ForestParams {
                trees: self.trees,
                checks: self.checks,
                ..Default::default()
            })
        } else {
            SearchMode::Exact {
                shard_size: self.shard_size,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvmSelectConfig {
    /// Initial clusters per class; 0 means `N_c / 20`.
    pub clusters_per_class: usize,
    pub m_svm: usize,
    pub eps_svm: usize,
    pub max_rounds: usize,
    pub lambda_reg: f64,
    pub epochs: usize,
    pub negative_cap: usize,
    pub kmeans_iters: usize,
}

impl Default for SvmSelectConfig {
    fn default() -> Self {
        Self {
            clusters_per_class: 0,
            m_svm: 10,
            eps_svm: 3,
            max_rounds: 5,
            lambda_reg: 1e-2,
            epochs: 5,
            negative_cap: 5000,
            kmeans_iters: 20,
        }
    }
}

impl SvmSelectConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eps_svm == 0 || self.m_svm < self.eps_svm {
            return Err(Error::invalid("need m_svm >= eps_svm >= 1"));
        }
        Ok(())
    }

    pub fn clusters_for(&self, class_size: usize) -> usize {
        let k = if self.clusters_per_class == 0 {
            class_size / 20
        } else {
            self.clusters_per_class
        };
        k.clamp(1, class_size.max(1))
    }
}

/// Per-class lists of row indices into the patch store.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ExemplarSet {
    pub per_class: Vec<Vec<usize>>,
}

impl ExemplarSet {
    pub fn total(&self) -> usize {
        self.per_class.iter().map(Vec::len).sum()
    }

    /// All `(class_id, index)` pairs, class-major.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.per_class
            .iter()
            .enumerate()
            .flat_map(|(c, v)| v.iter().map(move |&i| (c, i)))
    }

    /// Checks every index is in range and carries its bucket's label.
    pub fn validate(&self, labels: &[usize]) -> Result<()> {
        for (c, i) in self.pairs() {
            match labels.get(i) {
                Some(&l) if l == c => {}
                Some(&l) => {
                    return Err(Error::invalid(format!(
                        "exemplar {i} filed under class {c} but labeled {l}"
                    )))
                }
                None => return Err(Error::invalid(format!("exemplar index {i} out of range"))),
            }
        }
        Ok(())
    }

    /// `class_id<TAB>patch_index` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (c, i) in self.pairs() {
            let _ = writeln!(s, "{c}\t{i}");
        }
        s
    }

    pub fn parse(text: &str, num_classes: usize, origin: &Path) -> Result<Self> {
        let mut per_class = vec![Vec::new(); num_classes];
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                msg,
            };
            let (c, i) = line
                .split_once('\t')
                .ok_or_else(|| err("expected class_id<TAB>patch_index".into()))?;
            let c: usize = c.parse().map_err(|e| err(format!("bad class id: {e}")))?;
            let i: usize = i.trim().parse().map_err(|e| err(format!("bad patch index: {e}")))?;
            if c >= num_classes {
                return Err(err(format!("class {c} >= class count {num_classes}")));
            }
            per_class[c].push(i);
        }
        Ok(Self { per_class })
    }
}
