//! Single-layer discriminative and shareable filter learning.
//!
//! A layer owns a filter bank `W` (one filter per row) and maps an input
//! vector `x` to `|W x|`. Training minimizes a global reconstruction term
//! over unlabeled patches, a per-class reconstruction term restricted to the
//! filters each class selects, and a per-class nearest-neighbor triplet
//! hinge, alternating between the filters and the per-class selections.

pub mod cost;
pub mod greedy;
pub mod train;
pub mod triplet;

use serde::{Deserialize, Serialize};

pub use cost::{
    cost_discriminative, cost_shareable, cost_unsupervised, full_objective, w_step_objective, ObjectiveParts,
};
pub use greedy::{greedy_select_alpha, greedy_select_alpha_traced, GreedyStep};
pub use train::{init_filter_bank, step_w, train_layer, LayerTraining, StepReport};
pub use triplet::{refresh_triplets, TripletCache};

use crate::error::{Error, Result};
use crate::mathkit::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    /// `D x D0`, one filter per row.
    pub w: Matrix,
    pub layer_idx: usize,
}

impl FilterBank {
    pub fn new(w: Matrix, layer_idx: usize) -> Result<Self> {
        if w.rows() == 0 || w.cols() == 0 {
            return Err(Error::invalid("filter bank must be non-empty"));
        }
        if !w.is_finite() {
            return Err(Error::NonFinite("filter bank"));
        }
        Ok(Self { w, layer_idx })
    }

    pub fn num_filters(&self) -> usize {
        self.w.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    /// `|W x|`
    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut f = self.w.matvec(x)?;
        f.iter_mut().for_each(|v| *v = v.abs());
        Ok(f)
    }

    /// Row-wise transform of a batch.
    pub fn transform_rows(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        let mut z = x.mul_t(&self.w);
        z.as_mut_slice().iter_mut().for_each(|v| *v = v.abs());
        Ok(z)
    }
}

/// Free-function form of [`FilterBank::transform`].
pub fn transform(bank: &FilterBank, x: &[f64]) -> Result<Vec<f64>> {
    bank.transform(x)
}

/// Which filters one class uses while training.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SelectionMask {
    pub alpha: Vec<bool>,
}

impl SelectionMask {
    pub fn empty(d: usize) -> Self {
        Self { alpha: vec![false; d] }
    }

    pub fn full(d: usize) -> Self {
        Self { alpha: vec![true; d] }
    }

    pub fn from_active(d: usize, active: &[usize]) -> Self {
        let mut m = Self::empty(d);
        for &i in active {
            m.alpha[i] = true;
        }
        m
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.alpha.iter().filter(|&&a| a).count()
    }

    pub fn active(&self) -> Vec<usize> {
        (0..self.alpha.len()).filter(|&i| self.alpha[i]).collect()
    }

    pub(crate) fn as_f64(&self) -> Vec<f64> {
        self.alpha.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayerHyperparams {
    /// Spatial-consistency weight.
    pub xi: f64,
    /// Feature sparsity weight.
    pub lambda1: f64,
    /// Per-filter selection penalty.
    pub lambda2: f64,
    /// Shareable term weight.
    pub gamma: f64,
    /// Discriminative term weight.
    pub eta: f64,
    /// Hinge margin.
    pub delta: f64,
    /// Nearest neighbors per triplet set.
    pub k: usize,
    /// Spatial neighbors per patch.
    pub m: usize,
    /// Accepted L-BFGS iterations between triplet refreshes.
    pub nn_refresh_period: usize,
    /// Greedy selection stops when `L_sha` improves by less than this fraction.
    pub greedy_tol: f64,
    /// Cap on active filters per class; 0 means a quarter of the bank.
    pub max_active: usize,
    pub outer_rounds: usize,
    /// L-BFGS iterations for the unsupervised warm start.
    pub warm_iters: usize,
    /// L-BFGS iterations per filter update.
    pub w_iters: usize,
}

impl Default for LayerHyperparams {
    fn default() -> Self {
        Self {
            xi: 0.01,
            lambda1: 0.1,
            lambda2: 0.01,
            gamma: 1.0,
            eta: 0.1,
            delta: 1.0,
            k: 5,
            m: 2,
            nn_refresh_period: 50,
            greedy_tol: 1e-3,
            max_active: 0,
            outer_rounds: 5,
            warm_iters: 200,
            w_iters: 100,
        }
    }
}

impl LayerHyperparams {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("xi", self.xi),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("gamma", self.gamma),
            ("eta", self.eta),
        ];
        for (name, v) in weights {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.delta > 0.0) {
            return Err(Error::Config("delta must be > 0".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.nn_refresh_period == 0 {
            return Err(Error::Config("nn_refresh_period must be >= 1".into()));
        }
        Ok(())
    }

    /// Active-filter cap for a bank of `d` filters.
    pub fn active_cap(&self, d: usize) -> usize {
        if self.max_active == 0 {
            (d / 4).max(1)
        } else {
            self.max_active.min(d)
        }
    }
}

/// Inputs for training one layer.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    /// Unlabeled patches for the global term, `N x D0`.
    pub x_all: Matrix,
    /// `omega[m].row(i)` is the `m`-th spatial neighbor of `x_all.row(i)`.
    pub omega: Vec<Matrix>,
    /// Exemplars of all classes stacked, `N_ex x D0`.
    pub exemplars: Matrix,
    pub ex_labels: Vec<usize>,
    pub num_classes: usize,
}

impl TrainBatch {
    pub fn new(
        x_all: Matrix,
        omega: Vec<Matrix>,
        exemplars: Matrix,
        ex_labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let d0 = x_all.cols();
        for o in &omega {
            if o.rows() != x_all.rows() || o.cols() != d0 {
                return Err(Error::invalid("spatial neighbor block shape differs from patches"));
            }
        }
        if exemplars.rows() != ex_labels.len() {
            return Err(Error::DimMismatch {
                expected: exemplars.rows(),
                got: ex_labels.len(),
            });
        }
        if exemplars.rows() > 0 && exemplars.cols() != d0 {
            return Err(Error::DimMismatch {
                expected: d0,
                got: exemplars.cols(),
            });
        }
        if let Some(&l) = ex_labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {l} >= class count {num_classes}")));
        }
        if !x_all.is_finite() || !exemplars.is_finite() || omega.iter().any(|o| !o.is_finite()) {
            return Err(Error::NonFinite("training batch"));
        }
        Ok(Self {
            x_all,
            omega,
            exemplars,
            ex_labels,
            num_classes,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.x_all.cols()
    }

    /// Exemplar row indices of each class.
    pub fn class_members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.ex_labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}
