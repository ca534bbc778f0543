//! Numerical primitives shared by the learners.

pub mod kmeans;
pub mod lbfgs;
pub mod matrix;
pub mod pca;

pub use kmeans::{kmeans, KMeansResult};
pub use lbfgs::{check_gradient, lbfgs_minimize, LbfgsParams, LbfgsResult};
pub use matrix::Matrix;
pub use pca::{pca_fit, pca_fit_with_spectrum, PcaModel};
