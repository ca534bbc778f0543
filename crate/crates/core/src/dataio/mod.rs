//! Dataset manifests, grayscale images, scale pyramids and patches.

pub mod image;
pub mod manifest;
pub mod patch;
pub mod pyramid;

pub use self::image::{load_gray, save_gray, GrayImage};
pub use manifest::{load_manifest, DatasetManifest, ManifestEntry, Split};
pub use patch::{
    crop, extract_patches, grid_positions, normalize_patch, normalize_values, sample_spatial_neighbors,
    subsample_indices, Patch, PatchOrigin, PatchStore,
};
pub use pyramid::{build_pyramid, PyramidConfig};
