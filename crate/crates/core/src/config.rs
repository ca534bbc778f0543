//! Pipeline configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsfl::LayerHyperparams;
use crate::encode::EncodeConfig;
use crate::error::{Error, Result};
use crate::exemplar::{NnSelectConfig, SvmSelectConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Manifest path, relative to the config file.
    pub manifest: Option<PathBuf>,
    /// Side of a first-layer patch in pixels.
    pub patch_size: usize,
    pub pyramid_factor: f64,
    /// Training patches kept per image, drawn across all scales.
    pub patches_per_image: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            patch_size: 16,
            pyramid_factor: std::f64::consts::FRAC_1_SQRT_2,
            patches_per_image: 4000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ExemplarMethod {
    #[default]
    Nn,
    Svm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExemplarConfig {
    pub method: ExemplarMethod,
    pub nn: NnSelectConfig,
    pub svm: SvmSelectConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayerConfig {
    pub num_filters: usize,
    /// Input dimension after PCA; unused by the first layer.
    pub pca_dim: usize,
    /// Rows used to fit the PCA.
    pub pca_samples: usize,
    pub num_scales: usize,
    /// Anchor step in pixels of the scaled image.
    pub stride: usize,
    /// Side of the grid of lower-layer positions combined into one input.
    pub grid: usize,
    pub hyper: LayerHyperparams,
}

impl Default for LayerConfig {
    fn default() -> Self {
        Self {
            num_filters: 400,
            pca_dim: 300,
            pca_samples: 20_000,
            num_scales: 6,
            stride: 3,
            grid: 3,
            hyper: LayerHyperparams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub lambda_reg: f64,
    pub epochs: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            lambda_reg: 1e-4,
            epochs: 30,
        }
    }
}

/// Candidate values for the sequential hyperparameter search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub xi: Vec<f64>,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub gamma: Vec<f64>,
    pub eta: Vec<f64>,
    /// Share of each class's training images held out for validation when
    /// the manifest has no `val` split.
    pub val_fraction: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            xi: vec![0.0, 0.01, 0.1, 1.0],
            lambda1: vec![0.0, 0.01, 0.1, 1.0],
            lambda2: vec![0.001, 0.01, 0.1],
            gamma: vec![0.1, 1.0, 10.0],
            eta: vec![0.01, 0.1, 1.0],
            val_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Random train/test resamplings to average over.
    pub splits: usize,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub exemplars: ExemplarConfig,
    pub layers: Vec<LayerConfig>,
    pub encode: EncodeConfig,
    pub classifier: ClassifierConfig,
    pub sweep: SweepConfig,
    pub run: RunConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let layer = |num_scales, stride| LayerConfig {
            num_scales,
            stride,
            ..Default::default()
        };
        Self {
            data: DataConfig::default(),
            exemplars: ExemplarConfig::default(),
            layers: vec![layer(6, 3), layer(5, 6), layer(3, 6)],
            encode: EncodeConfig::default(),
            classifier: ClassifierConfig::default(),
            sweep: SweepConfig::default(),
            run: RunConfig {
                splits: 1,
                ..Default::default()
            },
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file, applies `key=value` overrides and resolves the
    /// manifest path against the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut value: toml::Value = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: Self = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(m) = &cfg.data.manifest {
            if m.is_relative() {
                let base = path.parent().unwrap_or(Path::new(""));
                cfg.data.manifest = Some(base.join(m));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let d = &self.data;
        if d.patch_size < 2 {
            return bad("data.patch_size must be at least 2".into());
        }
        if !(d.pyramid_factor > 0.0 && d.pyramid_factor <= 1.0) {
            return bad("data.pyramid_factor must lie in (0, 1]".into());
        }
        if d.patches_per_image == 0 {
            return bad("data.patches_per_image must be positive".into());
        }
        self.exemplars.nn.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.exemplars.svm.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.layers.is_empty() {
            return bad("at least one [[layers]] entry is required".into());
        }
        for (l, lc) in self.layers.iter().enumerate() {
            let n = l + 1;
            if lc.num_filters == 0 || lc.num_scales == 0 || lc.stride == 0 {
                return bad(format!("layer {n}: num_filters, num_scales and stride must be positive"));
            }
            lc.hyper.validate().map_err(|e| Error::Config(format!("layer {n}: {e}")))?;
            if l > 0 {
                if lc.grid == 0 {
                    return bad(format!("layer {n}: grid must be positive"));
                }
                let agg = lc.grid * lc.grid * self.layers[l - 1].num_filters;
                if lc.pca_dim == 0 || lc.pca_dim > agg {
                    return bad(format!("layer {n}: pca_dim must lie in 1..={agg}"));
                }
                if lc.pca_samples < 2 {
                    return bad(format!("layer {n}: pca_samples must be at least 2"));
                }
            }
        }
        self.encode.validate()?;
        if !(self.classifier.lambda_reg > 0.0) || self.classifier.epochs == 0 {
            return bad("classifier needs lambda_reg > 0 and epochs >= 1".into());
        }
        if !(self.sweep.val_fraction > 0.0 && self.sweep.val_fraction < 1.0) {
            return bad("sweep.val_fraction must lie in (0, 1)".into());
        }
        if self.run.splits == 0 {
            return bad("run.splits must be at least 1".into());
        }
        Ok(())
    }

    pub fn manifest_path(&self) -> Result<&Path> {
        self.data
            .manifest
            .as_deref()
            .ok_or_else(|| Error::Config("data.manifest is not set".into()))
    }
}

/// Sets a dotted key such as `encode.knn=3` or `layers.0.hyper.xi=0.1`;
/// `layers.*.x` sets `x` on every layer. The value is parsed as a TOML
/// value and falls back to a plain string.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    set_path(root, &parts, &value, key)
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(node: &mut toml::Value, parts: &[&str], value: &toml::Value, key: &str) -> Result<()> {
    let (head, rest) = parts.split_first().expect("non-empty path");
    match node {
        toml::Value::Table(t) => {
            if rest.is_empty() {
                t.insert(head.to_string(), value.clone());
                return Ok(());
            }
            if !t.contains_key(*head) {
                if *head == "layers" {
                    // materialize the default stack so indices have targets
                    let defaults = toml::Value::try_from(PipelineConfig::default().layers).expect("layers serialize");
                    t.insert("layers".into(), defaults);
                } else {
                    t.insert(head.to_string(), toml::Value::Table(toml::Table::new()));
                }
            }
            set_path(t.get_mut(*head).expect("inserted"), rest, value, key)
        }
        toml::Value::Array(items) => {
            if *head == "*" {
                for item in items.iter_mut() {
                    set_path_or_leaf(item, rest, value, key)?;
                }
                return Ok(());
            }
            let i: usize = head
                .parse()
                .map_err(|_| Error::Config(format!("override {key:?}: {head:?} is not an index")))?;
            let n = items.len();
            let item = items
                .get_mut(i)
                .ok_or_else(|| Error::Config(format!("override {key:?}: index {i} out of range ({n} entries)")))?;
            set_path_or_leaf(item, rest, value, key)
        }
        _ => Err(Error::Config(format!("override {key:?}: {head:?} is not a table"))),
    }
}

fn set_path_or_leaf(node: &mut toml::Value, rest: &[&str], value: &toml::Value, key: &str) -> Result<()> {
    if rest.is_empty() {
        *node = value.clone();
        Ok(())
    } else {
        set_path(node, rest, value, key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_constants() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(c.layers.len(), 3);
        assert!(c.layers.iter().all(|l| l.num_filters == 400 && l.pca_dim == 300));
        assert_eq!(c.layers.iter().map(|l| l.num_scales).collect::<Vec<_>>(), vec![6, 5, 3]);
        assert_eq!(c.layers.iter().map(|l| l.stride).collect::<Vec<_>>(), vec![3, 6, 6]);
        assert_eq!(c.encode.codebook_size, 2000);
        assert_eq!(c.exemplars.nn.eps_nn, 0.1);
        assert_eq!(c.layers[0].hyper.k, 5);
        assert_eq!(c.layers[0].hyper.delta, 1.0);
    }

    #[test]
    fn toml_roundtrip_and_unknown_keys() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(PipelineConfig::from_toml("[data]\nbogus = 1\n").is_err());
    }

    #[test]
    fn overrides() {
        let mut v: toml::Value = toml::from_str("[encode]\nknn = 5\n").unwrap();
        apply_override(&mut v, "encode.knn=3").unwrap();
        apply_override(&mut v, "layers.*.hyper.xi=0.5").unwrap();
        apply_override(&mut v, "layers.1.num_filters=7").unwrap();
        let c: PipelineConfig = v.try_into().unwrap();
        assert_eq!(c.encode.knn, 3);
        assert!(c.layers.iter().all(|l| l.hyper.xi == 0.5));
        assert_eq!(c.layers[1].num_filters, 7);
        let mut v: toml::Value = toml::from_str("").unwrap();
        assert!(apply_override(&mut v, "layers.9.stride=1").is_err());
        assert!(apply_override(&mut v, "nonsense").is_err());
    }

    #[test]
    fn contradictions_are_rejected() {
        let mut c = PipelineConfig::default();
        c.layers[1].pca_dim = 10_000;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = PipelineConfig::default();
        c.encode.knn = 0;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.layers.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.run.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
