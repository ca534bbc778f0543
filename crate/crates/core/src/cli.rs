//! Command-line driver. Each stage reads its inputs from and writes its
//! outputs to the output directory, so stages can be run one at a time or
//! all at once with `pipeline`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::PipelineConfig;
use crate::dataio::{load_gray, load_manifest, DatasetManifest, ManifestEntry, Split};
use crate::deepstack::{
    build_codebooks, collect_layer_pool, derive_seed, extract_features, fit_classifier, load_model, load_patch_store,
    read_feature_blocks, save_model, save_patch_store, select_exemplars, train_deep_images, train_stack,
    write_feature_blocks, DeepModel, FeatureBlock, LayerPool, TrainImages,
};
use crate::encode::{describe_images, load_descriptors, save_descriptors, Metrics};
use crate::error::{Error, Result};
use crate::exemplar::ExemplarSet;
use crate::mathkit::Matrix;
use crate::persist::write_atomic;
use crate::synth::{write_dataset, SynthConfig};

pub const PATCHES_FILE: &str = "patches.bin";
pub const EXEMPLARS_FILE: &str = "exemplars.tsv";
pub const MODEL_FILE: &str = "model.bin";
pub const TRAIN_REPORT_FILE: &str = "train_report.tsv";
pub const DESCRIPTORS_FILE: &str = "descriptors.bin";
pub const DESCRIPTORS_INDEX_FILE: &str = "descriptors.idx";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const SUMMARY_FILE: &str = "summary.tsv";
pub const SWEEP_FILE: &str = "sweep.tsv";
pub const BEST_CONFIG_FILE: &str = "best_config.toml";

pub fn features_file(layer: usize) -> String {
    format!("features_l{}.bin", layer + 1)
}

#[derive(Debug, Parser)]
#[command(name = "ddsfl", version, about = "Discriminative and shareable feature learning pipeline")]
pub struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores); overrides `run.threads`.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Random train/test resamplings for `pipeline`; overrides `run.splits`.
    #[arg(long, global = true)]
    pub splits: Option<usize>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Config override such as `encode.knn=3` or `layers.*.hyper.xi=0.1`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample first-layer training patches.
    Patches,
    /// Select first-layer exemplars from the sampled patches.
    Exemplars,
    /// Train every layer of the stack.
    Train {
        /// Keep the random initial filters (baseline).
        #[arg(long)]
        random_filters: bool,
    },
    /// Export dense per-layer features of every manifest image.
    Extract,
    /// Learn one codebook per layer from exported training features.
    Codebook,
    /// Compute global descriptors of every manifest image.
    Encode,
    /// Fit the one-vs-rest classifier on training descriptors.
    FitClassifier,
    /// Classify the test split and write metrics.
    Evaluate,
    /// Run every stage in order.
    Pipeline {
        #[arg(long)]
        random_filters: bool,
    },
    /// Tune the layer hyperparameters one after another on a validation split.
    Sweep,
    /// Write a synthetic oriented-grating dataset and a matching config.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 10)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0.35)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.12)]
    pub contrast: f64,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric(_) | Error::NonFinite(_) => 4,
        _ => 3,
    }
}

/// Everything a stage needs.
pub struct Stage {
    pub cfg: PipelineConfig,
    pub manifest: DatasetManifest,
    pub seed: u64,
    pub out: PathBuf,
}

impl Stage {
    pub fn new(cfg: PipelineConfig, manifest: DatasetManifest, seed: u64, out: PathBuf) -> Self {
        Self {
            cfg,
            manifest,
            seed,
            out,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn require(&self, name: &str, stage: &'static str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact { stage, path: p })
        }
    }

    fn train_images(&self) -> Result<TrainImages> {
        TrainImages::load(&self.manifest, Split::Train)
    }

    fn model(&self) -> Result<DeepModel> {
        load_model(&self.require(MODEL_FILE, "train")?)
    }

    pub fn patches(&self) -> Result<()> {
        let images = self.train_images()?;
        let pool = collect_layer_pool(&images, &[], &self.cfg, self.seed)?;
        log::info!("sampled {} patches from {} images", pool.store.len(), images.len());
        save_patch_store(&pool.store, &self.path(PATCHES_FILE))
    }

    pub fn exemplars(&self) -> Result<()> {
        let store = load_patch_store(&self.require(PATCHES_FILE, "patches")?)?;
        let set = select_exemplars(&store, self.manifest.num_classes, &self.cfg.exemplars, self.seed, 0)?;
        log::info!("kept {} of {} patches as exemplars", set.total(), store.len());
        write_atomic(&self.path(EXEMPLARS_FILE), set.to_text().as_bytes())
    }

    pub fn train(&self, random_filters: bool) -> Result<()> {
        let store = load_patch_store(&self.require(PATCHES_FILE, "patches")?)?;
        let ex_path = self.require(EXEMPLARS_FILE, "exemplars")?;
        let text = std::fs::read_to_string(&ex_path).map_err(|e| Error::io(&ex_path, e))?;
        let exemplars = ExemplarSet::parse(&text, self.manifest.num_classes, &ex_path)?;
        exemplars.validate(&store.labels())?;
        let images = self.train_images()?;
        let pool = LayerPool { store, pca: None };
        let (layers, reports) = train_stack(&images, &pool, &exemplars, &self.cfg, self.seed, random_filters)?;
        let model = DeepModel {
            layers,
            pyramid_factor: self.cfg.data.pyramid_factor,
            codebooks: Vec::new(),
            encoding: self.cfg.encode.coding(),
            classifier: None,
        };
        save_model(&model, &self.path(MODEL_FILE))?;
        let mut text = String::from("layer\tpool\texemplars\trounds\tconverged\trolled_back\tobjective\n");
        for r in &reports {
            let obj = r.objective.last().copied().unwrap_or(f64::NAN);
            let _ = writeln!(
                text,
                "{}\t{}\t{}\t{}\t{}\t{}\t{obj:.9e}",
                r.layer + 1,
                r.pool_size,
                r.exemplars,
                r.rounds,
                r.converged,
                r.rolled_back
            );
        }
        write_atomic(&self.path(TRAIN_REPORT_FILE), text.as_bytes())
    }

    pub fn extract(&self) -> Result<()> {
        let model = self.model()?;
        let images = self
            .manifest
            .entries
            .iter()
            .map(|e| load_gray(&self.manifest.resolve(e)))
            .collect::<Result<Vec<_>>>()?;
        for l in 0..model.layers.len() {
            use rayon::prelude::*;
            let maps = images
                .par_iter()
                .map(|img| extract_features(img, &model, l))
                .collect::<Result<Vec<_>>>()?;
            let mut blocks = Vec::new();
            for (e, fm) in self.manifest.entries.iter().zip(maps) {
                for s in fm.scales {
                    blocks.push(FeatureBlock {
                        image: e.path.clone(),
                        scale: s.scale_idx,
                        features: s.features,
                    });
                }
            }
            write_feature_blocks(&self.path(&features_file(l)), &blocks)?;
        }
        Ok(())
    }

    pub fn codebook(&self) -> Result<()> {
        let mut model = self.model()?;
        let train: Vec<&str> = self.manifest.split(Split::Train).map(|e| e.path.as_str()).collect();
        let mut per_layer = Vec::with_capacity(model.layers.len());
        for l in 0..model.layers.len() {
            let blocks = read_feature_blocks(&self.require(&features_file(l), "extract")?)?;
            let mut by_image: HashMap<&str, Matrix> = HashMap::new();
            for b in &blocks {
                let m = by_image
                    .entry(b.image.as_str())
                    .or_insert_with(|| Matrix::zeros(0, b.features.cols()));
                for r in b.features.iter_rows() {
                    m.push_row(r)?;
                }
            }
            let feats = train
                .iter()
                .map(|p| {
                    by_image.remove(p).ok_or_else(|| Error::MissingArtifact {
                        stage: "extract",
                        path: self.path(&features_file(l)),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            per_layer.push(feats);
        }
        model.codebooks = build_codebooks(&per_layer, &self.cfg, self.seed)?;
        model.classifier = None;
        save_model(&model, &self.path(MODEL_FILE))
    }

    pub fn encode(&self) -> Result<()> {
        let model = self.model()?;
        if model.codebooks.is_empty() {
            return Err(Error::MissingArtifact {
                stage: "codebook",
                path: self.path(MODEL_FILE),
            });
        }
        let images = self
            .manifest
            .entries
            .iter()
            .map(|e| load_gray(&self.manifest.resolve(e)))
            .collect::<Result<Vec<_>>>()?;
        let desc = describe_images(&images, &model)?;
        save_descriptors(
            &self.path(DESCRIPTORS_FILE),
            &self.path(DESCRIPTORS_INDEX_FILE),
            &desc,
            &self.manifest.entries,
        )
    }

    fn descriptors(&self) -> Result<(Matrix, Vec<ManifestEntry>)> {
        let (m, entries) = load_descriptors(
            &self.require(DESCRIPTORS_FILE, "encode")?,
            &self.require(DESCRIPTORS_INDEX_FILE, "encode")?,
        )?;
        if entries != self.manifest.entries {
            return Err(Error::invalid("descriptors were computed for a different manifest; run `encode` again"));
        }
        Ok((m, entries))
    }

    pub fn fit_classifier(&self) -> Result<()> {
        let mut model = self.model()?;
        let (desc, entries) = self.descriptors()?;
        let rows: Vec<usize> = (0..entries.len()).filter(|&i| entries[i].split == Split::Train).collect();
        let labels: Vec<usize> = rows.iter().map(|&i| entries[i].class_id).collect();
        model.classifier = Some(fit_classifier(
            &desc.select_rows(&rows),
            &labels,
            self.manifest.num_classes,
            &self.cfg,
            self.seed,
        )?);
        save_model(&model, &self.path(MODEL_FILE))
    }

    pub fn evaluate(&self) -> Result<Metrics> {
        let model = self.model()?;
        let classifier = model.classifier.as_ref().ok_or_else(|| Error::MissingArtifact {
            stage: "fit-classifier",
            path: self.path(MODEL_FILE),
        })?;
        let (desc, entries) = self.descriptors()?;
        let rows: Vec<usize> = (0..entries.len()).filter(|&i| entries[i].split == Split::Test).collect();
        if rows.is_empty() {
            return Err(Error::invalid("manifest has no test images"));
        }
        let truth: Vec<usize> = rows.iter().map(|&i| entries[i].class_id).collect();
        let predicted = rows
            .iter()
            .map(|&i| classifier.predict(desc.row(i)))
            .collect::<Result<Vec<_>>>()?;
        let metrics = Metrics::from_predictions(&truth, &predicted, self.manifest.num_classes)?;
        write_atomic(&self.path(METRICS_FILE), metrics.report().as_bytes())?;
        write_atomic(&self.path(CONFUSION_FILE), metrics.confusion_csv().as_bytes())?;
        Ok(metrics)
    }

    /// Every stage in order.
    pub fn pipeline(&self, random_filters: bool) -> Result<Metrics> {
        self.patches()?;
        self.exemplars()?;
        self.train(random_filters)?;
        self.extract()?;
        self.codebook()?;
        self.encode()?;
        self.fit_classifier()?;
        self.evaluate()
    }
}

/// Reassigns each class's train and test images at random, keeping the
/// per-class counts; `val` entries are untouched.
pub fn resplit_manifest(manifest: &DatasetManifest, seed: u64) -> Result<DatasetManifest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = manifest.entries.clone();
    for c in 0..manifest.num_classes {
        let idx: Vec<usize> = (0..entries.len())
            .filter(|&i| entries[i].class_id == c && entries[i].split != Split::Val)
            .collect();
        let n_train = idx.iter().filter(|&&i| entries[i].split == Split::Train).count();
        let mut order = idx.clone();
        order.shuffle(&mut rng);
        for (k, &i) in order.iter().enumerate() {
            entries[i].split = if k < n_train { Split::Train } else { Split::Test };
        }
    }
    DatasetManifest::new(entries, manifest.root.clone())
}

/// Moves a `fraction` of each class's training images into `val`, unless
/// the manifest already has a validation split.
pub fn carve_validation(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if manifest.count(Split::Val) > 0 {
        return Ok(manifest.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = manifest.entries.clone();
    for c in 0..manifest.num_classes {
        let mut idx: Vec<usize> = (0..entries.len())
            .filter(|&i| entries[i].class_id == c && entries[i].split == Split::Train)
            .collect();
        idx.shuffle(&mut rng);
        let n_val = ((idx.len() as f64 * fraction).ceil() as usize).min(idx.len().saturating_sub(1));
        for &i in &idx[..n_val] {
            entries[i].split = Split::Val;
        }
    }
    DatasetManifest::new(entries, manifest.root.clone())
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// `pipeline` over `splits` random resamplings, with a mean and standard
/// deviation summary. A single split uses the manifest as given.
pub fn run_pipeline(cfg: &PipelineConfig, manifest: &DatasetManifest, seed: u64, out: &Path, splits: usize, random_filters: bool) -> Result<Vec<Metrics>> {
    if splits <= 1 {
        let m = Stage::new(cfg.clone(), manifest.clone(), seed, out.to_path_buf()).pipeline(random_filters)?;
        return Ok(vec![m]);
    }
    let mut all = Vec::with_capacity(splits);
    for k in 0..splits {
        let split_seed = derive_seed(seed, 0x5b11, k as u64);
        let m = resplit_manifest(manifest, split_seed)?;
        let dir = out.join(format!("split_{k}"));
        write_atomic(&dir.join("manifest.tsv"), m.to_text().as_bytes())?;
        let metrics = Stage::new(cfg.clone(), m, split_seed, dir).pipeline(random_filters)?;
        log::info!("split {k}: accuracy {:.4}", metrics.accuracy);
        all.push(metrics);
    }
    let acc: Vec<f64> = all.iter().map(|m| m.accuracy).collect();
    let mca: Vec<f64> = all.iter().map(Metrics::mean_class_accuracy).collect();
    let (am, asd) = mean_std(&acc);
    let (mm, msd) = mean_std(&mca);
    let mut text = String::new();
    for (k, a) in acc.iter().enumerate() {
        let _ = writeln!(text, "split_{k}_accuracy\t{a:.6}");
    }
    let _ = writeln!(text, "accuracy_mean\t{am:.6}\naccuracy_std\t{asd:.6}");
    let _ = writeln!(text, "mean_class_accuracy_mean\t{mm:.6}\nmean_class_accuracy_std\t{msd:.6}");
    write_atomic(&out.join(SUMMARY_FILE), text.as_bytes())?;
    Ok(all)
}

/// Validation accuracy of a model trained on the train split.
fn validation_accuracy(cfg: &PipelineConfig, train: &TrainImages, val: &[(crate::dataio::GrayImage, usize)], seed: u64) -> Result<f64> {
    let model = train_deep_images(train, cfg, seed, false)?;
    let imgs: Vec<_> = val.iter().map(|(i, _)| i.clone()).collect();
    let desc = describe_images(&imgs, &model)?;
    let c = model.classifier.as_ref().expect("trained model has a classifier");
    let mut correct = 0;
    for (i, (_, label)) in val.iter().enumerate() {
        if c.predict(desc.row(i))? == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / val.len().max(1) as f64)
}

/// Tunes `xi`, `lambda1`, `lambda2`, `gamma` and `eta` one after another:
/// each is set to the grid value with the best validation accuracy (first
/// wins ties) with the others held at their current values. Every layer
/// receives the same value.
pub fn run_sweep(cfg: &PipelineConfig, manifest: &DatasetManifest, seed: u64, out: &Path) -> Result<PipelineConfig> {
    let m = carve_validation(manifest, cfg.sweep.val_fraction, derive_seed(seed, 0x5eed, 0))?;
    let train = TrainImages::load(&m, Split::Train)?;
    let val = m
        .split(Split::Val)
        .map(|e| Ok((load_gray(&m.resolve(e))?, e.class_id)))
        .collect::<Result<Vec<_>>>()?;
    if val.is_empty() {
        return Err(Error::invalid("no validation images for the sweep"));
    }
    type Setter = fn(&mut crate::dsfl::LayerHyperparams, f64);
    let params: [(&str, &[f64], Setter); 5] = [
        ("xi", &cfg.sweep.xi, |h, v| h.xi = v),
        ("lambda1", &cfg.sweep.lambda1, |h, v| h.lambda1 = v),
        ("lambda2", &cfg.sweep.lambda2, |h, v| h.lambda2 = v),
        ("gamma", &cfg.sweep.gamma, |h, v| h.gamma = v),
        ("eta", &cfg.sweep.eta, |h, v| h.eta = v),
    ];
    let mut best_cfg = cfg.clone();
    let mut text = String::from("param\tvalue\tval_accuracy\n");
    for (name, grid, set) in params {
        let mut best: Option<(f64, PipelineConfig)> = None;
        for &v in grid {
            let mut trial = best_cfg.clone();
            trial.layers.iter_mut().for_each(|l| set(&mut l.hyper, v));
            if let Err(e) = trial.validate() {
                log::warn!("sweep: skipping {name}={v}: {e}");
                continue;
            }
            let acc = validation_accuracy(&trial, &train, &val, seed)?;
            log::info!("sweep: {name}={v} validation accuracy {acc:.4}");
            let _ = writeln!(text, "{name}\t{v}\t{acc:.6}");
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, trial));
            }
        }
        if let Some((_, c)) = best {
            best_cfg = c;
        }
    }
    write_atomic(&out.join(SWEEP_FILE), text.as_bytes())?;
    write_atomic(&out.join(BEST_CONFIG_FILE), best_cfg.to_toml().as_bytes())?;
    Ok(best_cfg)
}

/// A scaled-down config suited to the synthetic dataset.
pub fn synth_config(manifest: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.data.manifest = Some(manifest.to_path_buf());
    cfg.data.patches_per_image = 60;
    cfg.layers.truncate(2);
    for l in &mut cfg.layers {
        l.num_filters = 64;
        l.pca_dim = 64;
    }
    cfg.encode.codebook_size = 128;
    cfg.encode.codebook_samples = 20_000;
    cfg
}

fn run_synth(args: &SynthArgs, seed: u64, out: &Path) -> Result<()> {
    let scfg = SynthConfig {
        num_classes: args.classes,
        width: args.size,
        height: args.size,
        train_per_class: args.train_per_class,
        test_per_class: args.test_per_class,
        noise: args.noise,
        contrast: args.contrast,
        ..Default::default()
    };
    let manifest = write_dataset(out, &scfg, seed)?;
    let cfg = synth_config(Path::new("manifest.tsv"));
    write_atomic(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    println!("wrote {} and {}", manifest.display(), out.join("config.toml").display());
    Ok(())
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    if let Command::Synth(args) = &cli.command {
        return run_synth(args, cli.seed.unwrap_or(0), &cli.out);
    }
    let config_path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = PipelineConfig::load(config_path, &cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.run.threads = t;
    }
    if let Some(s) = cli.splits {
        cfg.run.splits = s;
    }
    cfg.validate()?;
    if cfg.run.threads > 0 {
        // fails only if a pool already exists, in which case it is reused
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.run.threads).build_global();
    }
    let seed = cfg.run.seed;
    log::info!("config hash {} seed {seed}", cfg.hash());
    let manifest = load_manifest(cfg.manifest_path()?)?;
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    write_atomic(&cli.out.join("config.resolved.toml"), cfg.to_toml().as_bytes())?;
    let stage = Stage::new(cfg.clone(), manifest.clone(), seed, cli.out.clone());
    match cli.command {
        Command::Patches => stage.patches(),
        Command::Exemplars => stage.exemplars(),
        Command::Train { random_filters } => stage.train(random_filters),
        Command::Extract => stage.extract(),
        Command::Codebook => stage.codebook(),
        Command::Encode => stage.encode(),
        Command::FitClassifier => stage.fit_classifier(),
        Command::Evaluate => {
            print!("{}", stage.evaluate()?.report());
            Ok(())
        }
        Command::Pipeline { random_filters } => {
            let all = run_pipeline(&cfg, &manifest, seed, &cli.out, cfg.run.splits, random_filters)?;
            if all.len() == 1 {
                print!("{}", all[0].report());
            } else {
                let text = std::fs::read_to_string(cli.out.join(SUMMARY_FILE)).unwrap_or_default();
                print!("{text}");
            }
            Ok(())
        }
        Command::Sweep => run_sweep(&cfg, &manifest, seed, &cli.out).map(|_| ()),
        Command::Synth(_) => unreachable!("handled above"),
    }
}
