//! Turning flags into a configuration and the datasets a command works on.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cssr::backbone::BackbonePreset;
use cssr::data::{load_idx, make_open_split, uniform_points, Dataset, DatasetManifest, OpenSetSplit};
use cssr::harness::TrainConfig;
use cssr::head::{ErrorNorm, HeadMode, Strategy};
use cssr::metrics::ClassCounts;
use cssr::rng::derive_seed;

use crate::{Common, Usage};

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Samples per class of the synthetic 2-D sets.
const GAUSSIAN_PER_CLASS: usize = 500;
const BACKGROUND_POINTS: usize = 2000;
const BACKGROUND_HALF_WIDTH: f64 = 6.0;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn parse<T: std::str::FromStr<Err = cssr::Error>>(value: &str) -> Result<T> {
    value.parse::<T>().map_err(|e| usage(e.to_string()))
}

/// Preset or JSON config, with command-line overrides applied.
pub fn build_config(a: &Common) -> Result<TrainConfig> {
    let mode: Option<HeadMode> = a.mode.as_deref().map(parse).transpose()?;
    let mut config = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<TrainConfig>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => {
            let m = if a.preset == "gaussian-2d" { 4 } else { 6 };
            TrainConfig::preset(&a.preset, mode.unwrap_or(HeadMode::Cssr), m, a.seed.unwrap_or(0))
                .map_err(|e| usage(e.to_string()))?
        }
    };
    apply_overrides(a, &mut config)?;
    Ok(config)
}

pub fn apply_overrides(a: &Common, config: &mut TrainConfig) -> Result<()> {
    if let Some(seed) = a.seed {
        config.seed = seed;
        config.backbone.seed = seed;
        config.augment.seed = seed;
    }
    if let Some(mode) = a.mode.as_deref() {
        let mode: HeadMode = parse(mode)?;
        if mode != config.head.mode {
            config.head.mode = mode;
            config.head.gamma = mode.default_gamma();
        }
    }
    if let Some(e) = a.error.as_deref() {
        config.head.error_norm = parse::<ErrorNorm>(e)?;
    }
    if let Some(s) = a.strategy.as_deref() {
        config.head.strategy = parse::<Strategy>(s)?;
    }
    if let Some(g) = a.gamma {
        config.head.gamma = g;
    }
    if let Some(k) = a.latent_dim {
        config.head.latent_dim = k;
    }
    if let Some(w) = weights(a)? {
        config.scoring.weights = w;
    }
    if let Some(e) = a.epochs {
        config.epochs = e;
        config.lr_drop_epochs.retain(|&d| d < e);
    }
    Ok(())
}

pub fn weights(a: &Common) -> Result<Option<[f64; 3]>> {
    match a.weights.as_deref() {
        None => Ok(None),
        Some(&[w1, w2, w3]) => Ok(Some([w1, w2, w3])),
        Some(w) => Err(usage(format!("--weights takes three values, got {}", w.len()))),
    }
}

/// Train and test material for one run.
pub struct Inputs {
    pub train: Dataset,
    pub test_known: Dataset,
    pub test_unknown: Dataset,
    pub split: Option<OpenSetSplit>,
    pub counts: Option<ClassCounts>,
    /// Class ids of the original label space, indexed by known-class index.
    pub class_names: Vec<usize>,
}

fn is_2d(config: &TrainConfig) -> bool {
    config.backbone.preset == BackbonePreset::Mlp2d
}

fn idx_pair(dir: &Path, images: &str, labels: &str) -> Result<Dataset> {
    let (i, l): (PathBuf, PathBuf) = (dir.join(images), dir.join(labels));
    load_idx(&i, &l).with_context(|| format!("loading {} / {}", i.display(), l.display()))
}

/// Full (unsplit) train and test sets.
pub fn load_full(a: &Common, config: &TrainConfig) -> Result<(Dataset, Dataset)> {
    match &a.data {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(usage(format!("--data {} is not a directory", dir.display())));
            }
            Ok((
                idx_pair(dir, TRAIN_IMAGES, TRAIN_LABELS)?,
                idx_pair(dir, TEST_IMAGES, TEST_LABELS)?,
            ))
        }
        None if is_2d(config) => Ok((
            DatasetManifest::four_gaussians(GAUSSIAN_PER_CLASS, config.seed).load()?,
            DatasetManifest::four_gaussians(GAUSSIAN_PER_CLASS, derive_seed(config.seed, 1)).load()?,
        )),
        None => Err(usage(format!(
            "the {} backbone reads image files; pass --data DIR containing {TRAIN_IMAGES} and friends",
            config.backbone.preset
        ))),
    }
}

/// Split from flags, else from the configuration, else the default random
/// 60% split for file data. Synthetic 2-D data defaults to all classes known.
pub fn resolve_split(a: &Common, config: &TrainConfig, class_count: usize) -> Result<Option<OpenSetSplit>> {
    if let Some(known) = &a.known_classes {
        return Ok(Some(OpenSetSplit::from_known(class_count, known).map_err(|e| usage(e.to_string()))?));
    }
    if a.n_known.is_some() || a.trial.is_some() {
        let n = a.n_known.unwrap_or(class_count * 6 / 10);
        return Ok(Some(make_open_split(class_count, n, a.trial.unwrap_or(0)).map_err(|e| usage(e.to_string()))?));
    }
    if let Some(split) = &config.split {
        return Ok(Some(split.clone()));
    }
    if a.data.is_none() && is_2d(config) {
        return Ok(None);
    }
    Ok(Some(make_open_split(class_count, (class_count * 6 / 10).max(1), 0)?))
}

pub fn prepare(a: &Common, config: &TrainConfig) -> Result<Inputs> {
    let (train_full, test_full) = load_full(a, config)?;
    if train_full.class_count != test_full.class_count {
        return Err(cssr::Error::Mismatch {
            field: "class_count".into(),
            detail: format!("train has {}, test has {}", train_full.class_count, test_full.class_count),
        }
        .into());
    }
    let split = resolve_split(a, config, train_full.class_count)?;
    match &split {
        Some(split) => {
            let (train, _) = split.partition(&train_full)?;
            let (test_known, test_unknown) = split.partition(&test_full)?;
            let present = test_full.class_counts().iter().filter(|&&c| c > 0).count();
            let counts = ClassCounts {
                train: split.num_known(),
                test: present.max(split.num_known()),
                target: split.num_known(),
            };
            Ok(Inputs {
                train,
                test_known,
                test_unknown,
                class_names: split.known_classes.clone(),
                split: Some(split.clone()),
                counts: Some(counts),
            })
        }
        None => {
            // all classes known; unknowns are uniform background points
            let bg = uniform_points(
                BACKGROUND_POINTS,
                -BACKGROUND_HALF_WIDTH,
                BACKGROUND_HALF_WIDTH,
                derive_seed(config.seed, 2),
            );
            let test_unknown = Dataset::new(vec![2], bg.concat(), vec![0; BACKGROUND_POINTS], train_full.class_count)?;
            Ok(Inputs {
                class_names: (0..train_full.class_count).collect(),
                train: train_full,
                test_known: test_full,
                test_unknown,
                split: None,
                counts: None,
            })
        }
    }
}
