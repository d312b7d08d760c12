//! Run configuration, read from a TOML file.
//!
//! Every key has a default except `[data]`, which commands that touch a
//! dataset require. Relative paths are resolved against the directory that
//! holds the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ssm_core::data::{load_idx, synthetic_gaussians};
use ssm_core::{Augment, BackboneSpec, Dataset, HeadSpec, LossScheme, ModelSpec, Precision, Split, TrainConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// 32 or 64.
    #[serde(default = "default_precision")]
    pub precision: u32,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Cnn,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Ssm,
    /// `parallel_fc` full-width linear classifiers with averaged logits.
    Fc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    Joint,
    Individual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub backbone: BackboneKind,
    pub widths: Vec<usize>,
    pub head: HeadKind,
    pub num_heads: usize,
    pub parallel_fc: usize,
    pub bn_relu_on_last: bool,
    /// Taken from the dataset when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    /// `[channels, height, width]`; taken from the dataset when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<[usize; 3]>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            backbone: BackboneKind::Cnn,
            widths: vec![32, 64, 256],
            head: HeadKind::Ssm,
            num_heads: 4,
            parallel_fc: 1,
            bn_relu_on_last: true,
            num_classes: None,
            input: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub scheme: SchemeName,
    pub augment_pad: usize,
    pub augment_flip: f64,
    /// Write `epoch-XXX.ckpt` every this many epochs; 0 disables.
    pub save_every: usize,
    /// Stop once test accuracy reaches this value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
    pub eval_batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let desk = TrainConfig::desk();
        TrainSection {
            epochs: desk.epochs,
            batch_size: desk.batch_size,
            base_lr: desk.base_lr,
            milestones: desk.milestones,
            lr_decay: desk.lr_decay,
            momentum: desk.momentum,
            weight_decay: desk.weight_decay,
            scheme: SchemeName::Joint,
            augment_pad: 2,
            augment_flip: 0.0,
            save_every: 0,
            target_accuracy: None,
            eval_batch_size: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSection {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit_train: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit_test: Option<usize>,
    },
    /// Gaussian blobs; the test split uses `seed + 1`.
    Synthetic {
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        size: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_precision() -> u32 {
    32
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn field(name: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{name}: {msg}"))
}

impl RunConfig {
    /// Reads, resolves relative paths and validates.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut config = Self::parse(&text)?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string().trim_end().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.out_dir);
        if let Some(DataSection::Idx { train_images, train_labels, test_images, test_labels, .. }) = &mut self.data {
            for p in [train_images, train_labels, test_images, test_labels] {
                join(p);
            }
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        Precision::from_bits(self.precision)
            .ok_or_else(|| field("precision", format!("expected 32 or 64, got {}", self.precision)))?;

        let m = &self.model;
        if m.widths.is_empty() || m.widths.contains(&0) {
            return Err(field("model.widths", "must be a non-empty list of positive widths"));
        }
        let width = *m.widths.last().unwrap();
        match m.head {
            HeadKind::Ssm => {
                if m.num_heads == 0 {
                    return Err(field("model.num_heads", "must be at least 1"));
                }
                if width % m.num_heads != 0 {
                    return Err(field(
                        "model.num_heads",
                        format!("feature width {width} is not divisible by num_heads {}", m.num_heads),
                    ));
                }
            }
            HeadKind::Fc if m.parallel_fc == 0 => return Err(field("model.parallel_fc", "must be at least 1")),
            HeadKind::Fc => {}
        }
        if m.num_classes == Some(0) {
            return Err(field("model.num_classes", "must be positive"));
        }
        if m.input.is_some_and(|d| d.contains(&0)) {
            return Err(field("model.input", "dims must be positive"));
        }

        let t = &self.train;
        if t.eval_batch_size == 0 {
            return Err(field("train.eval_batch_size", "must be positive"));
        }
        if let Some(a) = t.target_accuracy {
            if !(a > 0.0 && a <= 1.0) {
                return Err(field("train.target_accuracy", format!("must lie in (0, 1], got {a}")));
            }
        }
        self.train_config(0.0).validate().map_err(|e| match e {
            ssm_core::Error::Config(msg) => field("train", msg),
            other => other.into(),
        })?;

        match &self.data {
            Some(DataSection::Idx { train_images, train_labels, test_images, test_labels, limit_train, limit_test }) => {
                for (name, p) in [
                    ("data.train_images", train_images),
                    ("data.train_labels", train_labels),
                    ("data.test_images", test_images),
                    ("data.test_labels", test_labels),
                ] {
                    if !p.is_file() {
                        return Err(field(name, format!("file not found: {}", p.display())));
                    }
                }
                if *limit_train == Some(0) || *limit_test == Some(0) {
                    return Err(field("data.limit_train/limit_test", "must be positive"));
                }
            }
            Some(DataSection::Synthetic { classes, train_per_class, test_per_class, size, .. }) => {
                if [*classes, *train_per_class, *test_per_class, *size].contains(&0) {
                    return Err(field("data", "synthetic classes, per-class counts and size must be positive"));
                }
            }
            None => {}
        }
        Ok(())
    }

    pub fn precision(&self) -> Precision {
        Precision::from_bits(self.precision).unwrap_or(Precision::F32)
    }

    pub fn scheme(&self) -> LossScheme {
        match self.train.scheme {
            SchemeName::Joint => LossScheme::Joint,
            SchemeName::Individual => LossScheme::Individual,
        }
    }

    /// `fill` is the border value for pad-and-crop, in normalized units.
    pub fn train_config(&self, fill: f64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            base_lr: t.base_lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            milestones: t.milestones.clone(),
            lr_decay: t.lr_decay,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            scheme: self.scheme(),
            seed: self.seed,
            augment: Augment { pad: t.augment_pad, flip_prob: t.augment_flip, fill },
        }
    }

    pub fn model_spec(&self, input: [usize; 3], num_classes: usize) -> ModelSpec {
        let m = &self.model;
        let backbone = match m.backbone {
            BackboneKind::Cnn => BackboneSpec::Cnn { widths: m.widths.clone() },
            BackboneKind::Mlp => BackboneSpec::Mlp { widths: m.widths.clone() },
        };
        let head = match m.head {
            HeadKind::Ssm => HeadSpec::Ssm { num_heads: m.num_heads, bn_relu_on_last: m.bn_relu_on_last },
            HeadKind::Fc => HeadSpec::ParallelFc { count: m.parallel_fc },
        };
        ModelSpec { backbone, head, num_classes, input }
    }

    pub fn data(&self) -> CliResult<&DataSection> {
        self.data.as_ref().ok_or_else(|| field("data", "section is required for this command"))
    }

    /// Unnormalized `(train, test)` splits.
    pub fn load_datasets(&self) -> CliResult<(Dataset, Dataset)> {
        let (train, test) = match self.data()? {
            DataSection::Idx { train_images, train_labels, test_images, test_labels, limit_train, limit_test } => {
                let train = limit(load_idx(train_images, train_labels, Split::Train, None)?, *limit_train);
                let test = limit(load_idx(test_images, test_labels, Split::Test, None)?, *limit_test);
                let classes = train.num_classes.max(test.num_classes);
                (with_classes(train, classes), with_classes(test, classes))
            }
            &DataSection::Synthetic { classes, train_per_class, test_per_class, size, seed } => (
                synthetic_gaussians(classes, train_per_class, size, seed, Split::Train)?,
                synthetic_gaussians(classes, test_per_class, size, seed.wrapping_add(1), Split::Test)?,
            ),
        };
        if train.image_dims() != test.image_dims() {
            return Err(CliError::Dataset(format!(
                "train images are {:?} but test images are {:?}",
                train.image_dims(),
                test.image_dims()
            )));
        }
        self.check_data_shape(train.image_dims(), train.num_classes)?;
        Ok((train, test))
    }

    /// Test split only.
    pub fn load_test(&self) -> CliResult<Dataset> {
        Ok(self.load_datasets()?.1)
    }

    fn check_data_shape(&self, input: [usize; 3], classes: usize) -> CliResult<()> {
        if let Some(expected) = self.model.input {
            if expected != input {
                return Err(CliError::Incompatible(format!("model.input is {expected:?} but the dataset has {input:?}")));
            }
        }
        if let Some(expected) = self.model.num_classes {
            if expected < classes {
                return Err(CliError::Incompatible(format!(
                    "model.num_classes is {expected} but the dataset has labels up to {}",
                    classes - 1
                )));
            }
        }
        Ok(())
    }

    /// Input dims and class count, from the config when given and the dataset otherwise.
    pub fn resolve_shape(&self, train: Option<&Dataset>) -> CliResult<([usize; 3], usize)> {
        let input = match (self.model.input, train) {
            (Some(i), _) => i,
            (None, Some(d)) => d.image_dims(),
            (None, None) => return Err(field("model.input", "required when no dataset is loaded")),
        };
        let classes = match (self.model.num_classes, train) {
            (Some(k), _) => k,
            (None, Some(d)) => d.num_classes,
            (None, None) => return Err(field("model.num_classes", "required when no dataset is loaded")),
        };
        Ok((input, classes))
    }
}

fn limit(ds: Dataset, n: Option<usize>) -> Dataset {
    match n {
        Some(n) if n < ds.len() => ds.subset(&(0..n).collect::<Vec<_>>()),
        _ => ds,
    }
}

fn with_classes(mut ds: Dataset, classes: usize) -> Dataset {
    ds.num_classes = classes;
    ds
}
