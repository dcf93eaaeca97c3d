//! Run configuration, read from TOML.
//!
//! ```toml
//! [run]
//! id = "blobs-always"
//! seed = 1
//! epochs = 40
//! batch_size = 32
//!
//! [model]
//! hidden = [64]
//! batch_norm = false
//!
//! [optimizer]
//! kind = "sgd"
//! alpha = 0.1
//! lambda = 5e-4
//!
//! [schedule]
//! policy = "before_epoch"
//! epoch = 10
//!
//! [data]
//! source = "blobs"
//! classes = 4
//! dim = 16
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wdlab_core::data::{self, BlobsSpec, Dataset, ExternalSource, DEFAULT_BLOB_SCALE};
use wdlab_core::instrument::ScaleScope;
use wdlab_core::models::{MlpConfig, DEFAULT_BN_EPS};
use wdlab_core::optim::{AdamConfig, LrSchedule, SgdConfig, WdSchedule};
use wdlab_core::sharpness::SharpnessConfig;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_schedule")]
    pub schedule: WdSchedule,
    pub data: DataConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub sharpness: Option<SharpnessSection>,
    #[serde(default)]
    pub norm_match: Option<NormMatchConfig>,
}

fn default_schedule() -> WdSchedule {
    WdSchedule::Always
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub id: String,
    pub seed: u64,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

fn default_batch_size() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub batch_norm: bool,
    pub bn_eps: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            batch_norm: false,
            bn_eps: DEFAULT_BN_EPS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd(SgdConfig),
    Adam(AdamConfig),
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd(SgdConfig::default())
    }
}

impl OptimizerConfig {
    pub fn lambda(&self) -> f64 {
        match self {
            OptimizerConfig::Sgd(c) => c.lambda,
            OptimizerConfig::Adam(c) => c.lambda,
        }
    }

    pub fn set_lambda(&mut self, lambda: f64) {
        match self {
            OptimizerConfig::Sgd(c) => c.lambda = lambda,
            OptimizerConfig::Adam(c) => c.lambda = lambda,
        }
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        match self {
            OptimizerConfig::Sgd(c) => c.lr_schedule(),
            OptimizerConfig::Adam(c) => c.lr_schedule(),
        }
    }

    pub fn validate(&self) -> wdlab_core::Result<()> {
        match self {
            OptimizerConfig::Sgd(c) => c.validate(),
            OptimizerConfig::Adam(c) => c.validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Blobs {
        classes: usize,
        dim: usize,
        #[serde(default = "default_per_class")]
        per_class: usize,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default = "default_scale")]
        scale: f64,
    },
    Csv {
        train: PathBuf,
        test: Option<PathBuf>,
        classes: Option<usize>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
        classes: Option<usize>,
    },
}

fn default_per_class() -> usize {
    200
}
fn default_test_per_class() -> usize {
    200
}
fn default_spread() -> f64 {
    1.0
}
fn default_scale() -> f64 {
    DEFAULT_BLOB_SCALE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(flatten)]
    pub source: DataSource,
    /// Replace training labels by a random permutation of themselves.
    #[serde(default)]
    pub shuffle_labels: bool,
    /// Seed for data generation and label shuffling; the run seed if unset.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl DataConfig {
    /// Loads `(train, test)`; relative paths resolve against `base_dir`.
    pub fn load(&self, run_seed: u64, base_dir: &Path) -> Result<(Dataset, Dataset)> {
        let seed = self.seed.unwrap_or(run_seed);
        let resolve = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base_dir.join(p)
            }
        };
        let (train, test) = match &self.source {
            DataSource::Blobs {
                classes,
                dim,
                per_class,
                test_per_class,
                spread,
                scale,
            } => BlobsSpec {
                classes: *classes,
                dim: *dim,
                per_class: *per_class,
                test_per_class: *test_per_class,
                spread: *spread,
                scale: *scale,
                seed,
            }
            .generate()?,
            DataSource::Csv { train, test, classes } => {
                let tr = data::load_external(&ExternalSource::CsvFeaturesLabel { path: resolve(train) }, *classes)?;
                let te = match test {
                    Some(t) => data::load_external(
                        &ExternalSource::CsvFeaturesLabel { path: resolve(t) },
                        Some(tr.num_classes),
                    )?,
                    None => tr.head(0),
                };
                (tr, te)
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                classes,
            } => {
                let tr = data::load_external(
                    &ExternalSource::IdxImages {
                        images: resolve(train_images),
                        labels: resolve(train_labels),
                    },
                    *classes,
                )?;
                let te = match (test_images, test_labels) {
                    (Some(i), Some(l)) => data::load_external(
                        &ExternalSource::IdxImages {
                            images: resolve(i),
                            labels: resolve(l),
                        },
                        Some(tr.num_classes),
                    )?,
                    _ => tr.head(0),
                };
                (tr, te)
            }
        };
        let train = if self.shuffle_labels {
            data::shuffle_labels(&train, seed)
        } else {
            train
        };
        Ok((train, test))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Per-step records are written every this many optimizer steps.
    pub every_steps: usize,
    /// Quantiles of the Adam buffer ratio logged on epoch records.
    pub quantiles: Vec<f64>,
    /// Epochs after which a checkpoint is written; the final model is always saved.
    pub checkpoint_epochs: Vec<usize>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            every_steps: 10,
            quantiles: vec![0.1, 0.25, 0.5, 0.75, 0.9],
            checkpoint_epochs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpnessSection {
    /// Epochs after which all four sharpness metrics are measured on the training set.
    pub epochs: Vec<usize>,
    #[serde(flatten)]
    pub config: SharpnessConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormMatchConfig {
    /// Id of a finished run under the output root whose epoch norms are the targets.
    pub reference: String,
    #[serde(default)]
    pub scope: ScaleScope,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, returning the parsed config and the exact bytes read.
    pub fn from_file(path: &Path) -> Result<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        let text = std::str::from_utf8(&bytes).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let cfg = Self::from_toml(text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok((cfg, bytes))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.run.id.is_empty() || self.run.id.contains(['/', '\\']) || self.run.id.starts_with('.') {
            return bad(format!("run id `{}` is not a plain directory name", self.run.id));
        }
        if self.run.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.model.batch_norm && self.run.batch_size < 2 {
            return bad("batch norm needs batch_size >= 2".into());
        }
        if self.model.hidden.contains(&0) {
            return bad("hidden widths must be >= 1".into());
        }
        if self.metrics.every_steps == 0 {
            return bad("metrics.every_steps must be >= 1".into());
        }
        if self.metrics.quantiles.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return bad("quantiles must lie in [0, 1]".into());
        }
        if self.metrics.quantiles.windows(2).any(|w| w[1] < w[0]) {
            return bad("quantiles must be sorted".into());
        }
        if let Some(nm) = &self.norm_match {
            if nm.reference == self.run.id {
                return bad("a run cannot be norm-matched to itself".into());
            }
        }
        if let Some(s) = &self.sharpness {
            s.config.perturbation.validate()?;
            s.config.keskar.validate()?;
        }
        self.optimizer.validate()?;
        self.schedule.validate()?;
        Ok(())
    }

    pub fn model_config(&self, input_width: usize, classes: usize) -> MlpConfig {
        let mut widths = vec![input_width];
        widths.extend(&self.model.hidden);
        widths.push(classes);
        MlpConfig {
            layer_widths: widths,
            use_batch_norm: self.model.batch_norm,
            init_seed: self.run.seed,
            bn_eps: self.model.bn_eps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[run]
id = "r"
seed = 3
epochs = 2

[data]
source = "blobs"
classes = 3
dim = 4
"#;

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.run.batch_size, 128);
        assert_eq!(c.schedule, WdSchedule::Always);
        assert_eq!(c.optimizer, OptimizerConfig::Sgd(SgdConfig::default()));
        assert_eq!(c.metrics.every_steps, 10);
        assert!(!c.data.shuffle_labels);
    }

    #[test]
    fn seed_is_mandatory() {
        let text = MINIMAL.replace("seed = 3\n", "");
        assert!(matches!(RunConfig::from_toml(&text), Err(HarnessError::Config(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("epochs = 2", "epochs = 2\nepoch = 3");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn sections_parse() {
        let text = format!(
            "{MINIMAL}\n[optimizer]\nkind = \"adam\"\nmode = \"separated\"\nlambda = 1e-3\n\n[schedule]\npolicy = \"every_k_steps\"\nk = 8\nboost = true\n\n[norm_match]\nreference = \"ref\"\nscope = \"non_norm_params\"\n"
        );
        let c = RunConfig::from_toml(&text).unwrap();
        match c.optimizer {
            OptimizerConfig::Adam(a) => assert_eq!(a.lambda, 1e-3),
            other => panic!("{other:?}"),
        }
        assert_eq!(c.schedule, WdSchedule::EveryKSteps { k: 8, boost: true });
        assert_eq!(c.norm_match.unwrap().scope, ScaleScope::NonNormParams);
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        let again = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn invalid_values_are_reported() {
        for (from, to) in [
            ("epochs = 2", "epochs = 2\nbatch_size = 0"),
            ("id = \"r\"", "id = \"a/b\""),
            ("dim = 4", "dim = 4\n\n[optimizer]\nkind = \"sgd\"\nalpha = -1.0"),
        ] {
            assert!(RunConfig::from_toml(&MINIMAL.replace(from, to)).is_err(), "{to}");
        }
    }
}
