//! Experiment configuration, read from TOML. Every field has a default, so an
//! empty file describes the standard toy benchmark run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ToyConfig;
use crate::metrics::MetricOptions;
use crate::model::{LossWeights, ModelConfig};
use crate::protocol::{ProtocolError, TaskSchedule, TrainConfig};
use crate::topology::{generate_random_anchors, load_anchors, SemanticTopology, TopologyError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Schedule(#[from] ProtocolError),
    #[error(transparent)]
    Anchors(#[from] TopologyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorKind {
    #[default]
    Random,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    pub source: AnchorKind,
    /// Anchor file, required when `source = "file"`.
    pub path: Option<PathBuf>,
    /// Dimension of random anchors; file anchors take the file's dimension.
    pub dim: usize,
    /// Seed for random anchors; the global seed when absent.
    pub seed: Option<u64>,
    pub normalize: bool,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            source: AnchorKind::Random,
            path: None,
            dim: 32,
            seed: None,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Schedule file; takes precedence over `tasks`.
    pub file: Option<PathBuf>,
    pub tasks: Vec<Vec<String>>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let task = |a: &str, b: &str| vec![a.to_string(), b.to_string()];
        Self {
            file: None,
            tasks: vec![
                task("aeroplane", "bicycle"),
                task("bird", "boat"),
                task("bottle", "bus"),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub input_dim: usize,
    pub extractor_widths: Vec<usize>,
    /// Classifier capacity; the schedule's class count when absent.
    pub max_classes: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            input_dim: 16,
            extractor_widths: vec![32, 32],
            max_classes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    /// Loss weights for stabilization; the main weights when absent.
    pub finetune_weights: Option<LossWeights>,
    pub freeze_extractor_in_finetune: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            finetune_epochs: t.finetune_epochs,
            finetune_lr: t.finetune_lr,
            finetune_weights: t.finetune_weights,
            freeze_extractor_in_finetune: t.freeze_extractor_in_finetune,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExemplarConfig {
    pub capacity: usize,
}

impl Default for ExemplarConfig {
    fn default() -> Self {
        Self { capacity: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnknownConfig {
    pub k: usize,
    pub overlap: f64,
}

impl Default for UnknownConfig {
    fn default() -> Self {
        Self { k: 1, overlap: 0.0 }
    }
}

/// Loss ablations. Each flag zeroes its term in both training phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub disable_unknown_anchor: bool,
    pub disable_sa: bool,
    pub disable_cls_se: bool,
    pub disable_cls_roi: bool,
}

impl AblationConfig {
    fn apply(&self, mut w: LossWeights) -> LossWeights {
        if self.disable_sa {
            w.sa = 0.0;
        }
        if self.disable_cls_se {
            w.se = 0.0;
        }
        if self.disable_cls_roi {
            w.roi = 0.0;
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `train_task{t}.jsonl` and `eval.jsonl`. The toy
    /// benchmark is generated in memory when absent.
    pub dir: Option<PathBuf>,
    pub toy: ToyConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub anchors: AnchorConfig,
    pub schedule: ScheduleConfig,
    pub model: ModelSection,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub exemplars: ExemplarConfig,
    pub unknown: UnknownConfig,
    pub metrics: MetricOptions,
    pub ablation: AblationConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Reads a config file. Relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let display = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: display.clone(),
            source,
        })?;
        let mut config = Self::from_toml(&text).map_err(|e| ConfigError::Parse {
            path: display,
            message: e.to_string(),
        })?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.anchors.path);
        fix(&mut self.schedule.file);
        fix(&mut self.data.dir);
    }

    /// Checks value ranges that the type system does not.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.model.input_dim == 0 || self.model.extractor_widths.contains(&0) {
            return invalid("model dimensions must be positive");
        }
        if self.anchors.source == AnchorKind::Random && self.anchors.dim == 0 {
            return invalid("anchors.dim must be positive");
        }
        if self.anchors.source == AnchorKind::File && self.anchors.path.is_none() {
            return invalid("anchors.path is required when anchors.source = \"file\"");
        }
        let weights = [Some(self.loss), self.optim.finetune_weights];
        for w in weights.iter().flatten() {
            if [w.sa, w.se, w.roi, w.reg].iter().any(|x| !x.is_finite() || *x < 0.0) {
                return invalid("loss weights must be finite and non-negative");
            }
        }
        if self.optim.batch_size == 0 {
            return invalid("optim.batch_size must be positive");
        }
        if !(self.optim.lr > 0.0 && self.optim.lr.is_finite())
            || !(self.optim.finetune_lr > 0.0 && self.optim.finetune_lr.is_finite())
        {
            return invalid("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.optim.momentum) {
            return invalid("optim.momentum must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.unknown.overlap) {
            return invalid("unknown.overlap must lie in [0, 1]");
        }
        let m = &self.metrics;
        if !(m.iou_thresh > 0.0 && m.iou_thresh <= 1.0) || !(m.wi_recall > 0.0 && m.wi_recall <= 1.0) {
            return invalid("metric thresholds must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<TaskSchedule, ConfigError> {
        let schedule = match &self.schedule.file {
            Some(path) => TaskSchedule::load(path)?,
            None => TaskSchedule::from_names(self.schedule.tasks.clone())?,
        };
        if schedule.num_classes() == 0 {
            return Err(ConfigError::Invalid("schedule introduces no classes".into()));
        }
        Ok(schedule)
    }

    /// Anchor vectors for every scheduled class plus `unknown`.
    pub fn anchor_bank(&self, schedule: &TaskSchedule) -> Result<SemanticTopology, ConfigError> {
        let bank = match self.anchors.source {
            AnchorKind::Random => generate_random_anchors(
                schedule.names(),
                self.anchors.dim,
                self.anchors.seed.unwrap_or(self.seed),
            )?,
            AnchorKind::File => {
                let path = self.anchors.path.as_ref().expect("validated");
                load_anchors(path, self.anchors.normalize)?
            }
        };
        if let Some(missing) = schedule.names().iter().find(|n| bank.label_of(n).is_none()) {
            return Err(ProtocolError::MissingAnchor(missing.clone()).into());
        }
        Ok(bank)
    }

    pub fn model_config(&self, schedule: &TaskSchedule, anchor_dim: usize) -> Result<ModelConfig, ConfigError> {
        let max_classes = self.model.max_classes.unwrap_or(schedule.num_classes());
        if max_classes < schedule.num_classes() {
            return Err(ProtocolError::TooManyClasses {
                classes: schedule.num_classes(),
                max: max_classes,
            }
            .into());
        }
        let config = ModelConfig {
            input_dim: self.model.input_dim,
            extractor_widths: self.model.extractor_widths.clone(),
            anchor_dim,
            max_classes,
        };
        config
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(config)
    }

    pub fn train_config(&self) -> TrainConfig {
        let ablate = |w| self.ablation.apply(w);
        TrainConfig {
            epochs: self.optim.epochs,
            batch_size: self.optim.batch_size,
            lr: self.optim.lr,
            momentum: self.optim.momentum,
            weights: ablate(self.loss),
            finetune_epochs: self.optim.finetune_epochs,
            finetune_lr: self.optim.finetune_lr,
            finetune_weights: self.optim.finetune_weights.map(ablate),
            freeze_extractor_in_finetune: self.optim.freeze_extractor_in_finetune,
            unknown_anchor: !self.ablation.disable_unknown_anchor,
            unknown_k: self.unknown.k,
            unknown_overlap: self.unknown.overlap,
            exemplar_capacity: self.exemplars.capacity,
            seed: self.seed,
        }
    }
}
