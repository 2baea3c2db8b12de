//! The trainable detection head.
//!
//! An input vector passes through a tanh MLP (the RoI feature extractor) to
//! give the feature `f`. A linear semantic projector maps `f` into anchor
//! space, giving `f̂`. Two classifier heads score `f` and `f̂` over the same
//! label layout, and a box head regresses the box from `f`.
//!
//! Label layout: slots `0..max_classes` hold object classes in class-id order
//! and the final slot holds `unknown`.

mod checkpoint;
mod layer;
mod loss;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use layer::Dense;
pub use loss::{
    grad_loss_cls, grad_loss_reg, grad_loss_sa, loss_cls, loss_reg, loss_sa, smooth_l1,
    total_loss, LossBreakdown, LossWeights, Target, SA_SINGULAR_EPS,
};
pub use optim::Sgd;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::Label;

/// Logit assigned to classifier slots of classes not yet introduced.
pub const MASKED_LOGIT: f64 = -1e10;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("{what}: expected length {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("input contains a non-finite value")]
    NonFiniteInput,
    #[error("label slot {0} is masked (class not yet known)")]
    MaskedLabel(usize),
    #[error("label slot {0} outside the classifier layout")]
    LabelOutOfRange(usize),
    #[error("target box has non-positive extent (w={w}, h={h})")]
    InvalidTargetBox { w: f64, h: f64 },
    #[error("non-finite gradient in block `{0}`; step rejected")]
    NonFiniteGradient(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Raw input dimension `p`.
    pub input_dim: usize,
    /// Output widths of the tanh extractor layers; the last one is the RoI
    /// feature dimension `d`. Empty means identity (`d = p`).
    pub extractor_widths: Vec<usize>,
    /// Anchor dimension `n`.
    pub anchor_dim: usize,
    /// Maximum number of object classes `C_max`.
    pub max_classes: usize,
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        self.extractor_widths.last().copied().unwrap_or(self.input_dim)
    }

    pub fn num_slots(&self) -> usize {
        self.max_classes + 1
    }

    pub fn unknown_slot(&self) -> usize {
        self.max_classes
    }

    pub fn slot(&self, label: Label) -> usize {
        match label {
            Label::Class(id) => id,
            Label::Unknown => self.max_classes,
        }
    }

    pub fn label(&self, slot: usize) -> Label {
        if slot == self.max_classes {
            Label::Unknown
        } else {
            Label::Class(slot)
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.anchor_dim == 0 || self.max_classes == 0 {
            return Err(ModelError::InvalidConfig(
                "input_dim, anchor_dim and max_classes must be positive".into(),
            ));
        }
        if self.extractor_widths.contains(&0) {
            return Err(ModelError::InvalidConfig("extractor widths must be positive".into()));
        }
        Ok(())
    }
}

/// All parameter blocks. The same type doubles as a gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub extractor: Vec<Dense>,
    pub projector: Dense,
    pub roi_head: Dense,
    pub sem_head: Dense,
    pub box_head: Dense,
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut extractor = Vec::with_capacity(config.extractor_widths.len());
        let mut fan_in = config.input_dim;
        for &width in &config.extractor_widths {
            extractor.push(Dense::init_uniform(width, fan_in, &mut rng));
            fan_in = width;
        }
        let d = config.feature_dim();
        let projector = Dense::init_uniform(config.anchor_dim, d, &mut rng);
        let roi_head = Dense::init_uniform(config.num_slots(), d, &mut rng);
        let sem_head = Dense::init_uniform(config.num_slots(), config.anchor_dim, &mut rng);
        let box_head = Dense::init_uniform(4, d, &mut rng);
        Ok(Self {
            config,
            extractor,
            projector,
            roi_head,
            sem_head,
            box_head,
        })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut fan_in = config.input_dim;
        let extractor = config
            .extractor_widths
            .iter()
            .map(|&w| {
                let layer = Dense::zeros(w, fan_in);
                fan_in = w;
                layer
            })
            .collect();
        let d = config.feature_dim();
        Ok(Self {
            projector: Dense::zeros(config.anchor_dim, d),
            roi_head: Dense::zeros(config.num_slots(), d),
            sem_head: Dense::zeros(config.num_slots(), config.anchor_dim),
            box_head: Dense::zeros(4, d),
            extractor,
            config,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config.clone()).expect("config already validated")
    }

    /// Named blocks in a fixed order (extractor layers first).
    pub fn blocks(&self) -> Vec<(String, &Dense)> {
        let mut out: Vec<(String, &Dense)> = self
            .extractor
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("extractor.{i}"), l))
            .collect();
        out.push(("projector".into(), &self.projector));
        out.push(("roi_head".into(), &self.roi_head));
        out.push(("sem_head".into(), &self.sem_head));
        out.push(("box_head".into(), &self.box_head));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut Dense)> {
        let mut out: Vec<(String, &mut Dense)> = self
            .extractor
            .iter_mut()
            .enumerate()
            .map(|(i, l)| (format!("extractor.{i}"), l))
            .collect();
        out.push(("projector".into(), &mut self.projector));
        out.push(("roi_head".into(), &mut self.roi_head));
        out.push(("sem_head".into(), &mut self.sem_head));
        out.push(("box_head".into(), &mut self.box_head));
        out
    }

    /// Every scalar parameter, block by block, weights before biases.
    pub fn flat_mut(&mut self) -> Vec<&mut f64> {
        self.blocks_mut()
            .into_iter()
            .flat_map(|(_, d)| d.weight.iter_mut().chain(d.bias.iter_mut()))
            .collect()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.blocks()
            .into_iter()
            .flat_map(|(_, d)| d.weight.iter().chain(d.bias.iter()).copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, d)| d.num_params()).sum()
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for ((_, a), (_, b)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, block) in self.blocks_mut() {
            block.weight.iter_mut().for_each(|x| *x *= factor);
            block.bias.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn zero_extractor(&mut self) {
        for layer in &mut self.extractor {
            layer.weight.iter_mut().for_each(|x| *x = 0.0);
            layer.bias.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Classifier slots currently open for prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnownSet {
    open: Vec<bool>,
}

impl KnownSet {
    /// Only the `unknown` slot open.
    pub fn new(config: &ModelConfig) -> Self {
        let mut open = vec![false; config.num_slots()];
        open[config.unknown_slot()] = true;
        Self { open }
    }

    pub fn all(num_slots: usize) -> Self {
        Self {
            open: vec![true; num_slots],
        }
    }

    pub fn from_slots(num_slots: usize, slots: impl IntoIterator<Item = usize>) -> Self {
        let mut open = vec![false; num_slots];
        for s in slots {
            open[s] = true;
        }
        Self { open }
    }

    pub fn open(&mut self, slot: usize) {
        self.open[slot] = true;
    }

    pub fn contains(&self, slot: usize) -> bool {
        self.open.get(slot).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.open.iter().filter(|&&o| o).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_slots(&self) -> usize {
        self.open.len()
    }

    pub fn slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.open.iter().enumerate().filter(|(_, &o)| o).map(|(i, _)| i)
    }
}

/// Replaces the logits of closed slots with [`MASKED_LOGIT`].
pub fn mask_unseen_logits(logits: &[f64], known: &KnownSet) -> Vec<f64> {
    logits
        .iter()
        .enumerate()
        .map(|(i, &z)| if known.contains(i) { z } else { MASKED_LOGIT })
        .collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cached activations for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    /// Output of every extractor layer; the last entry is `f`.
    pub activations: Vec<Vec<f64>>,
    pub feature: Vec<f64>,
    pub semantic: Vec<f64>,
    pub roi_logits: Vec<f64>,
    pub sem_logits: Vec<f64>,
    pub roi_posterior: Vec<f64>,
    pub sem_posterior: Vec<f64>,
    pub box_pred: [f64; 4],
}

pub fn forward(params: &ModelParams, input: &[f64], known: &KnownSet) -> Result<ForwardTrace, ModelError> {
    let cfg = &params.config;
    if input.len() != cfg.input_dim {
        return Err(ModelError::DimensionMismatch {
            what: "input",
            expected: cfg.input_dim,
            got: input.len(),
        });
    }
    if input.iter().any(|x| !x.is_finite()) {
        return Err(ModelError::NonFiniteInput);
    }
    if known.num_slots() != cfg.num_slots() {
        return Err(ModelError::DimensionMismatch {
            what: "known set",
            expected: cfg.num_slots(),
            got: known.num_slots(),
        });
    }
    let mut activations = Vec::with_capacity(params.extractor.len());
    let mut current = input.to_vec();
    for layer in &params.extractor {
        current = layer.forward(&current).into_iter().map(f64::tanh).collect();
        activations.push(current.clone());
    }
    let feature = current;
    let semantic = params.projector.forward(&feature);
    let roi_logits = params.roi_head.forward(&feature);
    let sem_logits = params.sem_head.forward(&semantic);
    let roi_posterior = softmax(&mask_unseen_logits(&roi_logits, known));
    let sem_posterior = softmax(&mask_unseen_logits(&sem_logits, known));
    let b = params.box_head.forward(&feature);
    Ok(ForwardTrace {
        input: input.to_vec(),
        activations,
        feature,
        semantic,
        roi_logits,
        sem_logits,
        roi_posterior,
        sem_posterior,
        box_pred: [b[0], b[1], b[2], b[3]],
    })
}
