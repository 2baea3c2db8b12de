use serde::{Deserialize, Serialize};

use super::{mask_unseen_logits, softmax, Dense, ForwardTrace, KnownSet, ModelError, ModelParams};
use crate::openworld::BoundingBox;

/// Below this distance the anchor-loss gradient is taken to be zero.
pub const SA_SINGULAR_EPS: f64 = 1e-12;

/// Smooth-L1 transition point.
const HUBER_BETA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub sa: f64,
    pub se: f64,
    pub roi: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sa: 1.0,
            se: 1.0,
            roi: 1.0,
            reg: 1.0,
        }
    }
}

/// Supervision for one instance.
#[derive(Debug, Clone, Copy)]
pub struct Target<'a> {
    pub slot: usize,
    /// Anchor to pull `f̂` towards; `None` disables the anchor term.
    pub anchor: Option<&'a [f64]>,
    /// Regression target in the proposal frame; `None` disables the box term.
    pub bbox: Option<BoundingBox>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub sa: f64,
    pub se: f64,
    pub roi: f64,
    pub reg: f64,
    pub total: f64,
}

fn check_dims(what: &'static str, a: &[f64], b: &[f64]) -> Result<(), ModelError> {
    if a.len() != b.len() {
        return Err(ModelError::DimensionMismatch {
            what,
            expected: b.len(),
            got: a.len(),
        });
    }
    Ok(())
}

/// Euclidean distance between the semantic feature and its anchor.
pub fn loss_sa(f_hat: &[f64], anchor: &[f64]) -> Result<f64, ModelError> {
    check_dims("semantic feature", f_hat, anchor)?;
    Ok(f_hat
        .iter()
        .zip(anchor)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

pub fn grad_loss_sa(f_hat: &[f64], anchor: &[f64]) -> Result<Vec<f64>, ModelError> {
    let dist = loss_sa(f_hat, anchor)?;
    if dist < SA_SINGULAR_EPS {
        return Ok(vec![0.0; f_hat.len()]);
    }
    Ok(f_hat.iter().zip(anchor).map(|(a, b)| (a - b) / dist).collect())
}

fn check_label(logits: &[f64], label: usize, known: &KnownSet) -> Result<(), ModelError> {
    if label >= logits.len() || known.num_slots() != logits.len() {
        return Err(ModelError::LabelOutOfRange(label));
    }
    if !known.contains(label) {
        return Err(ModelError::MaskedLabel(label));
    }
    Ok(())
}

/// Softmax cross-entropy over the masked logits.
pub fn loss_cls(logits: &[f64], label: usize, known: &KnownSet) -> Result<f64, ModelError> {
    check_label(logits, label, known)?;
    let masked = mask_unseen_logits(logits, known);
    let max = masked.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + masked.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    Ok(lse - masked[label])
}

/// Gradient of [`loss_cls`] with respect to the raw logits; zero on masked
/// slots.
pub fn grad_loss_cls(logits: &[f64], label: usize, known: &KnownSet) -> Result<Vec<f64>, ModelError> {
    check_label(logits, label, known)?;
    let mut p = softmax(&mask_unseen_logits(logits, known));
    for (slot, g) in p.iter_mut().enumerate() {
        if !known.contains(slot) {
            *g = 0.0;
        }
    }
    p[label] -= 1.0;
    Ok(p)
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < HUBER_BETA {
        0.5 * a * a / HUBER_BETA
    } else {
        a - 0.5 * HUBER_BETA
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < HUBER_BETA {
        x / HUBER_BETA
    } else {
        x.signum()
    }
}

fn check_target_box(target: &BoundingBox) -> Result<(), ModelError> {
    if !(target.w > 0.0 && target.h > 0.0) {
        return Err(ModelError::InvalidTargetBox {
            w: target.w,
            h: target.h,
        });
    }
    Ok(())
}

/// Smooth-L1 summed over the four center-format coordinates.
pub fn loss_reg(pred: &[f64; 4], target: &BoundingBox) -> Result<f64, ModelError> {
    check_target_box(target)?;
    Ok(pred
        .iter()
        .zip(target.to_array())
        .map(|(p, t)| smooth_l1(p - t))
        .sum())
}

pub fn grad_loss_reg(pred: &[f64; 4], target: &BoundingBox) -> Result<[f64; 4], ModelError> {
    check_target_box(target)?;
    let t = target.to_array();
    Ok(std::array::from_fn(|i| smooth_l1_grad(pred[i] - t[i])))
}

/// Weighted sum of the four loss terms and its gradient with respect to
/// every parameter block, back-propagated through the cached trace.
pub fn total_loss(
    params: &ModelParams,
    trace: &ForwardTrace,
    target: &Target<'_>,
    weights: &LossWeights,
    known: &KnownSet,
) -> Result<(LossBreakdown, ModelParams), ModelError> {
    let mut grads = params.zeros_like();
    let mut parts = LossBreakdown::default();
    let d = params.config.feature_dim();
    let n = params.config.anchor_dim;
    let mut d_feature = vec![0.0; d];
    let mut d_semantic = vec![0.0; n];

    if weights.roi != 0.0 {
        parts.roi = loss_cls(&trace.roi_logits, target.slot, known)?;
        let dz: Vec<f64> = grad_loss_cls(&trace.roi_logits, target.slot, known)?
            .into_iter()
            .map(|g| weights.roi * g)
            .collect();
        add(&mut d_feature, &params.roi_head.backward_into(&trace.feature, &dz, &mut grads.roi_head));
    }
    if weights.se != 0.0 {
        parts.se = loss_cls(&trace.sem_logits, target.slot, known)?;
        let dz: Vec<f64> = grad_loss_cls(&trace.sem_logits, target.slot, known)?
            .into_iter()
            .map(|g| weights.se * g)
            .collect();
        add(&mut d_semantic, &params.sem_head.backward_into(&trace.semantic, &dz, &mut grads.sem_head));
    }
    if let (Some(anchor), true) = (target.anchor, weights.sa != 0.0) {
        parts.sa = loss_sa(&trace.semantic, anchor)?;
        let g = grad_loss_sa(&trace.semantic, anchor)?;
        for (acc, gi) in d_semantic.iter_mut().zip(g) {
            *acc += weights.sa * gi;
        }
    }
    if let (Some(bbox), true) = (target.bbox, weights.reg != 0.0) {
        parts.reg = loss_reg(&trace.box_pred, &bbox)?;
        let g = grad_loss_reg(&trace.box_pred, &bbox)?;
        let dz: Vec<f64> = g.iter().map(|gi| weights.reg * gi).collect();
        add(&mut d_feature, &params.box_head.backward_into(&trace.feature, &dz, &mut grads.box_head));
    }
    if d_semantic.iter().any(|&g| g != 0.0) {
        add(
            &mut d_feature,
            &params.projector.backward_into(&trace.feature, &d_semantic, &mut grads.projector),
        );
    }
    backprop_extractor(params, trace, d_feature, &mut grads.extractor);

    parts.total = weights.sa * parts.sa + weights.se * parts.se + weights.roi * parts.roi + weights.reg * parts.reg;
    Ok((parts, grads))
}

fn backprop_extractor(params: &ModelParams, trace: &ForwardTrace, mut upstream: Vec<f64>, grads: &mut [Dense]) {
    for (i, layer) in params.extractor.iter().enumerate().rev() {
        let out = &trace.activations[i];
        let dz: Vec<f64> = upstream
            .iter()
            .zip(out)
            .map(|(g, a)| g * (1.0 - a * a))
            .collect();
        let input = if i == 0 { &trace.input } else { &trace.activations[i - 1] };
        upstream = layer.backward_into(input, &dz, &mut grads[i]);
    }
}

fn add(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}
