use std::collections::BTreeSet;

use super::{Detector, ProtocolError, TaskSchedule};
use crate::data::{group_by_image, DatasetRecord};
use crate::metrics::{evaluate_records, DetectionRecord, GroundTruthRecord, MetricOptions, MetricsRecord};
use crate::model::loss_sa;
use crate::topology::Label;

/// Per-instance inference outcome on the evaluation split.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceOutcome {
    pub image_id: u64,
    /// Scheduled class of the object.
    pub class: usize,
    /// Ground truth as seen at this time point (`Unknown` for classes not
    /// yet introduced).
    pub truth: Label,
    pub predicted: Label,
    pub score: f64,
    pub semantic: Vec<f64>,
    pub own_anchor_distance: f64,
    /// Registered anchor (including `unknown`) closest to `semantic`.
    pub nearest_anchor: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub t: usize,
    pub metrics: MetricsRecord,
    pub detections: Vec<DetectionRecord>,
    pub ground_truth: Vec<GroundTruthRecord>,
    pub instances: Vec<InstanceOutcome>,
}

impl Evaluation {
    /// Fraction of instances of `classes` predicted as their own class.
    pub fn accuracy(&self, classes: &BTreeSet<usize>) -> Option<f64> {
        self.fraction(classes, |o| o.predicted == Label::Class(o.class))
    }

    /// Fraction of instances of `classes` whose nearest anchor is their own.
    pub fn nearest_own_anchor(&self, classes: &BTreeSet<usize>) -> Option<f64> {
        self.fraction(classes, |o| o.nearest_anchor == o.truth)
    }

    pub fn mean_own_anchor_distance(&self, classes: &BTreeSet<usize>) -> Option<f64> {
        let d: Vec<f64> = self
            .instances
            .iter()
            .filter(|o| classes.contains(&o.class))
            .map(|o| o.own_anchor_distance)
            .collect();
        (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
    }

    fn fraction(&self, classes: &BTreeSet<usize>, hit: impl Fn(&InstanceOutcome) -> bool) -> Option<f64> {
        let selected: Vec<&InstanceOutcome> = self
            .instances
            .iter()
            .filter(|o| classes.contains(&o.class))
            .collect();
        if selected.is_empty() {
            return None;
        }
        Some(selected.iter().filter(|o| hit(o)).count() as f64 / selected.len() as f64)
    }
}

/// Runs inference on `eval_records` at time point `t`. Objects of classes
/// not yet introduced are scored as `unknown` ground truth; mAP is split into
/// classes of earlier tasks, of task `t`, and both.
pub fn evaluate_time_point(
    detector: &Detector,
    eval_records: &[DatasetRecord],
    schedule: &TaskSchedule,
    t: usize,
    options: &MetricOptions,
) -> Result<Evaluation, ProtocolError> {
    let known = schedule.known_at(t);
    let mut detections = Vec::with_capacity(eval_records.len());
    let mut ground_truth = Vec::with_capacity(eval_records.len());
    let mut instances = Vec::with_capacity(eval_records.len());
    for (image_id, objects) in group_by_image(eval_records) {
        for r in &objects {
            let class = schedule.class_id(&r.class).ok_or_else(|| ProtocolError::OutOfSchedule {
                image_id,
                class: r.class.clone(),
                task: t,
            })?;
            let truth = if known.contains(&class) {
                Label::Class(class)
            } else {
                Label::Unknown
            };
            ground_truth.push(GroundTruthRecord {
                image_id,
                label: truth,
                bbox: r.proposal().bbox,
            });
            let prediction = detector.predict(&r.input)?;
            let own = detector
                .topology
                .anchor(truth)
                .expect("known classes and unknown are registered");
            let own_anchor_distance = loss_sa(&prediction.semantic, own.vector())?;
            let mut nearest = (truth, own_anchor_distance);
            for anchor in detector.topology.iter() {
                let d = loss_sa(&prediction.semantic, anchor.vector())?;
                if d < nearest.1 {
                    nearest = (anchor.label, d);
                }
            }
            instances.push(InstanceOutcome {
                image_id,
                class,
                truth,
                predicted: prediction.label,
                score: prediction.score,
                semantic: prediction.semantic,
                own_anchor_distance,
                nearest_anchor: nearest.0,
            });
        }
        detections.extend(detector.detect_image(&objects)?);
    }
    let prev = schedule.previously_known(t);
    let curr = if t >= 1 { schedule.task(t).to_vec() } else { Vec::new() };
    let metrics = evaluate_records(&detections, &ground_truth, &prev, &curr, options);
    Ok(Evaluation {
        t,
        metrics,
        detections,
        ground_truth,
        instances,
    })
}
