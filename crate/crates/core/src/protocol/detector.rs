use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotatedInstance, ExemplarStore, ProtocolError, TaskSchedule};
use crate::data::{group_by_image, DatasetRecord};
use crate::metrics::DetectionRecord;
use crate::model::{
    forward, total_loss, KnownSet, LossWeights, ModelConfig, ModelParams, Sgd, Target,
};
use crate::openworld::{ensemble_predict, select_unknown_proposals, BoundingBox, Proposal};
use crate::seed::derive_seed;
use crate::topology::{Label, SemanticTopology};

/// Training knobs for one open-world run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weights: LossWeights,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    /// Loss weights during stabilization; defaults to `weights`.
    pub finetune_weights: Option<LossWeights>,
    pub freeze_extractor_in_finetune: bool,
    /// Pull pseudo-labeled unknowns towards the `unknown` anchor.
    pub unknown_anchor: bool,
    /// Unknown proposals selected per image.
    pub unknown_k: usize,
    /// Proposals overlapping a ground-truth box by more than this are never
    /// labeled unknown.
    pub unknown_overlap: f64,
    pub exemplar_capacity: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr: 0.01,
            momentum: 0.9,
            weights: LossWeights::default(),
            finetune_epochs: 100,
            finetune_lr: 0.003,
            finetune_weights: None,
            freeze_extractor_in_finetune: false,
            unknown_anchor: true,
            unknown_k: 1,
            unknown_overlap: 0.0,
            exemplar_capacity: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn stabilization_weights(&self) -> LossWeights {
        self.finetune_weights.unwrap_or(self.weights)
    }
}

/// Ensembled prediction for one proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: Label,
    pub score: f64,
    pub semantic: Vec<f64>,
    pub box_pred: [f64; 4],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskReport {
    pub task: usize,
    pub annotated: usize,
    pub pseudo_unknowns: usize,
    pub epoch_losses: Vec<f64>,
    pub finetune_losses: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Everything that evolves over the detector's life.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub params: ModelParams,
    pub topology: SemanticTopology,
    pub known: KnownSet,
    pub exemplars: ExemplarStore,
    pub tasks_done: usize,
}

impl Detector {
    /// Fresh detector whose topology holds only the `unknown` anchor taken
    /// from `anchor_source`.
    pub fn new(
        model: ModelConfig,
        anchor_source: &SemanticTopology,
        exemplar_capacity: usize,
        seed: u64,
    ) -> Result<Self, ProtocolError> {
        if anchor_source.dim() != model.anchor_dim {
            return Err(ProtocolError::AnchorDimension {
                anchors: anchor_source.dim(),
                model: model.anchor_dim,
            });
        }
        let params = ModelParams::init(model, seed)?;
        let topology = SemanticTopology::new(
            anchor_source.dim(),
            anchor_source.unknown().vector().to_vec(),
            anchor_source.normalizes(),
            anchor_source.source().clone(),
        )?;
        Ok(Self {
            known: KnownSet::new(&params.config),
            params,
            topology,
            exemplars: ExemplarStore::new(exemplar_capacity),
            tasks_done: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    fn target<'a>(&'a self, inst: &AnnotatedInstance, unknown_anchor: bool) -> Target<'a> {
        let anchor = match inst.label {
            Label::Unknown if !unknown_anchor => None,
            label => self.topology.anchor(label).map(|a| a.vector()),
        };
        Target {
            slot: self.config().slot(inst.label),
            anchor,
            // Proposals coincide with their objects, so the regression target
            // is the box expressed in its own frame.
            bbox: inst.bbox.map(|b| b.relative_to(b)),
        }
    }

    /// Mean loss and gradient over `batch`, accumulated in slice order.
    pub fn batch_gradient(
        &self,
        batch: &[&AnnotatedInstance],
        weights: &LossWeights,
        unknown_anchor: bool,
    ) -> Result<(f64, ModelParams), ProtocolError> {
        let mut grads = self.params.zeros_like();
        let mut loss = 0.0;
        for inst in batch {
            let trace = forward(&self.params, &inst.input, &self.known)?;
            let (parts, g) = total_loss(
                &self.params,
                &trace,
                &self.target(inst, unknown_anchor),
                weights,
                &self.known,
            )?;
            loss += parts.total;
            grads.add_assign(&g);
        }
        let scale = 1.0 / batch.len().max(1) as f64;
        grads.scale(scale);
        Ok((loss * scale, grads))
    }

    /// Minibatch momentum SGD over `data`; returns the mean loss of every
    /// epoch. Shuffling is seeded per epoch.
    #[allow(clippy::too_many_arguments)]
    pub fn train(
        &mut self,
        data: &[AnnotatedInstance],
        epochs: usize,
        lr: f64,
        momentum: f64,
        batch_size: usize,
        weights: &LossWeights,
        unknown_anchor: bool,
        freeze_extractor: bool,
        seed: u64,
    ) -> Result<Vec<f64>, ProtocolError> {
        if data.is_empty() || epochs == 0 {
            return Ok(Vec::new());
        }
        let mut opt = Sgd::new(lr, momentum);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut losses = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64));
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(batch_size.max(1)) {
                let batch: Vec<&AnnotatedInstance> = chunk.iter().map(|&i| &data[i]).collect();
                let (loss, mut grads) = self.batch_gradient(&batch, weights, unknown_anchor)?;
                if freeze_extractor {
                    grads.zero_extractor();
                }
                opt.step(&mut self.params, &grads)?;
                total += loss * batch.len() as f64;
            }
            losses.push(total / data.len() as f64);
        }
        Ok(losses)
    }

    pub fn predict(&self, input: &[f64]) -> Result<Prediction, ProtocolError> {
        let trace = forward(&self.params, input, &self.known)?;
        let (slot, score) = ensemble_predict(&trace.roi_posterior, &trace.sem_posterior)?;
        Ok(Prediction {
            label: self.config().label(slot),
            score,
            semantic: trace.semantic,
            box_pred: trace.box_pred,
        })
    }

    /// One detection per proposal of the image.
    pub fn detect_image(&self, records: &[&DatasetRecord]) -> Result<Vec<DetectionRecord>, ProtocolError> {
        records
            .iter()
            .map(|r| {
                let p = self.predict(&r.input)?;
                let proposal = r.proposal().bbox;
                Ok(DetectionRecord {
                    image_id: r.image_id,
                    label: p.label,
                    score: p.score,
                    bbox: BoundingBox::decode(proposal, p.box_pred),
                })
            })
            .collect()
    }

    /// Registers anchors for `classes` (looked up by name in
    /// `anchor_source`) and opens their classifier slots.
    fn register_classes(
        &mut self,
        classes: &[usize],
        schedule: &TaskSchedule,
        anchor_source: &SemanticTopology,
    ) -> Result<(), ProtocolError> {
        for &class in classes {
            let name = schedule.class_name(class);
            let vector = anchor_source
                .label_of(name)
                .and_then(|l| anchor_source.anchor(l))
                .ok_or_else(|| ProtocolError::MissingAnchor(name.to_string()))?
                .vector()
                .to_vec();
            let id = self.topology.register_anchor(name, vector)?;
            if id != class {
                return Err(ProtocolError::Schedule(format!(
                    "class `{name}` registered as id {id} but scheduled as {class}"
                )));
            }
            self.known.open(self.params.config.slot(Label::Class(class)));
        }
        Ok(())
    }
}

/// Splits a task's training records into annotated instances (classes of
/// task `t`) and unknown pseudo-labels chosen among the remaining proposals.
/// Records of later tasks' classes are treated as unannotated objects.
pub fn label_task_data(
    records: &[DatasetRecord],
    schedule: &TaskSchedule,
    t: usize,
    unknown_k: usize,
    unknown_overlap: f64,
) -> Result<(Vec<AnnotatedInstance>, Vec<AnnotatedInstance>), ProtocolError> {
    let mut annotated = Vec::new();
    let mut unknowns = Vec::new();
    for (image_id, objects) in group_by_image(records) {
        let mut gt_boxes = Vec::new();
        for r in &objects {
            match schedule.task_of_name(&r.class) {
                Some(task) if task + 1 == t => {
                    annotated.push(AnnotatedInstance {
                        input: r.input.clone(),
                        label: Label::Class(schedule.class_id(&r.class).expect("scheduled")),
                        bbox: r.bbox,
                        image_id,
                    });
                    gt_boxes.push(r.proposal().bbox);
                }
                Some(task) if task + 1 > t => {}
                _ => {
                    return Err(ProtocolError::OutOfSchedule {
                        image_id,
                        class: r.class.clone(),
                        task: t,
                    })
                }
            }
        }
        let proposals: Vec<Proposal> = objects.iter().map(|r| r.proposal()).collect();
        for idx in select_unknown_proposals(&proposals, &gt_boxes, unknown_k, unknown_overlap) {
            unknowns.push(AnnotatedInstance {
                input: objects[idx].input.clone(),
                label: Label::Unknown,
                bbox: None,
                image_id,
            });
        }
    }
    Ok((annotated, unknowns))
}

/// Learns time point `t` (1-based): registers the task's anchors, opens
/// their slots, trains on the task data, refreshes the exemplar store and,
/// once earlier classes exist, runs topology stabilization.
pub fn run_task(
    detector: &mut Detector,
    t: usize,
    train_records: &[DatasetRecord],
    schedule: &TaskSchedule,
    anchor_source: &SemanticTopology,
    config: &TrainConfig,
) -> Result<TaskReport, ProtocolError> {
    if t != detector.tasks_done + 1 || t > schedule.num_tasks() {
        return Err(ProtocolError::TaskOrder {
            requested: t,
            done: detector.tasks_done,
        });
    }
    if schedule.num_classes() > detector.config().max_classes {
        return Err(ProtocolError::TooManyClasses {
            classes: schedule.num_classes(),
            max: detector.config().max_classes,
        });
    }
    let classes = schedule.task(t).to_vec();
    let mut report = TaskReport {
        task: t,
        ..TaskReport::default()
    };
    if classes.is_empty() {
        detector.tasks_done = t;
        return Ok(report);
    }
    let (annotated, unknowns) =
        label_task_data(train_records, schedule, t, config.unknown_k, config.unknown_overlap)?;
    detector.register_classes(&classes, schedule, anchor_source)?;
    report.annotated = annotated.len();
    report.pseudo_unknowns = unknowns.len();

    let mut task_data = annotated;
    task_data.extend(unknowns.iter().cloned());
    report.epoch_losses = detector.train(
        &task_data,
        config.epochs,
        config.lr,
        config.momentum,
        config.batch_size,
        &config.weights,
        config.unknown_anchor,
        false,
        derive_seed(config.seed, 1000 + t as u64),
    )?;

    detector
        .exemplars
        .update(&task_data, &classes, derive_seed(config.seed, 2000 + t as u64));

    if t > 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 3000 + t as u64));
        let mut unknown_sample = unknowns;
        unknown_sample.shuffle(&mut rng);
        unknown_sample.truncate(config.exemplar_capacity);
        let (losses, warnings) = finetune_stabilize(detector, schedule, t, &unknown_sample, config)?;
        report.finetune_losses = losses;
        report.warnings = warnings;
    }
    detector.tasks_done = t;
    Ok(report)
}

/// Fine-tunes on the balanced replay set (every exemplar buffer, old and
/// new, plus `extra` samples such as pseudo-labeled unknowns) with the full
/// objective so stored classes are pulled back to their fixed anchors.
/// Returns per-epoch losses and warnings for known classes lacking exemplars.
pub fn finetune_stabilize(
    detector: &mut Detector,
    schedule: &TaskSchedule,
    t: usize,
    extra: &[AnnotatedInstance],
    config: &TrainConfig,
) -> Result<(Vec<f64>, Vec<String>), ProtocolError> {
    let warnings: Vec<String> = schedule
        .known_at(t)
        .into_iter()
        .filter(|&c| detector.exemplars.buffer(c).is_none_or(|b| b.is_empty()))
        .map(|c| format!("no exemplars stored for class `{}`", schedule.class_name(c)))
        .collect();
    if config.finetune_epochs == 0 {
        return Ok((Vec::new(), warnings));
    }
    let mut data: Vec<AnnotatedInstance> = detector.exemplars.iter().cloned().collect();
    data.extend(extra.iter().cloned());
    let losses = detector.train(
        &data,
        config.finetune_epochs,
        config.finetune_lr,
        config.momentum,
        config.batch_size,
        &config.stabilization_weights(),
        config.unknown_anchor,
        config.freeze_extractor_in_finetune,
        derive_seed(config.seed, 4000 + t as u64),
    )?;
    Ok((losses, warnings))
}

