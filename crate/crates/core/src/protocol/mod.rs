//! The open-world life cycle: task schedule, incremental training, replay
//! memory, topology stabilization and per-time-point evaluation.

mod detector;
mod evaluate;
mod exemplar;
mod schedule;

pub use detector::{finetune_stabilize, label_task_data, run_task, Detector, Prediction, TaskReport, TrainConfig};
pub use evaluate::{evaluate_time_point, Evaluation, InstanceOutcome};
pub use exemplar::{update_exemplars, ExemplarStore};
pub use schedule::{ScheduleFile, TaskSchedule};

use thiserror::Error;

use crate::model::ModelError;
use crate::openworld::{BoundingBox, OpenWorldError};
use crate::topology::{Label, TopologyError};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("schedule: {0}")]
    Schedule(String),
    #[error("image {image_id}: class `{class}` is not part of task {task} or a later task")]
    OutOfSchedule {
        image_id: u64,
        class: String,
        task: usize,
    },
    #[error("task {requested} requested but {done} task(s) completed")]
    TaskOrder { requested: usize, done: usize },
    #[error("no anchor for class `{0}` in the anchor source")]
    MissingAnchor(String),
    #[error("anchor dimension {anchors} does not match model anchor dimension {model}")]
    AnchorDimension { anchors: usize, model: usize },
    #[error("schedule has {classes} classes but the model holds at most {max}")]
    TooManyClasses { classes: usize, max: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    OpenWorld(#[from] OpenWorldError),
}

/// One supervised training instance.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedInstance {
    pub input: Vec<f64>,
    pub label: Label,
    /// Ground-truth box; `None` for pseudo-labeled unknowns and feature-only
    /// data, which disables the box term.
    pub bbox: Option<BoundingBox>,
    pub image_id: u64,
}
