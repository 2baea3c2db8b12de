//! Command implementations behind the `semtopo` binary: benchmark
//! generation, full open-world runs, standalone metric evaluation and
//! topology export.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::data::{generate_toy, DataError, DatasetRecord, ToyDataset};
use crate::metrics::{evaluate_records, DetectionRecord, GroundTruthRecord, MetricOptions, MetricsRecord};
use crate::model::save_checkpoint;
use crate::openworld::BoundingBox;
use crate::protocol::{
    evaluate_time_point, run_task, Detector, Evaluation, ProtocolError, TaskReport, TaskSchedule,
};
use crate::topology::{Label, SemanticTopology, TopologyError, UNKNOWN_NAME};

/// Failure category of a command; each maps to a process exit code.
#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training error: {0}")]
    Training(String),
}

impl ExperimentError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Io(_) => 3,
            Self::Data(_) => 4,
            Self::Training(_) => 5,
        }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::Io(format!("{}: {e}", path.display()))
    }
}

impl From<TopologyError> for ExperimentError {
    fn from(e: TopologyError) -> Self {
        match e {
            TopologyError::Io { .. } => Self::Io(e.to_string()),
            TopologyError::Parse { .. }
            | TopologyError::RaggedDimensions { .. }
            | TopologyError::MissingUnknown
            | TopologyError::Empty => Self::Data(e.to_string()),
            _ => Self::Config(e.to_string()),
        }
    }
}

impl From<ProtocolError> for ExperimentError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::OutOfSchedule { .. } | ProtocolError::OpenWorld(_) => Self::Data(e.to_string()),
            ProtocolError::Model(_) => Self::Training(e.to_string()),
            ProtocolError::Topology(t) => t.into(),
            _ => Self::Config(e.to_string()),
        }
    }
}

impl From<ConfigError> for ExperimentError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Self::Io(e.to_string()),
            ConfigError::Schedule(p) => p.into(),
            ConfigError::Anchors(t) => t.into(),
            _ => Self::Config(e.to_string()),
        }
    }
}

impl From<DataError> for ExperimentError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => Self::Io(e.to_string()),
            DataError::Parse { .. } => Self::Data(e.to_string()),
            DataError::Config(_) => Self::Config(e.to_string()),
        }
    }
}

/// Everything resolved from a config before training starts.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub schedule: TaskSchedule,
    pub anchors: SemanticTopology,
    pub train: Vec<Vec<DatasetRecord>>,
    pub eval: Vec<DatasetRecord>,
}

/// Resolves schedule, anchors, model shape and data, and checks them
/// against each other.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared, ExperimentError> {
    config.validate()?;
    let schedule = config.schedule()?;
    let anchors = config.anchor_bank(&schedule)?;
    config.model_config(&schedule, anchors.dim())?;
    let (train, eval) = match &config.data.dir {
        Some(dir) => ToyDataset::read(dir, schedule.num_tasks())?,
        None => {
            let toy = generate_toy(&schedule, &config.data.toy, config.seed)?;
            (toy.train, toy.eval)
        }
    };
    for (t, records) in train.iter().enumerate() {
        check_records(records, &schedule, Some(t), config.model.input_dim)?;
    }
    check_records(&eval, &schedule, None, config.model.input_dim)?;
    Ok(Prepared {
        config: config.clone(),
        schedule,
        anchors,
        train,
        eval,
    })
}

fn check_records(
    records: &[DatasetRecord],
    schedule: &TaskSchedule,
    task: Option<usize>,
    input_dim: usize,
) -> Result<(), ExperimentError> {
    let split = task.map_or("eval".to_string(), |t| format!("task {} training", t + 1));
    for r in records {
        let Some(owner) = schedule.task_of_name(&r.class) else {
            return Err(ExperimentError::Data(format!(
                "{split} data, image {}: class `{}` is not in the schedule",
                r.image_id, r.class
            )));
        };
        if task.is_some_and(|t| owner < t) {
            return Err(ProtocolError::OutOfSchedule {
                image_id: r.image_id,
                class: r.class.clone(),
                task: task.unwrap() + 1,
            }
            .into());
        }
        if r.input.len() != input_dim {
            return Err(ExperimentError::Data(format!(
                "{split} data, image {}: input has {} values, model expects {input_dim}",
                r.image_id,
                r.input.len()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub detector: Detector,
    pub reports: Vec<TaskReport>,
    pub evaluations: Vec<Evaluation>,
}

/// Runs every task of the schedule and evaluates after each one.
/// `on_task` sees the detector state right after evaluation.
pub fn run_experiment(
    prepared: &Prepared,
    mut on_task: impl FnMut(&Detector, &TaskReport, &Evaluation) -> Result<(), ExperimentError>,
) -> Result<RunOutcome, ExperimentError> {
    let config = &prepared.config;
    let model = config.model_config(&prepared.schedule, prepared.anchors.dim())?;
    let train = config.train_config();
    let mut detector = Detector::new(model, &prepared.anchors, train.exemplar_capacity, config.seed)?;
    let mut reports = Vec::new();
    let mut evaluations = Vec::new();
    for t in 1..=prepared.schedule.num_tasks() {
        let report = run_task(
            &mut detector,
            t,
            &prepared.train[t - 1],
            &prepared.schedule,
            &prepared.anchors,
            &train,
        )?;
        let evaluation = evaluate_time_point(&detector, &prepared.eval, &prepared.schedule, t, &config.metrics)?;
        on_task(&detector, &report, &evaluation)?;
        reports.push(report);
        evaluations.push(evaluation);
    }
    Ok(RunOutcome {
        detector,
        reports,
        evaluations,
    })
}

pub const METRICS_HEADER: [&str; 6] = ["task", "wi", "a_ose", "map_prev", "map_curr", "map_both"];

fn csv_value(v: Option<f64>) -> String {
    v.map_or_else(|| "NaN".to_string(), |x| x.to_string())
}

#[derive(Serialize)]
struct FeatureLine<'a> {
    image_id: u64,
    label: &'a str,
    class: &'a str,
    f_hat: &'a [f64],
    own_anchor_distance: f64,
}

fn write_features(path: &Path, evaluation: &Evaluation, detector: &Detector, schedule: &TaskSchedule) -> Result<(), ExperimentError> {
    let err = |e: std::io::Error| ExperimentError::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(err)?);
    for o in &evaluation.instances {
        let line = FeatureLine {
            image_id: o.image_id,
            label: detector.topology.name_of(o.truth).unwrap_or(UNKNOWN_NAME),
            class: schedule.class_name(o.class),
            f_hat: &o.semantic,
            own_anchor_distance: o.own_anchor_distance,
        };
        let text = serde_json::to_string(&line).expect("feature line serializes");
        writeln!(out, "{text}").map_err(err)?;
    }
    out.flush().map_err(err)
}

pub fn checkpoint_file(out: &Path, t: usize) -> PathBuf {
    out.join(format!("checkpoint_task{t}.bin"))
}

pub fn topology_file(out: &Path, t: usize) -> PathBuf {
    out.join(format!("topology_task{t}.jsonl"))
}

pub fn features_file(out: &Path, t: usize) -> PathBuf {
    out.join(format!("features_task{t}.jsonl"))
}

pub fn metrics_file(out: &Path) -> PathBuf {
    out.join("metrics.csv")
}

/// Full run: writes `metrics.csv` plus a checkpoint, topology and feature
/// dump per time point into `out`.
pub fn cmd_run(config: &ExperimentConfig, out: &Path) -> Result<RunOutcome, ExperimentError> {
    let prepared = prepare(config)?;
    std::fs::create_dir_all(out).map_err(|e| ExperimentError::io(out, e))?;
    let csv_path = metrics_file(out);
    let mut csv = csv::Writer::from_path(&csv_path).map_err(|e| ExperimentError::io(&csv_path, e))?;
    csv.write_record(METRICS_HEADER)
        .map_err(|e| ExperimentError::io(&csv_path, e))?;
    let outcome = run_experiment(&prepared, |detector, report, evaluation| {
        let t = report.task;
        let m = &evaluation.metrics;
        csv.write_record([
            t.to_string(),
            csv_value(m.wi),
            m.a_ose.to_string(),
            csv_value(m.map_prev),
            csv_value(m.map_curr),
            csv_value(m.map_both),
        ])
        .and_then(|_| csv.flush().map_err(Into::into))
        .map_err(|e| ExperimentError::io(&csv_path, e))?;
        let ckpt = checkpoint_file(out, t);
        save_checkpoint(&detector.params, &ckpt).map_err(|e| ExperimentError::io(&ckpt, e))?;
        detector.topology.save(&topology_file(out, t))?;
        write_features(&features_file(out, t), evaluation, detector, &prepared.schedule)
    })?;
    Ok(outcome)
}

/// Writes the seeded benchmark (`train_task{t}.jsonl`, `eval.jsonl`) and the
/// schedule it was generated for (`schedule.toml`) into `out`.
pub fn cmd_gen_data(config: &ExperimentConfig, out: &Path) -> Result<ToyDataset, ExperimentError> {
    config.validate()?;
    let schedule = config.schedule()?;
    let toy = generate_toy(&schedule, &config.data.toy, config.seed)?;
    toy.write(out)?;
    let path = out.join("schedule.toml");
    let text = toml::to_string(&schedule.to_file()).expect("schedule serializes");
    std::fs::write(&path, text).map_err(|e| ExperimentError::io(&path, e))?;
    Ok(toy)
}

/// Topology holding the anchors of every class known at `task` (all
/// scheduled classes when `None`), with the ids a run would assign.
pub fn cmd_export_topology(
    config: &ExperimentConfig,
    task: Option<usize>,
    out: &Path,
) -> Result<SemanticTopology, ExperimentError> {
    config.validate()?;
    let schedule = config.schedule()?;
    let bank = config.anchor_bank(&schedule)?;
    let t = task.unwrap_or(schedule.num_tasks());
    if t > schedule.num_tasks() {
        return Err(ExperimentError::Config(format!(
            "task {t} requested but the schedule has {} tasks",
            schedule.num_tasks()
        )));
    }
    let mut topology = SemanticTopology::new(
        bank.dim(),
        bank.unknown().vector().to_vec(),
        bank.normalizes(),
        bank.source().clone(),
    )?;
    for class in schedule.known_at(t) {
        let name = schedule.class_name(class);
        let anchor = bank.label_of(name).and_then(|l| bank.anchor(l)).expect("checked by anchor_bank");
        topology.register_anchor(name, anchor.vector().to_vec())?;
    }
    topology.save(out)?;
    Ok(topology)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundTruthLine {
    image_id: u64,
    class: String,
    #[serde(rename = "box")]
    bbox: BoundingBox,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionLine {
    image_id: u64,
    class: String,
    score: f64,
    #[serde(rename = "box")]
    bbox: BoundingBox,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(
    path: &Path,
    mut each: impl FnMut(usize, T) -> Result<(), String>,
) -> Result<(), ExperimentError> {
    let file = File::open(path).map_err(|e| ExperimentError::io(path, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ExperimentError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let fail = |m: String| ExperimentError::Data(format!("{}:{lineno}: {m}", path.display()));
        let value: T = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        each(lineno, value).map_err(fail)?;
    }
    Ok(())
}

/// Scores externally produced detections against ground truth at time
/// point `t`. Ground-truth classes introduced after `t` count as unknown;
/// detections must carry a class known at `t` or `unknown`.
pub fn cmd_eval(
    gt_file: &Path,
    det_file: &Path,
    schedule: &TaskSchedule,
    t: usize,
    options: &MetricOptions,
) -> Result<MetricsRecord, ExperimentError> {
    if t == 0 || t > schedule.num_tasks() {
        return Err(ExperimentError::Config(format!(
            "time point {t} is outside the schedule (1..={})",
            schedule.num_tasks()
        )));
    }
    let known = schedule.known_at(t);
    let mut gts = Vec::new();
    read_jsonl(gt_file, |_, r: GroundTruthLine| {
        let label = match schedule.class_id(&r.class) {
            Some(c) if known.contains(&c) => Label::Class(c),
            Some(_) => Label::Unknown,
            None if r.class == UNKNOWN_NAME => Label::Unknown,
            None => return Err(format!("class `{}` is not in the schedule", r.class)),
        };
        gts.push(GroundTruthRecord {
            image_id: r.image_id,
            label,
            bbox: r.bbox,
        });
        Ok(())
    })?;
    let mut dets = Vec::new();
    read_jsonl(det_file, |_, r: DetectionLine| {
        let label = match schedule.class_id(&r.class) {
            Some(c) if known.contains(&c) => Label::Class(c),
            None if r.class == UNKNOWN_NAME => Label::Unknown,
            _ => return Err(format!("detection class `{}` is not known at time point {t}", r.class)),
        };
        if !r.score.is_finite() {
            return Err("score must be finite".into());
        }
        dets.push(DetectionRecord {
            image_id: r.image_id,
            label,
            score: r.score,
            bbox: r.bbox,
        });
        Ok(())
    })?;
    Ok(evaluate_records(
        &dets,
        &gts,
        &schedule.previously_known(t),
        schedule.task(t),
        options,
    ))
}

/// Human-readable metric report.
pub fn format_report(t: usize, m: &MetricsRecord) -> String {
    let show = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"));
    format!(
        "time point {t}\n  WI        {}\n  A-OSE     {}\n  mAP prev  {}\n  mAP curr  {}\n  mAP both  {}\n",
        show(m.wi),
        m.a_ose,
        show(m.map_prev),
        show(m.map_curr),
        show(m.map_both),
    )
}
