//! Dataset files and the synthetic Gaussian benchmark.
//!
//! A dataset file holds one JSON object per line:
//! `{"image_id": 3, "class": "dog", "input": [..], "box": [x, y, w, h], "objectness": 0.8}`
//! where `box` and `objectness` are optional. Records sharing an `image_id`
//! form one image; every record is also a class-agnostic proposal.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::openworld::{BoundingBox, Proposal};
use crate::protocol::TaskSchedule;
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("invalid benchmark configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image_id: u64,
    pub class: String,
    pub input: Vec<f64>,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objectness: Option<f64>,
}

impl DatasetRecord {
    /// The record viewed as a region proposal. Records without a box get a
    /// unit box at the origin; missing objectness counts as 1.
    pub fn proposal(&self) -> Proposal {
        Proposal {
            bbox: self.bbox.unwrap_or(BoundingBox {
                x: 0.0,
                y: 0.0,
                w: 1.0,
                h: 1.0,
            }),
            objectness: self.objectness.unwrap_or(1.0),
        }
    }
}

/// Records grouped by image, images in order of first appearance.
pub fn group_by_image(records: &[DatasetRecord]) -> Vec<(u64, Vec<&DatasetRecord>)> {
    let mut order: Vec<u64> = Vec::new();
    let mut groups: BTreeMap<u64, Vec<&DatasetRecord>> = BTreeMap::new();
    for r in records {
        let entry = groups.entry(r.image_id).or_default();
        if entry.is_empty() {
            order.push(r.image_id);
        }
        entry.push(r);
    }
    order
        .into_iter()
        .map(|id| (id, groups.remove(&id).unwrap_or_default()))
        .collect()
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>, DataError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: display.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: display.clone(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        if let Some(o) = record.objectness {
            if !(0.0..=1.0).contains(&o) {
                return Err(DataError::Parse {
                    path: display,
                    line: idx + 1,
                    message: format!("objectness {o} outside [0, 1]"),
                });
            }
        }
        out.push(record);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, records: &[DatasetRecord]) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r).expect("record serializes")).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Parameters of the synthetic benchmark: isotropic Gaussian classes whose
/// means sit on a randomly rotated regular simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub input_dim: usize,
    pub sigma: f64,
    /// Distance between every pair of class means.
    pub separation: f64,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    /// Annotated objects per training image.
    pub objects_per_image: usize,
    pub eval_objects_per_image: usize,
    /// Chance that a training image also shows one unannotated object of a
    /// later task's class.
    pub unknown_rate: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            sigma: 0.5,
            separation: 3.0,
            train_per_class: 200,
            eval_per_class: 100,
            objects_per_image: 2,
            eval_objects_per_image: 3,
            unknown_rate: 0.5,
        }
    }
}

/// Generated benchmark: one training split per task plus a shared eval split.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub means: Vec<Vec<f64>>,
    pub train: Vec<Vec<DatasetRecord>>,
    pub eval: Vec<DatasetRecord>,
}

impl ToyDataset {
    pub fn train_file(dir: &Path, task: usize) -> PathBuf {
        dir.join(format!("train_task{task}.jsonl"))
    }

    pub fn eval_file(dir: &Path) -> PathBuf {
        dir.join("eval.jsonl")
    }

    pub fn write(&self, dir: &Path) -> Result<(), DataError> {
        std::fs::create_dir_all(dir).map_err(|source| DataError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        for (t, records) in self.train.iter().enumerate() {
            write_dataset(&Self::train_file(dir, t + 1), records)?;
        }
        write_dataset(&Self::eval_file(dir), &self.eval)
    }

    /// Reads `train_task{t}.jsonl` for every task and `eval.jsonl`.
    pub fn read(dir: &Path, num_tasks: usize) -> Result<(Vec<Vec<DatasetRecord>>, Vec<DatasetRecord>), DataError> {
        let train = (1..=num_tasks)
            .map(|t| read_dataset(&Self::train_file(dir, t)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((train, read_dataset(&Self::eval_file(dir))?))
    }
}

/// Random orthonormal directions scaled so every pair of means sits exactly
/// `separation` apart.
fn simplex_means(k: usize, dim: usize, separation: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let scale = separation / std::f64::consts::SQRT_2;
    basis
        .into_iter()
        .map(|b| b.into_iter().map(|x| x * scale).collect())
        .collect()
}

struct Sampler<'a> {
    means: &'a [Vec<f64>],
    noise: Normal<f64>,
}

impl Sampler<'_> {
    fn input(&self, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.means[class]
            .iter()
            .map(|m| m + self.noise.sample(rng))
            .collect()
    }
}

/// Places object `slot` of an image in its own horizontal cell so that no two
/// objects in one image overlap.
fn slot_box(slot: usize, rng: &mut ChaCha8Rng) -> BoundingBox {
    BoundingBox {
        x: 10.0 * slot as f64 + 5.0,
        y: 5.0,
        w: rng.random_range(2.0..=6.0),
        h: rng.random_range(2.0..=6.0),
    }
}

pub fn generate_toy(schedule: &TaskSchedule, config: &ToyConfig, seed: u64) -> Result<ToyDataset, DataError> {
    let k = schedule.num_classes();
    if k == 0 {
        return Err(DataError::Config("schedule has no classes".into()));
    }
    if k > config.input_dim {
        return Err(DataError::Config(format!(
            "{k} classes need input_dim >= {k}, got {}",
            config.input_dim
        )));
    }
    if config.sigma <= 0.0 || config.sigma.is_nan() || config.objects_per_image == 0 || config.eval_objects_per_image == 0 {
        return Err(DataError::Config(
            "sigma and objects per image must be positive".into(),
        ));
    }
    let mut mean_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let means = simplex_means(k, config.input_dim, config.separation, &mut mean_rng);
    let sampler = Sampler {
        means: &means,
        noise: Normal::new(0.0, config.sigma).expect("positive sigma"),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let mut pools: Vec<Vec<Vec<f64>>> = (0..k)
        .map(|c| (0..config.train_per_class).map(|_| sampler.input(c, &mut rng)).collect())
        .collect();
    // An unknown extra never drains a later class below half its pool.
    let reserve = config.train_per_class.div_ceil(2);
    let name = |c: usize| schedule.class_name(c).to_string();

    let mut image_id = 0u64;
    let mut train = Vec::with_capacity(schedule.num_tasks());
    for (t, classes) in schedule.tasks().iter().enumerate() {
        let mut own: Vec<(usize, Vec<f64>)> = classes
            .iter()
            .flat_map(|&c| std::mem::take(&mut pools[c]).into_iter().map(move |x| (c, x)))
            .collect();
        own.shuffle(&mut rng);
        let future: Vec<usize> = schedule.tasks()[t + 1..].iter().flatten().copied().collect();
        let mut records = Vec::new();
        for chunk in own.chunks(config.objects_per_image) {
            let mut objects: Vec<(usize, Vec<f64>)> = chunk.to_vec();
            if !future.is_empty() && rng.random_bool(config.unknown_rate.clamp(0.0, 1.0)) {
                let eligible: Vec<usize> = future
                    .iter()
                    .copied()
                    .filter(|&c| pools[c].len() > reserve)
                    .collect();
                if !eligible.is_empty() {
                    let c = eligible[rng.random_range(0..eligible.len())];
                    let x = pools[c].pop().expect("eligible pool is non-empty");
                    objects.push((c, x));
                }
            }
            for (slot, (c, x)) in objects.into_iter().enumerate() {
                records.push(DatasetRecord {
                    image_id,
                    class: name(c),
                    input: x,
                    bbox: Some(slot_box(slot, &mut rng)),
                    objectness: Some(rng.random_range(0.5..=1.0)),
                });
            }
            image_id += 1;
        }
        train.push(records);
    }

    let mut eval_items: Vec<(usize, Vec<f64>)> = Vec::with_capacity(k * config.eval_per_class);
    for c in 0..k {
        for _ in 0..config.eval_per_class {
            eval_items.push((c, sampler.input(c, &mut rng)));
        }
    }
    eval_items.shuffle(&mut rng);
    let mut eval = Vec::with_capacity(eval_items.len());
    for chunk in eval_items.chunks(config.eval_objects_per_image) {
        for (slot, (c, x)) in chunk.iter().enumerate() {
            eval.push(DatasetRecord {
                image_id,
                class: name(*c),
                input: x.clone(),
                bbox: Some(slot_box(slot, &mut rng)),
                objectness: Some(rng.random_range(0.5..=1.0)),
            });
        }
        image_id += 1;
    }
    Ok(ToyDataset { means, train, eval })
}
