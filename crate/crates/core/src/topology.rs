//! Semantic topology: one fixed anchor vector per class plus the `unknown` anchor.
//!
//! Object classes receive contiguous ids from 0 in registration order. The
//! `unknown` anchor is supplied at construction and addressed through
//! [`Label::Unknown`]; it never consumes an object class id.
//!
//! Anchors are immutable once registered. Growing the topology only appends.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Name reserved for the open-set class.
pub const UNKNOWN_NAME: &str = "unknown";

/// Already-normalized vectors are stored untouched when their norm is this
/// close to one, so that normalization is idempotent bit-for-bit.
const UNIT_NORM_SLACK: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("anchor `{name}` has dimension {got}, topology dimension is {expected}")]
    DimensionMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("class `{0}` is already registered")]
    DuplicateName(String),
    #[error("anchor `{0}` has zero norm and cannot be normalized")]
    ZeroNorm(String),
    #[error("anchor `{0}` contains a non-finite component")]
    NonFinite(String),
    #[error("topology dimension must be positive")]
    ZeroDimension,
    #[error("random anchor generation needs at least one class name")]
    NoNames,
    #[error("anchor file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("anchor file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("anchor file line {line}: ragged dimensions ({got} vs {expected} on the first record)")]
    RaggedDimensions {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("anchor file has no `unknown` record")]
    MissingUnknown,
    #[error("anchor file is empty")]
    Empty,
}

/// Classifier label: an object class id or the open-set `unknown` class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Unknown,
}

impl Label {
    pub fn is_unknown(self) -> bool {
        matches!(self, Label::Unknown)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticAnchor {
    pub label: Label,
    pub name: String,
    vector: Vec<f64>,
}

impl SemanticAnchor {
    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.vector)
    }
}

/// Where the anchor vectors came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnchorSource {
    File(String),
    Random { seed: u64 },
    Manual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTopology {
    dim: usize,
    normalize: bool,
    anchors: Vec<SemanticAnchor>,
    unknown: SemanticAnchor,
    by_name: HashMap<String, usize>,
    source: AnchorSource,
}

impl SemanticTopology {
    /// Creates a topology holding only the `unknown` anchor.
    pub fn new(
        dim: usize,
        unknown_vector: Vec<f64>,
        normalize: bool,
        source: AnchorSource,
    ) -> Result<Self, TopologyError> {
        if dim == 0 {
            return Err(TopologyError::ZeroDimension);
        }
        let vector = ingest(UNKNOWN_NAME, unknown_vector, dim, normalize)?;
        Ok(Self {
            dim,
            normalize,
            anchors: Vec::new(),
            unknown: SemanticAnchor {
                label: Label::Unknown,
                name: UNKNOWN_NAME.to_string(),
                vector,
            },
            by_name: HashMap::new(),
            source,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn normalizes(&self) -> bool {
        self.normalize
    }

    pub fn source(&self) -> &AnchorSource {
        &self.source
    }

    /// Number of object-class anchors (excludes `unknown`).
    pub fn num_classes(&self) -> usize {
        self.anchors.len()
    }

    /// Appends an anchor for `name`. Fails without touching state on a
    /// dimension mismatch or a name that is already present.
    pub fn register_anchor(&mut self, name: &str, vector: Vec<f64>) -> Result<usize, TopologyError> {
        if name == UNKNOWN_NAME || self.by_name.contains_key(name) {
            return Err(TopologyError::DuplicateName(name.to_string()));
        }
        let vector = ingest(name, vector, self.dim, self.normalize)?;
        let id = self.anchors.len();
        self.anchors.push(SemanticAnchor {
            label: Label::Class(id),
            name: name.to_string(),
            vector,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn anchor(&self, label: Label) -> Option<&SemanticAnchor> {
        match label {
            Label::Class(id) => self.anchors.get(id),
            Label::Unknown => Some(&self.unknown),
        }
    }

    pub fn unknown(&self) -> &SemanticAnchor {
        &self.unknown
    }

    pub fn class_anchors(&self) -> &[SemanticAnchor] {
        &self.anchors
    }

    /// Object anchors in id order followed by the `unknown` anchor.
    pub fn iter(&self) -> impl Iterator<Item = &SemanticAnchor> {
        self.anchors.iter().chain(std::iter::once(&self.unknown))
    }

    pub fn label_of(&self, name: &str) -> Option<Label> {
        if name == UNKNOWN_NAME {
            return Some(Label::Unknown);
        }
        self.by_name.get(name).map(|&id| Label::Class(id))
    }

    pub fn name_of(&self, label: Label) -> Option<&str> {
        self.anchor(label).map(|a| a.name.as_str())
    }

    /// Writes the topology as line-delimited JSON records carrying `class_id`
    /// (`null` for `unknown`, which is written last).
    pub fn save(&self, path: &Path) -> Result<(), TopologyError> {
        let io_err = |source| TopologyError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
        for anchor in self.iter() {
            let record = AnchorRecord {
                name: anchor.name.clone(),
                vector: anchor.vector.clone(),
                class_id: match anchor.label {
                    Label::Class(id) => Some(id),
                    Label::Unknown => None,
                },
            };
            let line = serde_json::to_string(&record).expect("anchor record serializes");
            writeln!(out, "{line}").map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }
}

/// One line of an anchor file. `class_id` is present in saved topologies and
/// absent in files produced by the embedding exporter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorRecord {
    pub name: String,
    pub vector: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<usize>,
}

/// Draws one anchor per name plus `unknown`, each componentwise uniform in
/// [-1, 1] and scaled to unit norm.
pub fn generate_random_anchors(
    names: &[String],
    dim: usize,
    seed: u64,
) -> Result<SemanticTopology, TopologyError> {
    if names.is_empty() {
        return Err(TopologyError::NoNames);
    }
    if dim == 0 {
        return Err(TopologyError::ZeroDimension);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vectors: Vec<Vec<f64>> = (0..=names.len()).map(|_| draw_unit(&mut rng, dim)).collect();
    let (unknown, classes) = vectors.split_last().expect("at least two vectors");
    let mut topology =
        SemanticTopology::new(dim, unknown.clone(), true, AnchorSource::Random { seed })?;
    for (name, vector) in names.iter().zip(classes) {
        topology.register_anchor(name, vector.clone())?;
    }
    Ok(topology)
}

fn draw_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let norm = l2_norm(&v);
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Reads an anchor file. The dimension comes from the first record; the
/// `unknown` record is mandatory and may appear anywhere.
pub fn load_anchors(path: &Path, normalize: bool) -> Result<SemanticTopology, TopologyError> {
    let file = File::open(path).map_err(|source| TopologyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut records = Vec::new();
    let mut dim = None;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| TopologyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let record: AnchorRecord =
            serde_json::from_str(trimmed).map_err(|e| TopologyError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        let expected = *dim.get_or_insert(record.vector.len());
        if record.vector.len() != expected {
            return Err(TopologyError::RaggedDimensions {
                line: line_no,
                expected,
                got: record.vector.len(),
            });
        }
        records.push((line_no, record));
    }
    let dim = dim.ok_or(TopologyError::Empty)?;
    let unknown_pos = records
        .iter()
        .position(|(_, r)| r.name == UNKNOWN_NAME)
        .ok_or(TopologyError::MissingUnknown)?;
    let (_, unknown) = records.remove(unknown_pos);
    let mut topology = SemanticTopology::new(
        dim,
        unknown.vector,
        normalize,
        AnchorSource::File(path.display().to_string()),
    )?;
    for (line_no, record) in records {
        let expected_id = topology.num_classes();
        if let Some(id) = record.class_id {
            if id != expected_id {
                return Err(TopologyError::Parse {
                    line: line_no,
                    message: format!("class_id {id} out of order, expected {expected_id}"),
                });
            }
        }
        topology.register_anchor(&record.name, record.vector)?;
    }
    Ok(topology)
}

fn ingest(name: &str, vector: Vec<f64>, dim: usize, normalize: bool) -> Result<Vec<f64>, TopologyError> {
    if vector.len() != dim {
        return Err(TopologyError::DimensionMismatch {
            name: name.to_string(),
            expected: dim,
            got: vector.len(),
        });
    }
    if vector.iter().any(|x| !x.is_finite()) {
        return Err(TopologyError::NonFinite(name.to_string()));
    }
    if !normalize {
        return Ok(vector);
    }
    let norm = l2_norm(&vector);
    if norm == 0.0 {
        return Err(TopologyError::ZeroNorm(name.to_string()));
    }
    if (norm - 1.0).abs() <= UNIT_NORM_SLACK {
        return Ok(vector);
    }
    Ok(vector.into_iter().map(|x| x / norm).collect())
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
