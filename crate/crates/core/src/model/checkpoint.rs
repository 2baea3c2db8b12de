//! Binary checkpoint format (little-endian):
//!
//! ```text
//! magic   b"SGTPCKPT"
//! version u32 (= 1)
//! config  input_dim u64, anchor_dim u64, max_classes u64,
//!         n_widths u64, widths u64 * n_widths
//! blocks  u64 count, then per block:
//!         name_len u32, name utf-8, rows u64, cols u64,
//!         weight f64 * rows*cols, bias f64 * rows
//! ```
//!
//! Values are stored as raw IEEE-754 bits so a load reproduces every
//! parameter exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Dense, ModelConfig, ModelParams};

const MAGIC: &[u8; 8] = b"SGTPCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint block `{name}` has shape {rows}x{cols}, expected {exp_rows}x{exp_cols}")]
    Shape {
        name: String,
        rows: usize,
        cols: usize,
        exp_rows: usize,
        exp_cols: usize,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), CheckpointError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let cfg = &params.config;
    for v in [cfg.input_dim, cfg.anchor_dim, cfg.max_classes, cfg.extractor_widths.len()] {
        out.write_all(&(v as u64).to_le_bytes())?;
    }
    for &w in &cfg.extractor_widths {
        out.write_all(&(w as u64).to_le_bytes())?;
    }
    let blocks = params.blocks();
    out.write_all(&(blocks.len() as u64).to_le_bytes())?;
    for (name, block) in blocks {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(block.outputs() as u64).to_le_bytes())?;
        out.write_all(&(block.inputs() as u64).to_le_bytes())?;
        for v in block.weight.iter().chain(&block.bias) {
            out.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let input_dim = read_usize(&mut r)?;
    let anchor_dim = read_usize(&mut r)?;
    let max_classes = read_usize(&mut r)?;
    let n_widths = read_usize(&mut r)?;
    if n_widths > 1024 {
        return Err(CheckpointError::Malformed(format!("{n_widths} extractor layers")));
    }
    let extractor_widths = (0..n_widths).map(|_| read_usize(&mut r)).collect::<Result<Vec<_>, _>>()?;
    let config = ModelConfig {
        input_dim,
        extractor_widths,
        anchor_dim,
        max_classes,
    };
    let mut params =
        ModelParams::zeros(config).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let n_blocks = read_usize(&mut r)?;
    let expected = params.blocks().len();
    if n_blocks != expected {
        return Err(CheckpointError::Malformed(format!(
            "{n_blocks} blocks, expected {expected}"
        )));
    }
    for (name, block) in params.blocks_mut() {
        let name_len = read_u32(&mut r)? as usize;
        let mut buf = vec![0u8; name_len];
        r.read_exact(&mut buf)?;
        let stored = String::from_utf8(buf).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        if stored != name {
            return Err(CheckpointError::Malformed(format!(
                "block `{stored}` where `{name}` expected"
            )));
        }
        let rows = read_usize(&mut r)?;
        let cols = read_usize(&mut r)?;
        if rows != block.outputs() || cols != block.inputs() {
            return Err(CheckpointError::Shape {
                name,
                rows,
                cols,
                exp_rows: block.outputs(),
                exp_cols: block.inputs(),
            });
        }
        let weight = (0..rows * cols).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>, _>>()?;
        let bias = (0..rows).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>, _>>()?;
        *block = Dense::from_parts(rows, cols, weight, bias);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    Ok(params)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_usize(r: &mut impl Read) -> std::io::Result<usize> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b) as usize)
}

fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_bits(u64::from_le_bytes(b)))
}
