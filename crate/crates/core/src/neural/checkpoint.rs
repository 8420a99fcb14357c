//! Checkpoint layout: one JSON header line terminated by `\n`, then every
//! parameter as little-endian `f32` in segment order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::params::{Layout, ParamStore, Segment};
use super::NeuralError;

pub const CHECKPOINT_FORMAT: &str = "nsdt-params";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub format_version: u32,
    pub segments: Vec<Segment>,
    pub hyperparameters: serde_json::Value,
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    params: &ParamStore<f32>,
    hyperparameters: &serde_json::Value,
) -> Result<(), NeuralError> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        format_version: FORMAT_VERSION,
        segments: params.layout().segments().to_vec(),
        hyperparameters: hyperparameters.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(params.len() * 4);
    for v in params.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<(ParamStore<f32>, CheckpointHeader), NeuralError> {
    let mut r = BufReader::new(r);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(NeuralError::Checkpoint("missing header line".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&line[..line.len() - 1])?;
    if header.format != CHECKPOINT_FORMAT || header.format_version != FORMAT_VERSION {
        return Err(NeuralError::Checkpoint(format!(
            "unsupported format {} v{}",
            header.format, header.format_version
        )));
    }
    let layout = Layout::new(header.segments.iter().map(|s| (s.name.clone(), s.shape.clone())))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != layout.total_len() * 4 {
        return Err(NeuralError::Checkpoint(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            layout.total_len() * 4
        )));
    }
    let values = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let store = ParamStore::from_parts(Arc::new(layout), values)?;
    Ok((store, header))
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParamStore<f32>,
    hyperparameters: &serde_json::Value,
) -> Result<(), NeuralError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_checkpoint(std::io::BufWriter::new(std::fs::File::create(path)?), params, hyperparameters)
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore<f32>, CheckpointHeader), NeuralError> {
    read_checkpoint(std::fs::File::open(path)?)
}
