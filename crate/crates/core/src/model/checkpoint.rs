//! Line-delimited checkpoint: a header with config and variant, then one
//! record per tensor (`name`, shape prefix, row-major data). The frozen
//! encoder projection is stored first under `encoder.projection`.

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonfmt;
use crate::numerics::{Matrix, ParamStore};

use super::{EncoderStub, Model, ModelConfig, ModelError, Variant};

const FORMAT: &str = "tendency-checkpoint";
const VERSION: u32 = 1;
const ENCODER_NAME: &str = "encoder.projection";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("checkpoint does not describe a valid model: {0}")]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct Header {
    format: String,
    version: u32,
    variant: Variant,
    config: ModelConfig,
    tensors: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    rows: usize,
    cols: usize,
    frozen: bool,
    data: Vec<f64>,
}

fn record(name: &str, m: &Matrix, frozen: bool) -> TensorRecord {
    TensorRecord { name: name.to_string(), rows: m.rows(), cols: m.cols(), frozen, data: m.as_slice().to_vec() }
}

fn to_io(e: serde_json::Error) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, e)
}

pub fn write_checkpoint<W: Write>(model: &Model, mut out: W) -> Result<(), CheckpointError> {
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        variant: model.variant,
        config: model.config.clone(),
        tensors: model.params.len() + 1,
    };
    writeln!(out, "{}", jsonfmt::to_line(&header).map_err(to_io)?)?;
    let enc = record(ENCODER_NAME, model.encoder.projection(), true);
    writeln!(out, "{}", jsonfmt::to_line(&enc).map_err(to_io)?)?;
    for (_, name, m) in model.params.iter() {
        writeln!(out, "{}", jsonfmt::to_line(&record(name, m, false)).map_err(to_io)?)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Model, CheckpointError> {
    let mut lines = input.lines().enumerate();
    let malformed = |line: usize, message: String| CheckpointError::Malformed { line, message };

    let (_, first) = lines.next().ok_or_else(|| malformed(1, "empty checkpoint".into()))?;
    let header: Header = serde_json::from_str(&first?).map_err(|e| malformed(1, format!("bad header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(malformed(1, format!("unsupported format {} v{}", header.format, header.version)));
    }

    let mut encoder = None;
    let mut params = ParamStore::new();
    let mut seen = 0;
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TensorRecord =
            serde_json::from_str(&line).map_err(|e| malformed(line_no, format!("bad tensor record: {e}")))?;
        let m = Matrix::from_vec(rec.rows, rec.cols, rec.data)
            .map_err(|e| malformed(line_no, format!("tensor {}: {e}", rec.name)))?;
        if rec.frozen {
            if rec.name != ENCODER_NAME || encoder.is_some() {
                return Err(malformed(line_no, format!("unexpected frozen tensor {}", rec.name)));
            }
            encoder = Some(EncoderStub::from_projection(m));
        } else {
            if params.contains(&rec.name) {
                return Err(malformed(line_no, format!("duplicate tensor {}", rec.name)));
            }
            params.insert(rec.name, m);
        }
        seen += 1;
    }
    if seen != header.tensors {
        return Err(malformed(seen + 1, format!("expected {} tensors, found {seen}", header.tensors)));
    }
    let encoder = encoder.ok_or_else(|| malformed(2, "missing encoder projection".into()))?;
    Ok(Model::from_parts(header.config, header.variant, encoder, params)?)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model, CheckpointError> {
    read_checkpoint(BufReader::new(fs::File::open(path)?))
}
