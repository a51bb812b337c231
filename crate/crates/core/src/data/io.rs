//! Line-delimited dataset files.
//!
//! Line 1 is a header object, followed by `n` profile records when
//! `hasProfiles` is set, then one record per sample. Missing labels are `-1`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::jsonfmt;
use crate::numerics::Matrix;

use super::{AnnotatorProfile, DataError, Dataset, Sample};

const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    #[serde(rename = "numSamples")]
    num_samples: usize,
    n: usize,
    #[serde(rename = "C")]
    c: usize,
    #[serde(rename = "numTokens")]
    num_tokens: usize,
    #[serde(rename = "rawDim")]
    raw_dim: usize,
    #[serde(rename = "hasProfiles")]
    has_profiles: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
struct ProfileRecord {
    annotator: usize,
    focus: Vec<f64>,
    decision_weights: Vec<f64>,
    bias_shift: Vec<f64>,
    noise_rate: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    tokens: Vec<f64>,
    labels: Vec<i64>,
}

fn ser_err(record: usize, e: serde_json::Error) -> DataError {
    DataError::Malformed { record, message: e.to_string() }
}

pub fn write_dataset<W: Write>(d: &Dataset, mut out: W) -> Result<(), DataError> {
    let header = Header {
        version: VERSION,
        num_samples: d.samples.len(),
        n: d.num_annotators,
        c: d.num_classes,
        num_tokens: d.num_tokens,
        raw_dim: d.raw_dim,
        has_profiles: d.profiles.is_some(),
    };
    writeln!(out, "{}", jsonfmt::to_line(&header).map_err(|e| DataError::Header(e.to_string()))?)?;
    if let Some(profiles) = &d.profiles {
        for (k, p) in profiles.iter().enumerate() {
            let rec = ProfileRecord {
                annotator: k,
                focus: p.focus.clone(),
                decision_weights: p.decision_weights.as_slice().to_vec(),
                bias_shift: p.bias_shift.clone(),
                noise_rate: p.noise_rate,
            };
            writeln!(out, "{}", jsonfmt::to_line(&rec).map_err(|e| ser_err(k, e))?)?;
        }
    }
    for (i, s) in d.samples.iter().enumerate() {
        let rec = SampleRecord {
            tokens: s.raw_tokens.as_slice().to_vec(),
            labels: s.labels.iter().map(|l| l.map_or(-1, |v| v as i64)).collect(),
        };
        writeln!(out, "{}", jsonfmt::to_line(&rec).map_err(|e| ser_err(i, e))?)?;
    }
    Ok(())
}

pub fn to_bytes(d: &Dataset) -> Result<Vec<u8>, DataError> {
    let mut buf = Vec::new();
    write_dataset(d, &mut buf)?;
    Ok(buf)
}

/// Hex SHA-256 of the canonical serialization.
pub fn dataset_digest(d: &Dataset) -> Result<String, DataError> {
    Ok(hex::encode(Sha256::digest(to_bytes(d)?)))
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Dataset, DataError> {
    let mut lines = input.lines().filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()));
    let first = lines.next().ok_or_else(|| DataError::Header("empty file".into()))??;
    let h: Header = serde_json::from_str(&first).map_err(|e| DataError::Header(e.to_string()))?;
    if h.version != VERSION {
        return Err(DataError::Header(format!("unsupported version {}", h.version)));
    }
    if h.c < 2 || h.n == 0 || h.num_tokens == 0 || h.raw_dim == 0 {
        return Err(DataError::Header(format!(
            "invalid dimensions n={} C={} numTokens={} rawDim={}",
            h.n, h.c, h.num_tokens, h.raw_dim
        )));
    }

    let profiles = if h.has_profiles {
        let mut out = Vec::with_capacity(h.n);
        for k in 0..h.n {
            let line = lines.next().ok_or(DataError::Malformed { record: k, message: "missing profile record".into() })??;
            let rec: ProfileRecord = serde_json::from_str(&line)
                .map_err(|e| DataError::Malformed { record: k, message: format!("profile: {e}") })?;
            let dim = |what: &str, got: usize, want: usize| -> Result<(), DataError> {
                if got != want {
                    return Err(DataError::Dimension {
                        record: k,
                        message: format!("profile {what} has {got} values, expected {want}"),
                    });
                }
                Ok(())
            };
            if rec.annotator != k {
                return Err(DataError::Malformed { record: k, message: format!("profile for annotator {} out of order", rec.annotator) });
            }
            dim("focus", rec.focus.len(), h.num_tokens)?;
            dim("decisionWeights", rec.decision_weights.len(), h.c * h.raw_dim)?;
            dim("biasShift", rec.bias_shift.len(), h.c)?;
            out.push(AnnotatorProfile {
                focus: rec.focus,
                decision_weights: Matrix::from_vec(h.c, h.raw_dim, rec.decision_weights).expect("checked length"),
                bias_shift: rec.bias_shift,
                noise_rate: rec.noise_rate,
            });
        }
        Some(out)
    } else {
        None
    };

    let mut samples = Vec::with_capacity(h.num_samples);
    for line in lines {
        let i = samples.len();
        let line = line?;
        if i >= h.num_samples {
            return Err(DataError::Malformed { record: i, message: format!("more records than the {} promised", h.num_samples) });
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| ser_err(i, e))?;
        if rec.tokens.len() != h.num_tokens * h.raw_dim {
            return Err(DataError::Dimension {
                record: i,
                message: format!("{} token values, expected {}x{}", rec.tokens.len(), h.num_tokens, h.raw_dim),
            });
        }
        if rec.labels.len() != h.n {
            return Err(DataError::Dimension {
                record: i,
                message: format!("{} labels, expected {}", rec.labels.len(), h.n),
            });
        }
        let mut labels = Vec::with_capacity(h.n);
        for (k, &v) in rec.labels.iter().enumerate() {
            match v {
                -1 => labels.push(None),
                v if v >= 0 && (v as usize) < h.c => labels.push(Some(v as usize)),
                v => return Err(DataError::LabelRange { record: i, annotator: k, value: v, classes: h.c }),
            }
        }
        let raw_tokens = Matrix::from_vec(h.num_tokens, h.raw_dim, rec.tokens).expect("checked length");
        samples.push(Sample { raw_tokens, labels });
    }
    if samples.len() != h.num_samples {
        return Err(DataError::Truncated { expected: h.num_samples, found: samples.len() });
    }
    Ok(Dataset { num_annotators: h.n, num_classes: h.c, num_tokens: h.num_tokens, raw_dim: h.raw_dim, samples, profiles })
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<(), DataError> {
    fs::write(path, to_bytes(d)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    read_dataset(BufReader::new(fs::File::open(path)?))
}
