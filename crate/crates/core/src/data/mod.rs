//! Multi-annotator datasets: synthetic generation with planted tendencies,
//! persistence, splitting, sparsity masking and majority labels.

mod generate;
mod io;

use rand::seq::index;
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::numerics::Matrix;
use crate::seed::rng_for;

pub use generate::{generate_synthetic, label_from_profile, GeneratorConfig};
pub use io::{dataset_digest, load_dataset, read_dataset, save_dataset, to_bytes, write_dataset};

/// `None` is a missing annotation (`-1` on disk).
pub type Label = Option<usize>;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("record {record}: {message}")]
    Malformed { record: usize, message: String },
    #[error("record {record}: dimension mismatch: {message}")]
    Dimension { record: usize, message: String },
    #[error("record {record}: label {value} for annotator {annotator} outside [0, {classes}) and not -1")]
    LabelRange { record: usize, annotator: usize, value: i64, classes: usize },
    #[error("truncated file: header promises {expected} samples, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("invalid split: {0}")]
    Split(String),
    #[error("invalid sparsity rate {0}; expected a value in [0, 1)")]
    SparsityRate(f64),
    #[error("annotator {0} has no labels left")]
    StarvedAnnotator(usize),
    #[error("every label is missing")]
    AllMissing,
    #[error("dataset I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Planted tendency of one synthetic annotator.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatorProfile {
    /// Non-negative weights over token positions summing to 1.
    pub focus: Vec<f64>,
    /// `C × rawDim`.
    pub decision_weights: Matrix,
    pub bias_shift: Vec<f64>,
    pub noise_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `numTokens × rawDim`.
    pub raw_tokens: Matrix,
    pub labels: Vec<Label>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_annotators: usize,
    pub num_classes: usize,
    pub num_tokens: usize,
    pub raw_dim: usize,
    pub samples: Vec<Sample>,
    pub profiles: Option<Vec<AnnotatorProfile>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Same header and profiles, different samples.
    pub fn with_samples(&self, samples: Vec<Sample>) -> Dataset {
        Dataset { samples, ..self.header_only() }
    }

    fn header_only(&self) -> Dataset {
        Dataset {
            num_annotators: self.num_annotators,
            num_classes: self.num_classes,
            num_tokens: self.num_tokens,
            raw_dim: self.raw_dim,
            samples: Vec::new(),
            profiles: self.profiles.clone(),
        }
    }

    /// Label column of annotator `k`.
    pub fn annotator_labels(&self, k: usize) -> Vec<Label> {
        self.samples.iter().map(|s| s.labels[k]).collect()
    }

    /// Label columns of all annotators, indexed `[annotator][sample]`.
    pub fn label_columns(&self) -> Vec<Vec<Label>> {
        (0..self.num_annotators).map(|k| self.annotator_labels(k)).collect()
    }

    pub fn label_count(&self, k: usize) -> usize {
        self.samples.iter().filter(|s| s.labels[k].is_some()).count()
    }

    pub fn missing_count(&self) -> usize {
        self.samples.iter().map(|s| s.labels.iter().filter(|l| l.is_none()).count()).sum()
    }

    /// Annotators with no label at all, in index order.
    pub fn starved_annotators(&self) -> Vec<usize> {
        (0..self.num_annotators).filter(|&k| self.label_count(k) == 0).collect()
    }
}

/// Modal class among non-missing labels; ties go to the smallest class index.
pub fn majority_label(labels: &[Label]) -> Result<usize, DataError> {
    let max = labels.iter().flatten().copied().max().ok_or(DataError::AllMissing)?;
    let mut counts = vec![0usize; max + 1];
    for l in labels.iter().flatten() {
        counts[*l] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    Ok(best)
}

/// Seeded shuffle, then contiguous train/val/test cuts of sizes
/// `floor(f_train·N)`, `floor(f_val·N)` and the remainder.
pub fn split(d: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset), DataError> {
    let (ft, fv, fs) = fractions;
    if !(ft > 0.0 && fv > 0.0 && fs > 0.0) {
        return Err(DataError::Split(format!("fractions must be positive, got ({ft}, {fv}, {fs})")));
    }
    if ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(DataError::Split(format!("fractions sum to {}, expected 1", ft + fv + fs)));
    }
    let total = d.len();
    let n_train = (ft * total as f64 + 1e-9).floor() as usize;
    let n_val = (fv * total as f64 + 1e-9).floor() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= total {
        return Err(DataError::Split(format!(
            "{total} samples with fractions ({ft}, {fv}, {fs}) leave an empty split"
        )));
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng_for(seed, "split"));
    let take = |idx: &[usize]| d.with_samples(idx.iter().map(|&i| d.samples[i].clone()).collect());
    Ok((take(&order[..n_train]), take(&order[n_train..n_train + n_val]), take(&order[n_train + n_val..])))
}

/// Sets exactly `floor(rate · nonMissing)` labels to missing, chosen uniformly
/// without replacement over the non-missing (sample, annotator) pairs.
pub fn apply_sparsity(d: &Dataset, rate: f64, seed: u64) -> Result<Dataset, DataError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(DataError::SparsityRate(rate));
    }
    let pairs: Vec<(usize, usize)> = d
        .samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.labels.iter().enumerate().filter(|(_, l)| l.is_some()).map(move |(k, _)| (i, k)))
        .collect();
    let remove = (rate * pairs.len() as f64).floor() as usize;
    let mut out = d.clone();
    let chosen = index::sample(&mut rng_for(seed, "sparsity"), pairs.len(), remove);
    for j in chosen.iter() {
        let (i, k) = pairs[j];
        out.samples[i].labels[k] = None;
    }
    if let Some(&k) = out.starved_annotators().first() {
        return Err(DataError::StarvedAnnotator(k));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n_samples: usize, n: usize) -> Dataset {
        Dataset {
            num_annotators: n,
            num_classes: 3,
            num_tokens: 2,
            raw_dim: 1,
            samples: (0..n_samples)
                .map(|i| Sample {
                    raw_tokens: Matrix::from_vec(2, 1, vec![i as f64, -(i as f64)]).unwrap(),
                    labels: (0..n).map(|k| Some((i + k) % 3)).collect(),
                })
                .collect(),
            profiles: None,
        }
    }

    #[test]
    fn majority_examples() {
        assert_eq!(majority_label(&[Some(0), Some(0), Some(1)]).unwrap(), 0);
        assert_eq!(majority_label(&[Some(0), Some(1)]).unwrap(), 0);
        assert_eq!(majority_label(&[Some(2), None, Some(2), Some(1)]).unwrap(), 2);
        assert!(matches!(majority_label(&[None, None]), Err(DataError::AllMissing)));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let d = toy(100, 2);
        let (a, b, c) = split(&d, (0.8, 0.1, 0.1), 5).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (80, 10, 10));
        let (a2, b2, c2) = split(&d, (0.8, 0.1, 0.1), 5).unwrap();
        assert_eq!((a, b, c), (a2, b2, c2));
    }

    #[test]
    fn split_rejects_degenerate_fractions() {
        let d = toy(100, 2);
        assert!(split(&d, (1.0, 0.0, 0.0), 1).is_err());
        assert!(split(&d, (0.5, 0.2, 0.2), 1).is_err());
        assert!(split(&toy(3, 2), (0.8, 0.1, 0.1), 1).is_err());
    }

    #[test]
    fn split_reassembles_original_multiset() {
        let d = toy(57, 3);
        let (a, b, c) = split(&d, (0.6, 0.2, 0.2), 11).unwrap();
        let mut keys: Vec<i64> = a.samples.iter().chain(&b.samples).chain(&c.samples).map(|s| s.raw_tokens.get(0, 0) as i64).collect();
        keys.sort();
        assert_eq!(keys, (0..57).collect::<Vec<_>>());
    }

    #[test]
    fn sparsity_zero_is_identity() {
        let d = toy(30, 3);
        assert_eq!(apply_sparsity(&d, 0.0, 1).unwrap(), d);
    }

    #[test]
    fn sparsity_removes_exact_floor_count() {
        let d = toy(1000, 10);
        let s = apply_sparsity(&d, 0.4, 3).unwrap();
        assert_eq!(s.missing_count(), 4000);
        assert_eq!(s, apply_sparsity(&d, 0.4, 3).unwrap());
        assert_ne!(s, apply_sparsity(&d, 0.4, 4).unwrap());
    }

    #[test]
    fn sparsity_never_resurrects() {
        let mut d = toy(50, 4);
        for s in d.samples.iter_mut().step_by(3) {
            s.labels[1] = None;
        }
        let before = d.missing_count();
        let s = apply_sparsity(&d, 0.25, 9).unwrap();
        let non_missing = 50 * 4 - before;
        assert_eq!(s.missing_count(), before + non_missing / 4);
        for (orig, new) in d.samples.iter().zip(&s.samples) {
            for (a, b) in orig.labels.iter().zip(&new.labels) {
                if a.is_none() {
                    assert!(b.is_none());
                }
            }
        }
    }

    #[test]
    fn sparsity_starving_an_annotator_is_an_error() {
        let d = toy(1, 2);
        assert!(matches!(apply_sparsity(&d, 0.5, 0), Err(DataError::StarvedAnnotator(_))));
        assert!(matches!(apply_sparsity(&d, 1.0, 0), Err(DataError::SparsityRate(_))));
    }
}
