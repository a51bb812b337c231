//! Accuracy, macro-F1, Cohen's kappa, inter-annotator consistency matrices,
//! DIC and majority-vote consensus, plus the evaluation report built on them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{majority_label, Dataset, Label};
use crate::model::{Model, ModelError};
use crate::numerics::Matrix;

const PREDICT_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no comparable (non-missing) pairs")]
    NoPairs,
    #[error("length mismatch: {left} vs {right}")]
    Length { left: usize, right: usize },
    #[error("label {label} outside [0, {classes})")]
    ClassRange { label: usize, classes: usize },
    #[error("consistency matrices have shapes {left}x{left} and {right}x{right}")]
    Shape { left: usize, right: usize },
    #[error("nothing to evaluate: {0}")]
    Empty(String),
    #[error("predictions cover {got} annotators, dataset has {expected}")]
    Annotators { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Result<T> = std::result::Result<T, MetricsError>;

/// Pairs where both sides are present.
fn comparable<'a>(a: &'a [Label], b: &'a [Label]) -> Result<impl Iterator<Item = (usize, usize)> + 'a> {
    if a.len() != b.len() {
        return Err(MetricsError::Length { left: a.len(), right: b.len() });
    }
    Ok(a.iter().zip(b).filter_map(|(x, y)| Some(((*x)?, (*y)?))))
}

fn check_class(label: usize, classes: usize) -> Result<usize> {
    if label >= classes {
        return Err(MetricsError::ClassRange { label, classes });
    }
    Ok(label)
}

/// Fraction of matches over pairs where neither side is missing.
pub fn accuracy(preds: &[Label], refs: &[Label]) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for (p, r) in comparable(preds, refs)? {
        hits += usize::from(p == r);
        total += 1;
    }
    if total == 0 {
        return Err(MetricsError::NoPairs);
    }
    Ok(hits as f64 / total as f64)
}

/// Unweighted mean over classes of `2tp / (2tp + fp + fn)`. Classes that
/// never occur in `refs` and are never predicted are skipped.
pub fn macro_f1(preds: &[Label], refs: &[Label], classes: usize) -> Result<f64> {
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fneg = vec![0usize; classes];
    let mut total = 0;
    for (p, r) in comparable(preds, refs)? {
        check_class(p, classes)?;
        check_class(r, classes)?;
        total += 1;
        if p == r {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[r] += 1;
        }
    }
    if total == 0 {
        return Err(MetricsError::NoPairs);
    }
    let scores: Vec<f64> = (0..classes)
        .filter(|&c| tp[c] + fp[c] + fneg[c] > 0)
        .map(|c| 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fneg[c]) as f64)
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Cohen's kappa over pairs where both labels are present.
///
/// Computed from integer counts as `(N·agree − Σ ra·rb) / (N² − Σ ra·rb)`,
/// which equals `(p_o − p_e) / (1 − p_e)`. When `p_e = 1` the result is 1 if
/// the compared sequences are identical and 0 otherwise.
pub fn cohen_kappa(ya: &[Label], yb: &[Label], classes: usize) -> Result<f64> {
    let mut ra = vec![0u64; classes];
    let mut rb = vec![0u64; classes];
    let (mut n, mut agree) = (0u64, 0u64);
    for (a, b) in comparable(ya, yb)? {
        ra[check_class(a, classes)?] += 1;
        rb[check_class(b, classes)?] += 1;
        agree += u64::from(a == b);
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::NoPairs);
    }
    let chance: u64 = ra.iter().zip(&rb).map(|(x, y)| x * y).sum();
    let denom = n * n - chance;
    if denom == 0 {
        return Ok(if agree == n { 1.0 } else { 0.0 });
    }
    Ok((n as f64 * agree as f64 - chance as f64) / denom as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub enum ConsistencyKind {
    GroundTruth,
    Predicted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyMatrix {
    pub values: Matrix,
    pub kind: ConsistencyKind,
}

impl ConsistencyMatrix {
    pub fn size(&self) -> usize {
        self.values.rows()
    }

    /// Square CSV without header.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.size() {
            let row: Vec<String> = self.values.row(r).iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

impl Serialize for ConsistencyMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let rows: Vec<&[f64]> = (0..self.size()).map(|r| self.values.row(r)).collect();
        let mut st = s.serialize_struct("ConsistencyMatrix", 2)?;
        st.serialize_field("kind", &self.kind)?;
        st.serialize_field("values", &rows)?;
        st.end()
    }
}

/// `m_kl = κ(Y_k, Y_l)` with a unit diagonal.
pub fn consistency_matrix(label_sets: &[Vec<Label>], classes: usize, kind: ConsistencyKind) -> Result<ConsistencyMatrix> {
    consistency_with(label_sets.len(), kind, |k, l| cohen_kappa(&label_sets[k], &label_sets[l], classes))
}

fn consistency_with(n: usize, kind: ConsistencyKind, mut kappa: impl FnMut(usize, usize) -> Result<f64>) -> Result<ConsistencyMatrix> {
    let mut values = Matrix::identity(n);
    for k in 0..n {
        for l in k + 1..n {
            let v = kappa(k, l)?;
            values.set(k, l, v);
            values.set(l, k, v);
        }
    }
    Ok(ConsistencyMatrix { values, kind })
}

/// Frobenius norm of `M − M'`.
pub fn dic(m: &ConsistencyMatrix, m_prime: &ConsistencyMatrix) -> Result<f64> {
    if m.size() != m_prime.size() || m.values.cols() != m_prime.values.cols() {
        return Err(MetricsError::Shape { left: m.size(), right: m_prime.size() });
    }
    let sq: f64 = m.values.as_slice().iter().zip(m_prime.values.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq.sqrt())
}

/// Per-sample modal prediction over annotators (`[annotator][sample]`),
/// ties to the smallest class.
pub fn majority_vote_predictions(per_annotator: &[Vec<usize>]) -> Result<Vec<usize>> {
    let first = per_annotator.first().ok_or_else(|| MetricsError::Empty("no annotators".into()))?;
    for p in per_annotator {
        if p.len() != first.len() {
            return Err(MetricsError::Length { left: first.len(), right: p.len() });
        }
    }
    Ok((0..first.len())
        .map(|i| {
            let votes: Vec<Label> = per_annotator.iter().map(|p| Some(p[i])).collect();
            majority_label(&votes).expect("at least one vote")
        })
        .collect())
}

/// How the predicted consistency matrix chooses its support.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ConsistencyMode {
    /// Prediction pairs only on samples where both annotators have a ground-truth label.
    #[default]
    Restricted,
    /// Prediction pairs on every sample.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct AnnotatorScore {
    pub annotator: usize,
    /// Number of non-missing ground-truth labels scored.
    pub evaluated: usize,
    /// `None` when the annotator has no evaluable label.
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalReport {
    pub num_samples: usize,
    pub num_classes: usize,
    pub per_annotator: Vec<AnnotatorScore>,
    /// Annotators without evaluable labels; excluded from the averages.
    pub absent: Vec<usize>,
    pub avg_accuracy: f64,
    pub avg_f1: f64,
    pub copr_accuracy: f64,
    pub copr_f1: f64,
    pub dic: f64,
    pub mode: ConsistencyMode,
    pub m: ConsistencyMatrix,
    pub m_prime: ConsistencyMatrix,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalReport {
    pub fn per_annotator_accuracy(&self) -> Vec<Option<f64>> {
        self.per_annotator.iter().map(|s| s.accuracy).collect()
    }

    pub fn per_annotator_f1(&self) -> Vec<Option<f64>> {
        self.per_annotator.iter().map(|s| s.f1).collect()
    }

    /// Rows `accuracy` and `f1`; columns `A_1 … A_n, Avg, CoPr`. Absent
    /// annotators leave their cells empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric");
        for k in 0..self.per_annotator.len() {
            write!(out, ",A_{}", k + 1).expect("write to string");
        }
        out.push_str(",Avg,CoPr\n");
        for (name, vals, avg, copr) in [
            ("accuracy", self.per_annotator_accuracy(), self.avg_accuracy, self.copr_accuracy),
            ("f1", self.per_annotator_f1(), self.avg_f1, self.copr_f1),
        ] {
            out.push_str(name);
            for v in vals {
                out.push(',');
                out.push_str(&cell(v));
            }
            writeln!(out, ",{avg},{copr}").expect("write to string");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for a in &self.per_annotator {
            match (a.accuracy, a.f1) {
                (Some(acc), Some(f1)) => writeln!(s, "A_{:<3} acc {acc:.4}  f1 {f1:.4}  (n={})", a.annotator + 1, a.evaluated),
                _ => writeln!(s, "A_{:<3} absent (no evaluable labels)", a.annotator + 1),
            }
            .expect("write to string");
        }
        writeln!(s, "Avg   acc {:.4}  f1 {:.4}", self.avg_accuracy, self.avg_f1).expect("write to string");
        writeln!(s, "CoPr  acc {:.4}  f1 {:.4}", self.copr_accuracy, self.copr_f1).expect("write to string");
        writeln!(s, "DIC   {:.6}", self.dic).expect("write to string");
        s
    }
}

/// Consensus-model score against the majority of the raw annotations.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ConsensusReport {
    pub num_samples: usize,
    pub accuracy: f64,
    pub f1: f64,
}

impl ConsensusReport {
    pub fn to_csv(&self) -> String {
        format!("metric,consensus\naccuracy,{}\nf1,{}\n", self.accuracy, self.f1)
    }
}

/// Majority label of every sample, `None` where all labels are missing.
pub fn majority_targets(data: &Dataset) -> Vec<Label> {
    data.samples.iter().map(|s| majority_label(&s.labels).ok()).collect()
}

/// Scores one prediction per sample against the majority labels.
pub fn evaluate_consensus(preds: &[usize], data: &Dataset) -> Result<ConsensusReport> {
    if preds.len() != data.len() {
        return Err(MetricsError::Length { left: preds.len(), right: data.len() });
    }
    let targets = majority_targets(data);
    let p: Vec<Label> = preds.iter().map(|&c| Some(c)).collect();
    Ok(ConsensusReport {
        num_samples: data.len(),
        accuracy: accuracy(&p, &targets)?,
        f1: macro_f1(&p, &targets, data.num_classes)?,
    })
}

/// Builds the report from predicted labels indexed `[sample][annotator]`.
pub fn evaluate_predictions(preds: &[Vec<usize>], data: &Dataset, mode: ConsistencyMode) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(MetricsError::Empty("dataset has no samples".into()));
    }
    if preds.len() != data.len() {
        return Err(MetricsError::Length { left: preds.len(), right: data.len() });
    }
    let n = data.num_annotators;
    let classes = data.num_classes;
    if let Some(row) = preds.iter().find(|r| r.len() != n) {
        return Err(MetricsError::Annotators { expected: n, got: row.len() });
    }
    let pred_cols: Vec<Vec<usize>> = (0..n).map(|k| preds.iter().map(|r| r[k]).collect()).collect();
    let pred_labels: Vec<Vec<Label>> = pred_cols.iter().map(|c| c.iter().map(|&v| Some(v)).collect()).collect();
    let truth = data.label_columns();

    let mut per_annotator = Vec::with_capacity(n);
    let mut absent = Vec::new();
    for k in 0..n {
        let evaluated = truth[k].iter().filter(|l| l.is_some()).count();
        let (acc, f1) = if evaluated == 0 {
            absent.push(k);
            (None, None)
        } else {
            (Some(accuracy(&pred_labels[k], &truth[k])?), Some(macro_f1(&pred_labels[k], &truth[k], classes)?))
        };
        per_annotator.push(AnnotatorScore { annotator: k, evaluated, accuracy: acc, f1 });
    }
    let present: Vec<&AnnotatorScore> = per_annotator.iter().filter(|s| s.accuracy.is_some()).collect();
    if present.is_empty() {
        return Err(MetricsError::Empty("every annotator is absent".into()));
    }
    let mean = |f: &dyn Fn(&AnnotatorScore) -> f64| present.iter().map(|s| f(s)).sum::<f64>() / present.len() as f64;
    let avg_accuracy = mean(&|s| s.accuracy.expect("present"));
    let avg_f1 = mean(&|s| s.f1.expect("present"));

    let consensus = majority_vote_predictions(&pred_cols)?;
    let targets = majority_targets(data);
    let consensus_labels: Vec<Label> = consensus.iter().map(|&c| Some(c)).collect();
    let copr_accuracy = accuracy(&consensus_labels, &targets)?;
    let copr_f1 = macro_f1(&consensus_labels, &targets, classes)?;

    // Pairs with no overlapping ground truth get 0 in both matrices.
    let or_zero = |r: Result<f64>| match r {
        Err(MetricsError::NoPairs) => Ok(0.0),
        other => other,
    };
    let m = consistency_with(n, ConsistencyKind::GroundTruth, |k, l| or_zero(cohen_kappa(&truth[k], &truth[l], classes)))?;
    let m_prime = consistency_with(n, ConsistencyKind::Predicted, |k, l| match mode {
        ConsistencyMode::Full => cohen_kappa(&pred_labels[k], &pred_labels[l], classes),
        ConsistencyMode::Restricted => {
            let mask = |col: &[Label], other: &[Label], own: &[Label]| -> Vec<Label> {
                col.iter().zip(other).zip(own).map(|((p, o), s)| if o.is_some() && s.is_some() { *p } else { None }).collect()
            };
            let pk = mask(&pred_labels[k], &truth[l], &truth[k]);
            let pl = mask(&pred_labels[l], &truth[k], &truth[l]);
            or_zero(cohen_kappa(&pk, &pl, classes))
        }
    })?;
    let dic = dic(&m, &m_prime)?;

    Ok(EvalReport {
        num_samples: data.len(),
        num_classes: classes,
        per_annotator,
        absent,
        avg_accuracy,
        avg_f1,
        copr_accuracy,
        copr_f1,
        dic,
        mode,
        m,
        m_prime,
    })
}

/// Predicted labels of a per-annotator model, indexed `[sample][annotator]`.
pub fn predict_labels(model: &Model, data: &Dataset) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(PREDICT_CHUNK) {
        let raws: Vec<_> = chunk.iter().map(|s| &s.raw_tokens).collect();
        out.extend(model.predict_batch(&raws)?.iter().map(|p| p.labels()));
    }
    Ok(out)
}

/// Evaluates a per-annotator model in the default (restricted) mode.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<EvalReport> {
    evaluate_with_mode(model, data, ConsistencyMode::Restricted)
}

pub fn evaluate_with_mode(model: &Model, data: &Dataset, mode: ConsistencyMode) -> Result<EvalReport> {
    if model.variant().is_consensus() {
        return Err(MetricsError::Annotators { expected: data.num_annotators, got: 1 });
    }
    evaluate_predictions(&predict_labels(model, data)?, data, mode)
}

/// Evaluates a consensus model against majority labels.
pub fn evaluate_consensus_model(model: &Model, data: &Dataset) -> Result<ConsensusReport> {
    let preds: Vec<usize> = predict_labels(model, data)?.into_iter().map(|r| r[0]).collect();
    evaluate_consensus(&preds, data)
}
