//! Desk-scale experiments: variant comparisons, pre- versus post-training
//! majority voting, sparse-annotation sweeps, attention fidelity against
//! planted focus, efficiency, and attention dumps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{apply_sparsity, generate_synthetic, split, DataError, Dataset, GeneratorConfig};
use crate::metrics::{
    accuracy, evaluate, evaluate_consensus, majority_targets, majority_vote_predictions, predict_labels, ConsensusReport,
    EvalReport, MetricsError,
};
use crate::model::{Model, ModelConfig, ModelError, Variant};
use crate::seed::derive_seed;
use crate::train::{train, TrainConfig, TrainError, TrainHistory};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment spec: {0}")]
    Spec(String),
    #[error("dataset has no planted profiles")]
    NoProfiles,
    #[error("harness I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExperimentSpec {
    pub generator: GeneratorConfig,
    /// Architecture; dataset dimensions and seed are filled in per run.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: (f64, f64, f64),
    pub variants: Vec<Variant>,
    pub sparsity_rates: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Worker threads for independent cells.
    pub jobs: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        let generator = GeneratorConfig::default();
        Self {
            model: ModelConfig {
                num_annotators: generator.num_annotators,
                num_classes: generator.num_classes,
                num_tokens: generator.num_tokens,
                raw_dim: generator.raw_dim,
                ..ModelConfig::default()
            },
            generator,
            train: TrainConfig::default(),
            split: (0.8, 0.1, 0.1),
            variants: vec![Variant::Full, Variant::Base],
            sparsity_rates: vec![0.0],
            seeds: vec![0],
            jobs: 1,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(HarnessError::Spec("variants must be non-empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Spec("seeds must be non-empty".into()));
        }
        if self.sparsity_rates.is_empty() {
            return Err(HarnessError::Spec("sparsityRates must be non-empty".into()));
        }
        if let Some(r) = self.sparsity_rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(HarnessError::Spec(format!("sparsity rate {r} outside [0, 1)")));
        }
        if self.jobs == 0 {
            return Err(HarnessError::Spec("jobs must be at least 1".into()));
        }
        self.generator.validate()?;
        self.model_config(0).validate()?;
        let mut train = self.train.clone();
        train.variant = Variant::Full;
        train.validate()?;
        Ok(())
    }

    /// Model config for `seed`, sized to the generator.
    pub fn model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            num_annotators: self.generator.num_annotators,
            num_classes: self.generator.num_classes,
            num_tokens: self.generator.num_tokens,
            raw_dim: self.generator.raw_dim,
            seed: derive_seed(seed, "model"),
            ..self.model.clone()
        }
    }

    pub fn train_config(&self, seed: u64, variant: Variant) -> TrainConfig {
        TrainConfig { seed: derive_seed(seed, "train"), variant, ..self.train.clone() }
    }

    /// Generates and splits the dataset of `seed`.
    pub fn splits(&self, seed: u64) -> Result<Splits> {
        let gen = GeneratorConfig { seed: derive_seed(seed, "data"), ..self.generator.clone() };
        let data = generate_synthetic(&gen)?;
        let (train, val, test) = split(&data, self.split, derive_seed(seed, "split"))?;
        Ok(Splits { train, val, test })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase", tag = "kind")]
pub enum VariantReport {
    PerAnnotator(EvalReport),
    /// Consensus models report a single accuracy against majority labels.
    Consensus(ConsensusReport),
}

impl VariantReport {
    /// Average accuracy, or the consensus accuracy for consensus models.
    pub fn headline_accuracy(&self) -> f64 {
        match self {
            VariantReport::PerAnnotator(r) => r.avg_accuracy,
            VariantReport::Consensus(r) => r.accuracy,
        }
    }

    pub fn eval(&self) -> Option<&EvalReport> {
        match self {
            VariantReport::PerAnnotator(r) => Some(r),
            VariantReport::Consensus(_) => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VariantRun {
    pub variant: Variant,
    pub model: Model,
    pub history: TrainHistory,
    pub report: VariantReport,
    pub seconds: f64,
}

/// Trains `variant` on the splits and evaluates it on the test split.
pub fn run_variant(variant: Variant, splits: &Splits, model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<VariantRun> {
    let start = Instant::now();
    let model = Model::new(model_cfg.clone(), variant)?;
    let cfg = TrainConfig { variant, ..train_cfg.clone() };
    let (model, history) = train(model, &splits.train, &splits.val, &cfg)?;
    let report = report_for(&model, &splits.test)?;
    Ok(VariantRun { variant, model, history, report, seconds: start.elapsed().as_secs_f64() })
}

pub fn report_for(model: &Model, test: &Dataset) -> Result<VariantReport> {
    Ok(if model.variant().is_consensus() {
        let preds: Vec<usize> = predict_labels(model, test)?.into_iter().map(|r| r[0]).collect();
        VariantReport::Consensus(evaluate_consensus(&preds, test)?)
    } else {
        VariantReport::PerAnnotator(evaluate(model, test)?)
    })
}

/// `(R_pre, R_post)`: the consensus model's accuracy and the majority vote of
/// the per-annotator model's predictions, both against majority labels.
pub fn pre_post_from(pooled: &Model, per_annotator: &Model, test: &Dataset) -> Result<(f64, f64)> {
    if !pooled.variant().is_consensus() || per_annotator.variant().is_consensus() {
        return Err(HarnessError::Spec("expected a consensus model and a per-annotator model".into()));
    }
    let targets = majority_targets(test);
    let pre: Vec<_> = predict_labels(pooled, test)?.into_iter().map(|r| Some(r[0])).collect();
    let preds = predict_labels(per_annotator, test)?;
    let n = test.num_annotators;
    let columns: Vec<Vec<usize>> = (0..n).map(|k| preds.iter().map(|r| r[k]).collect()).collect();
    let post: Vec<_> = majority_vote_predictions(&columns)?.into_iter().map(Some).collect();
    Ok((accuracy(&pre, &targets)?, accuracy(&post, &targets)?))
}

pub fn compare_pre_post(splits: &Splits, model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<(f64, f64)> {
    let pooled = run_variant(Variant::PooledPremv, splits, model_cfg, train_cfg)?;
    let full = run_variant(Variant::Full, splits, model_cfg, train_cfg)?;
    pre_post_from(&pooled.model, &full.model, &splits.test)
}

/// Spearman rank correlation with average ranks for ties. Zero variance on
/// either side yields 0.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman needs equal lengths");
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb) * (y - mb)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Mean attention row of every annotator over `data`.
pub fn mean_attention(model: &Model, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let (n, t) = (model.config().num_annotators, model.config().num_tokens);
    let mut sum = vec![vec![0.0; t]; n];
    for chunk in data.samples.chunks(256) {
        let raws: Vec<_> = chunk.iter().map(|s| &s.raw_tokens).collect();
        for p in model.predict_batch(&raws)? {
            let attn = p.attention.ok_or_else(|| HarnessError::Spec(format!("variant {} has no attention", model.variant())))?;
            for (k, row) in sum.iter_mut().enumerate() {
                for (acc, w) in row.iter_mut().zip(attn.weights.row(k)) {
                    *acc += w;
                }
            }
        }
    }
    let count = data.len().max(1) as f64;
    Ok(sum.into_iter().map(|r| r.into_iter().map(|v| v / count).collect()).collect())
}

/// Per-annotator Spearman correlation between planted focus and mean attention.
pub fn attention_fidelity(model: &Model, data: &Dataset) -> Result<Vec<f64>> {
    let profiles = data.profiles.as_ref().ok_or(HarnessError::NoProfiles)?;
    let attn = mean_attention(model, data)?;
    Ok(profiles.iter().zip(&attn).map(|(p, a)| spearman(&p.focus, a)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct EfficiencyReport {
    pub parameter_count: usize,
    pub mean_inference_seconds: f64,
    /// Mean per-sample seconds of each repetition.
    pub per_repetition: Vec<f64>,
}

/// Parameter count and mean single-sample forward time over
/// `repetitions × samples`, after one untimed warmup pass.
pub fn efficiency_report(model: &Model, data: &Dataset, repetitions: usize) -> Result<EfficiencyReport> {
    if repetitions == 0 {
        return Err(HarnessError::Spec("repetitions must be at least 1".into()));
    }
    if data.is_empty() {
        return Err(HarnessError::Spec("efficiency needs at least one sample".into()));
    }
    for s in &data.samples {
        model.predict(&s.raw_tokens)?;
    }
    let mut per_repetition = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        for s in &data.samples {
            std::hint::black_box(model.predict(&s.raw_tokens)?);
        }
        per_repetition.push(start.elapsed().as_secs_f64() / data.len() as f64);
    }
    Ok(EfficiencyReport {
        parameter_count: model.count_parameters(),
        mean_inference_seconds: per_repetition.iter().sum::<f64>() / repetitions as f64,
        per_repetition,
    })
}

/// `(width, height)` of a heatmap over `tokens` positions: a square grid when
/// `tokens` is a perfect square, otherwise a single row.
pub fn heatmap_layout(tokens: usize) -> (usize, usize) {
    let side = (tokens as f64).sqrt().round() as usize;
    if side * side == tokens {
        (side, side)
    } else {
        (tokens, 1)
    }
}

/// Binary 8-bit PGM of one attention row, min-max normalized.
pub fn pgm_bytes(row: &[f64]) -> Vec<u8> {
    let (w, h) = heatmap_layout(row.len());
    let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(row.iter().map(|v| if max > min { (255.0 * (v - min) / (max - min)).round() as u8 } else { 0 }));
    out
}

/// Writes `sample_{i}.csv` (annotators × tokens) and one
/// `sample_{i}_a{k}.pgm` per annotator for the first `limit` samples.
pub fn dump_attention(model: &Model, data: &Dataset, dir: &Path, limit: Option<usize>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let count = limit.unwrap_or(data.len()).min(data.len());
    let mut written = Vec::new();
    for (i, s) in data.samples[..count].iter().enumerate() {
        let pred = model.predict(&s.raw_tokens)?;
        let attn = pred.attention.ok_or_else(|| HarnessError::Spec(format!("variant {} has no attention", model.variant())))?;
        let mut csv = String::new();
        for k in 0..attn.weights.rows() {
            let row: Vec<String> = attn.weights.row(k).iter().map(|v| v.to_string()).collect();
            csv.push_str(&row.join(","));
            csv.push('\n');
            let pgm = dir.join(format!("sample_{i}_a{k}.pgm"));
            fs::write(&pgm, pgm_bytes(attn.weights.row(k)))?;
            written.push(pgm);
        }
        let path = dir.join(format!("sample_{i}.csv"));
        fs::write(&path, csv)?;
        written.push(path);
    }
    written.sort();
    Ok(written)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ExperimentRow {
    pub variant: Variant,
    pub seed: u64,
    pub sparsity_rate: f64,
    pub report: VariantReport,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_loss: f64,
    /// `(acc₀ − acc) / acc₀` against the rate-0 row of the same variant and
    /// seed; `None` when no rate-0 row exists.
    pub relative_drop: Option<f64>,
    pub seconds: f64,
}

impl ExperimentRow {
    pub fn accuracy(&self) -> f64 {
        self.report.headline_accuracy()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Aggregate {
    pub variant: Variant,
    pub sparsity_rate: f64,
    pub seeds: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub dic_mean: Option<f64>,
    pub dic_std: Option<f64>,
    pub relative_drop_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ExperimentReport {
    pub rows: Vec<ExperimentRow>,
    pub aggregates: Vec<Aggregate>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ExperimentReport {
    pub fn from_rows(rows: Vec<ExperimentRow>) -> Self {
        let mut keys: Vec<(Variant, f64)> = Vec::new();
        for r in &rows {
            if !keys.iter().any(|(v, s)| *v == r.variant && *s == r.sparsity_rate) {
                keys.push((r.variant, r.sparsity_rate));
            }
        }
        let aggregates = keys
            .into_iter()
            .map(|(variant, rate)| {
                let cell: Vec<&ExperimentRow> = rows.iter().filter(|r| r.variant == variant && r.sparsity_rate == rate).collect();
                let (accuracy_mean, accuracy_std) = mean_std(&cell.iter().map(|r| r.accuracy()).collect::<Vec<_>>());
                let dics: Vec<f64> = cell.iter().filter_map(|r| r.report.eval().map(|e| e.dic)).collect();
                let (dic_mean, dic_std) = if dics.is_empty() {
                    (None, None)
                } else {
                    let (m, s) = mean_std(&dics);
                    (Some(m), Some(s))
                };
                let drops: Vec<f64> = cell.iter().filter_map(|r| r.relative_drop).collect();
                Aggregate {
                    variant,
                    sparsity_rate: rate,
                    seeds: cell.len(),
                    accuracy_mean,
                    accuracy_std,
                    dic_mean,
                    dic_std,
                    relative_drop_mean: (!drops.is_empty()).then(|| mean_std(&drops).0),
                }
            })
            .collect();
        ExperimentReport { rows, aggregates }
    }

    pub fn rows_for(&self, variant: Variant, rate: f64) -> Vec<&ExperimentRow> {
        self.rows.iter().filter(|r| r.variant == variant && r.sparsity_rate == rate).collect()
    }

    pub fn row(&self, variant: Variant, seed: u64, rate: f64) -> Option<&ExperimentRow> {
        self.rows.iter().find(|r| r.variant == variant && r.seed == seed && r.sparsity_rate == rate)
    }

    /// One row per cell. Wall-clock time is left out so reruns compare byte-identical.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seed,sparsity_rate,accuracy,avg_f1,copr_accuracy,copr_f1,dic,relative_drop,best_epoch,epochs_run,best_val_loss\n");
        for r in &self.rows {
            let (f1, copr, copr_f1, dic) = match &r.report {
                VariantReport::PerAnnotator(e) => (Some(e.avg_f1), Some(e.copr_accuracy), Some(e.copr_f1), Some(e.dic)),
                VariantReport::Consensus(c) => (Some(c.f1), None, None, None),
            };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.variant,
                r.seed,
                r.sparsity_rate,
                r.accuracy(),
                opt(f1),
                opt(copr),
                opt(copr_f1),
                opt(dic),
                opt(r.relative_drop),
                r.best_epoch,
                r.epochs_run,
                r.best_val_loss
            )
            .expect("write to string");
        }
        out
    }

    pub fn aggregates_csv(&self) -> String {
        let mut out = String::from("variant,sparsity_rate,seeds,accuracy_mean,accuracy_std,dic_mean,dic_std,relative_drop_mean\n");
        for a in &self.aggregates {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                a.variant,
                a.sparsity_rate,
                a.seeds,
                a.accuracy_mean,
                a.accuracy_std,
                opt(a.dic_mean),
                opt(a.dic_std),
                opt(a.relative_drop_mean)
            )
            .expect("write to string");
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for a in &self.aggregates {
            write!(s, "{:<12} rate {:<4} acc {:.4} ± {:.4}", a.variant.as_str(), a.sparsity_rate, a.accuracy_mean, a.accuracy_std)
                .expect("write to string");
            if let (Some(m), Some(sd)) = (a.dic_mean, a.dic_std) {
                write!(s, "  DIC {m:.4} ± {sd:.4}").expect("write to string");
            }
            if let Some(d) = a.relative_drop_mean {
                write!(s, "  drop {:.2}%", 100.0 * d).expect("write to string");
            }
            writeln!(s, "  ({} seeds)", a.seeds).expect("write to string");
        }
        let total: f64 = self.rows.iter().map(|r| r.seconds).sum();
        writeln!(s, "wall-clock {total:.1}s over {} runs", self.rows.len()).expect("write to string");
        s
    }
}

struct Cell {
    seed: u64,
    rate: f64,
    variant: Variant,
}

fn run_cell(spec: &ExperimentSpec, cell: &Cell) -> Result<ExperimentRow> {
    let mut splits = spec.splits(cell.seed)?;
    if cell.rate > 0.0 {
        splits.train = apply_sparsity(&splits.train, cell.rate, derive_seed(cell.seed, "sparsity"))?;
    }
    let run = run_variant(cell.variant, &splits, &spec.model_config(cell.seed), &spec.train_config(cell.seed, cell.variant))?;
    Ok(ExperimentRow {
        variant: cell.variant,
        seed: cell.seed,
        sparsity_rate: cell.rate,
        best_epoch: run.history.best_epoch,
        epochs_run: run.history.epochs.len(),
        best_val_loss: run.history.best_val_loss(),
        report: run.report,
        relative_drop: None,
        seconds: run.seconds,
    })
}

/// Runs every (seed, rate, variant) cell. Sparsity touches the training split
/// only. Rows come back in seed, rate, variant order regardless of `jobs`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    let cells: Vec<Cell> = spec
        .seeds
        .iter()
        .flat_map(|&seed| {
            spec.sparsity_rates.iter().flat_map(move |&rate| spec.variants.iter().map(move |&variant| Cell { seed, rate, variant }))
        })
        .collect();

    let mut results: Vec<Option<Result<ExperimentRow>>> = (0..cells.len()).map(|_| None).collect();
    if spec.jobs == 1 {
        for (slot, cell) in results.iter_mut().zip(&cells) {
            *slot = Some(run_cell(spec, cell));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let done = std::sync::Mutex::new(&mut results);
        std::thread::scope(|scope| {
            for _ in 0..spec.jobs.min(cells.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    let Some(cell) = cells.get(i) else { break };
                    let row = run_cell(spec, cell);
                    done.lock().expect("no poisoned workers")[i] = Some(row);
                });
            }
        });
    }
    let mut rows = results.into_iter().map(|r| r.expect("every cell ran")).collect::<Result<Vec<_>>>()?;

    let baseline: Vec<(Variant, u64, f64)> =
        rows.iter().filter(|r| r.sparsity_rate == 0.0).map(|r| (r.variant, r.seed, r.accuracy())).collect();
    for r in &mut rows {
        if let Some((_, _, acc0)) = baseline.iter().find(|(v, s, _)| *v == r.variant && *s == r.seed) {
            r.relative_drop = Some((acc0 - r.accuracy()) / acc0);
        }
    }
    Ok(ExperimentReport::from_rows(rows))
}

/// [`run_experiment`] over `rates` with the spec's other settings.
pub fn sparse_sweep(spec: &ExperimentSpec, rates: &[f64]) -> Result<ExperimentReport> {
    run_experiment(&ExperimentSpec { sparsity_rates: rates.to_vec(), ..spec.clone() })
}
