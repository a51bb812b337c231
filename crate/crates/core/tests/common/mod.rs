//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tendency_core::data::{Label, Sample};
use tendency_core::model::{Model, ModelConfig, Variant};
use tendency_core::numerics::{Matrix, Tape};
use tendency_core::train::batch_loss;

pub fn config(n: usize, d: usize, heads: usize, tokens: usize, classes: usize, raw: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        num_annotators: n,
        num_classes: classes,
        num_tokens: tokens,
        raw_dim: raw,
        hidden_dim: d,
        num_heads: heads,
        ffn_dim: 2 * d,
        num_blocks: 1,
        seed,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::gaussian(rows, cols, std, rng)
}

/// Replaces every trainable tensor with random values of scale `std` so
/// that outputs and gradients are far from the near-uniform initial state.
pub fn perturb(model: &mut Model, std: f64, seed: u64) {
    let mut r = rng(seed);
    let names: Vec<String> = model.params().iter().map(|(_, n, _)| n.to_string()).collect();
    for name in names {
        let m = model.params_mut().by_name_mut(&name).unwrap();
        let noise = gaussian(m.rows(), m.cols(), std, &mut r);
        let base = if name.ends_with(".gain") { 1.0 } else { 0.0 };
        for (v, e) in m.as_mut_slice().iter_mut().zip(noise.as_slice()) {
            *v = base + e;
        }
    }
}

pub fn random_samples(n_samples: usize, tokens: usize, raw: usize, n: usize, classes: usize, seed: u64) -> Vec<Sample> {
    let mut r = rng(seed);
    (0..n_samples)
        .map(|_| Sample {
            raw_tokens: gaussian(tokens, raw, 1.0, &mut r),
            labels: (0..n).map(|_| Some(r.gen_range(0..classes))).collect(),
        })
        .collect()
}

fn p<'a>(model: &'a Model, name: &str) -> &'a Matrix {
    model.params().by_name(name).unwrap_or_else(|| panic!("missing {name}"))
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn ln_row(x: &[f64], gain: &Matrix, bias: &Matrix) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(j, v)| (v - mean) * inv * gain.get(0, j) + bias.get(0, j)).collect()
}

/// `x · W[rows offset..] + b[brow]` with explicit loops.
fn affine(x: &[f64], w: &Matrix, offset: usize, b: &Matrix, brow: usize) -> Vec<f64> {
    (0..w.cols())
        .map(|j| x.iter().enumerate().map(|(i, v)| v * w.get(offset + i, j)).sum::<f64>() + b.get(brow, j))
        .collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Multi-head attention of `q_in` rows onto `kv_in` rows.
fn attend(model: &Model, prefix: &str, q_in: &[Vec<f64>], kv_in: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let cfg = model.config();
    let (heads, dh) = (cfg.num_heads, cfg.hidden_dim / cfg.num_heads);
    let w = |s: &str| p(model, &format!("{prefix}.{s}"));
    let q: Vec<Vec<f64>> = q_in.iter().map(|x| affine(x, w("wq"), 0, w("bq"), 0)).collect();
    let k: Vec<Vec<f64>> = kv_in.iter().map(|x| affine(x, w("wk"), 0, w("bk"), 0)).collect();
    let v: Vec<Vec<f64>> = kv_in.iter().map(|x| affine(x, w("wv"), 0, w("bv"), 0)).collect();
    let mut merged = vec![vec![0.0; cfg.hidden_dim]; q.len()];
    let mut avg = vec![vec![0.0; k.len()]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let a = softmax(&scores);
            for (j, aj) in a.iter().enumerate() {
                avg[i][j] += aj / heads as f64;
                for c in cols.clone() {
                    merged[i][c] += aj * v[j][c];
                }
            }
        }
    }
    let out = merged.iter().map(|x| affine(x, w("wo"), 0, w("bo"), 0)).collect();
    (out, avg)
}

/// Annotator features and last-block cross-attention, written out row by row.
pub fn oracle_features(model: &Model, raw: &Matrix, self_attention: bool) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let cfg = model.config();
    let proj = model.encoder().projection();
    let pos = p(model, "tokens.pos");
    let ctx: Vec<Vec<f64>> = (0..cfg.num_tokens)
        .map(|t| {
            (0..cfg.hidden_dim)
                .map(|j| (0..cfg.raw_dim).map(|r| raw.get(t, r) * proj.get(r, j)).sum::<f64>() + pos.get(t, j))
                .collect()
        })
        .collect();
    let queries = p(model, "queries");
    let mut h: Vec<Vec<f64>> = (0..cfg.num_annotators).map(|k| queries.row(k).to_vec()).collect();
    let mut record = Vec::new();
    let norm = |h: &[Vec<f64>], prefix: &str| -> Vec<Vec<f64>> {
        h.iter().map(|x| ln_row(x, p(model, &format!("{prefix}.ln.gain")), p(model, &format!("{prefix}.ln.bias")))).collect()
    };
    for b in 0..cfg.num_blocks {
        if self_attention {
            let x = norm(&h, &format!("block{b}.self"));
            let (out, _) = attend(model, &format!("block{b}.self"), &x, &x);
            for (hi, oi) in h.iter_mut().zip(out) {
                hi.iter_mut().zip(oi).for_each(|(a, o)| *a += o);
            }
        }
        let x = norm(&h, &format!("block{b}.cross"));
        let (out, attn) = attend(model, &format!("block{b}.cross"), &x, &ctx);
        for (hi, oi) in h.iter_mut().zip(out) {
            hi.iter_mut().zip(oi).for_each(|(a, o)| *a += o);
        }
        record = attn;
        let x = norm(&h, &format!("block{b}.ffn"));
        let f = |s: &str| p(model, &format!("block{b}.ffn.{s}"));
        for (hi, xi) in h.iter_mut().zip(&x) {
            let hidden: Vec<f64> = affine(xi, f("w1"), 0, f("b1"), 0).into_iter().map(gelu).collect();
            let o = affine(&hidden, f("w2"), 0, f("b2"), 0);
            hi.iter_mut().zip(o).for_each(|(a, o)| *a += o);
        }
    }
    (norm(&h, "out"), record)
}

/// Head `head` of the classifier applied to one feature row.
pub fn oracle_head(model: &Model, feature: &[f64], head: usize) -> Vec<f64> {
    let d = model.config().hidden_dim;
    let hidden: Vec<f64> = affine(feature, p(model, "head.w1"), head * d, p(model, "head.b1"), head).into_iter().map(gelu).collect();
    affine(&hidden, p(model, "head.w2"), head * d, p(model, "head.b2"), head)
}

/// Per-annotator probabilities and attention of the query variants.
pub fn oracle_forward(model: &Model, raw: &Matrix, self_attention: bool) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (features, attn) = oracle_features(model, raw, self_attention);
    let heads = p(model, "head.b1").rows();
    let probs = features.iter().enumerate().map(|(k, f)| softmax(&oracle_head(model, f, k % heads))).collect();
    (probs, attn)
}

pub fn oracle_pooled(model: &Model, raw: &Matrix) -> Vec<f64> {
    let (features, _) = oracle_features(model, raw, true);
    let d = model.config().hidden_dim;
    let mean: Vec<f64> = (0..d).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / features.len() as f64).collect();
    softmax(&oracle_head(model, &mean, 0))
}

pub fn oracle_base(model: &Model, raw: &Matrix) -> Vec<Vec<f64>> {
    let cfg = model.config();
    let proj = model.encoder().projection();
    let pooled: Vec<f64> = (0..cfg.hidden_dim)
        .map(|j| {
            (0..cfg.num_tokens).map(|t| (0..cfg.raw_dim).map(|r| raw.get(t, r) * proj.get(r, j)).sum::<f64>()).sum::<f64>()
                / cfg.num_tokens as f64
        })
        .collect();
    (0..cfg.num_annotators).map(|k| softmax(&oracle_head(model, &pooled, k))).collect()
}

pub fn max_diff(a: &[Vec<f64>], b: &Matrix) -> f64 {
    let mut worst: f64 = 0.0;
    for (r, row) in a.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            worst = worst.max((v - b.get(r, c)).abs());
        }
    }
    worst
}

fn loss_value(model: &Model, samples: &[Sample], targets: &[Vec<Label>]) -> f64 {
    let raws: Vec<&Matrix> = samples.iter().map(|s| &s.raw_tokens).collect();
    let mut tape = Tape::new();
    let out = model.forward_batch(&mut tape, &raws).unwrap();
    let l = batch_loss(&mut tape, &out, targets).unwrap();
    tape.value(l).get(0, 0)
}

pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: String,
}

/// Compares backward against central differences for every trainable scalar.
///
/// Relative error is `|a − f| / max(|a|, |f|, floor)`; the floor keeps
/// vanishing entries from dividing roundoff by roundoff.
pub fn gradient_check(model: &Model, samples: &[Sample], eps: f64, floor: f64) -> GradCheck {
    let targets: Vec<Vec<Label>> = samples.iter().map(|s| s.labels.clone()).collect();
    let raws: Vec<&Matrix> = samples.iter().map(|s| &s.raw_tokens).collect();
    let mut tape = Tape::new();
    let out = model.forward_batch(&mut tape, &raws).unwrap();
    let loss = batch_loss(&mut tape, &out, &targets).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut probe = model.clone();
    let mut result = GradCheck { max_rel_error: 0.0, checked: 0, worst: String::new() };
    let entries: Vec<(String, usize)> =
        model.params().iter().flat_map(|(_, name, m)| (0..m.len()).map(move |i| (name.to_string(), i))).collect();
    for (name, i) in entries {
        let id = model.params().id(&name).unwrap();
        let analytic = grads.param(id).map_or(0.0, |g| g.as_slice()[i]);
        let orig = model.params().by_name(&name).unwrap().as_slice()[i];
        probe.params_mut().by_name_mut(&name).unwrap().as_mut_slice()[i] = orig + eps;
        let up = loss_value(&probe, samples, &targets);
        probe.params_mut().by_name_mut(&name).unwrap().as_mut_slice()[i] = orig - eps;
        let down = loss_value(&probe, samples, &targets);
        probe.params_mut().by_name_mut(&name).unwrap().as_mut_slice()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        if rel > result.max_rel_error {
            result.max_rel_error = rel;
            result.worst = format!("{name}[{i}]: analytic {analytic:e}, numeric {numeric:e}");
        }
        result.checked += 1;
    }
    result
}

pub fn variant_model(cfg: ModelConfig, variant: Variant, perturb_seed: Option<u64>) -> Model {
    let mut m = Model::new(cfg, variant).unwrap();
    if let Some(s) = perturb_seed {
        perturb(&mut m, 0.4, s);
    }
    m
}

/// Contingency-table kappa, written independently of the library's counting.
pub fn kappa_oracle(a: &[Label], b: &[Label], classes: usize) -> Option<f64> {
    let mut table = vec![vec![0u64; classes]; classes];
    for (x, y) in a.iter().zip(b) {
        if let (Some(x), Some(y)) = (x, y) {
            table[*x][*y] += 1;
        }
    }
    let n: u64 = table.iter().flatten().sum();
    if n == 0 {
        return None;
    }
    let diag: u64 = (0..classes).map(|c| table[c][c]).sum();
    let rows: Vec<u64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<u64> = (0..classes).map(|c| table.iter().map(|r| r[c]).sum()).collect();
    let chance: u64 = rows.iter().zip(&cols).map(|(r, c)| r * c).sum();
    if n * n == chance {
        return Some(if diag == n { 1.0 } else { 0.0 });
    }
    Some((n as f64 * diag as f64 - chance as f64) / (n * n - chance) as f64)
}

/// Copy of `model` whose annotator `i` is the original annotator `perm[i]`.
pub fn permuted(model: &Model, perm: &[usize]) -> Model {
    let d = model.config().hidden_dim;
    let mut out = model.clone();
    let params = out.params_mut();
    let q = model.params().by_name("queries").unwrap();
    let dst = params.by_name_mut("queries").unwrap();
    for (i, &src) in perm.iter().enumerate() {
        dst.row_mut(i).copy_from_slice(q.row(src));
    }
    for (name, rows_per_head) in [("head.w1", d), ("head.b1", 1), ("head.w2", d), ("head.b2", 1)] {
        let orig = model.params().by_name(name).unwrap();
        let dst = params.by_name_mut(name).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            for r in 0..rows_per_head {
                dst.row_mut(i * rows_per_head + r).copy_from_slice(orig.row(src * rows_per_head + r));
            }
        }
    }
    out
}
