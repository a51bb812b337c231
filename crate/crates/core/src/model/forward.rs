use crate::numerics::{Matrix, Tape, Var, LAYER_NORM_EPS};

use super::{encode, Model, ModelError, Variant};

/// Cross-attention weights averaged over heads; row `k` belongs to annotator `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub weights: Matrix,
}

/// Per-annotator class probabilities for one sample (one row for consensus models).
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub probs: Matrix,
    pub attention: Option<AttentionRecord>,
}

impl PredictionSet {
    /// Arg-max class per row, ties to the smallest index.
    pub fn labels(&self) -> Vec<usize> {
        (0..self.probs.rows())
            .map(|r| {
                let row = self.probs.row(r);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

/// Result of recording a batch forward pass.
#[derive(Debug)]
pub struct BatchOutput {
    /// `(batch · rows_per_sample) × C` probabilities, sample-major.
    pub probs: Var,
    pub rows_per_sample: usize,
    /// `(batch · n) × numTokens` head-averaged cross-attention of the last block.
    pub attention: Option<Matrix>,
}

struct Graph<'a> {
    model: &'a Model,
    tape: &'a mut Tape,
    batch: usize,
}

impl Graph<'_> {
    fn p(&mut self, name: &str) -> Result<Var, ModelError> {
        let value = self.model.param(name)?.clone();
        let id = self.model.params.id(name).expect("param exists");
        Ok(self.tape.param(id, value))
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let gain = self.p(&format!("{prefix}.ln.gain"))?;
        let bias = self.p(&format!("{prefix}.ln.bias"))?;
        Ok(self.tape.layer_norm(x, gain, bias, LAYER_NORM_EPS)?)
    }

    fn affine(&mut self, x: Var, w: &str, b: &str) -> Result<Var, ModelError> {
        let wv = self.p(w)?;
        let bv = self.p(b)?;
        let xw = self.tape.matmul(x, wv)?;
        Ok(self.tape.add_bias(xw, bv)?)
    }

    /// Multi-head attention of `queries` onto `context`, both sample-major
    /// with `batch` equal row blocks. Returns the projected output and the
    /// head-averaged attention weights.
    fn attention(&mut self, prefix: &str, queries: Var, context: Var) -> Result<(Var, Matrix), ModelError> {
        let cfg = &self.model.config;
        let (heads, dh) = (cfg.num_heads, cfg.head_dim());
        let q = self.affine(queries, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = self.affine(context, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.affine(context, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut avg: Option<Matrix> = None;
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * dh, dh)?;
            let kh = self.tape.slice_cols(k, h * dh, dh)?;
            let vh = self.tape.slice_cols(v, h * dh, dh)?;
            let scores = self.tape.grouped_matmul_nt(qh, kh, self.batch)?;
            let scores = self.tape.scale(scores, scale)?;
            let weights = self.tape.softmax_rows(scores)?;
            let w = self.tape.value(weights);
            match avg.as_mut() {
                Some(a) => a.add_assign(w),
                None => avg = Some(w.clone()),
            }
            outs.push(self.tape.grouped_matmul(weights, vh, self.batch)?);
        }
        let merged = self.tape.concat_cols(&outs)?;
        let out = self.affine(merged, &format!("{prefix}.wo"), &format!("{prefix}.bo"))?;
        let avg = avg.expect("at least one head").scale(1.0 / heads as f64);
        Ok((out, avg))
    }

    /// Encoded tokens for the batch as a constant `(batch · T) × d` node.
    fn tokens(&mut self, raws: &[&Matrix]) -> Result<Var, ModelError> {
        let cfg = &self.model.config;
        let mut encoded = Vec::with_capacity(raws.len());
        for raw in raws {
            if raw.rows() != cfg.num_tokens {
                return Err(ModelError::Tokens { expected: cfg.num_tokens, got: raw.rows() });
            }
            encoded.push(encode(raw, &self.model.encoder)?);
        }
        let refs: Vec<&Matrix> = encoded.iter().collect();
        Ok(self.tape.constant(Matrix::vstack(&refs)?))
    }

    /// Query block stack over already-encoded tokens. Returns normalized
    /// annotator features `(batch · n) × d` and last-block attention.
    fn query_block(&mut self, tokens: Var, self_attention: bool) -> Result<(Var, Matrix), ModelError> {
        let cfg = self.model.config.clone();
        let (n, t) = (cfg.num_annotators, cfg.num_tokens);
        let pos = self.p("tokens.pos")?;
        let pos = self.tape.gather_rows(pos, (0..self.batch).flat_map(|_| 0..t).collect())?;
        let context = self.tape.add(tokens, pos)?;

        let queries = self.p("queries")?;
        let mut h = self.tape.gather_rows(queries, (0..self.batch).flat_map(|_| 0..n).collect())?;
        let mut record = None;
        for b in 0..cfg.num_blocks {
            if self_attention {
                let prefix = format!("block{b}.self");
                let x = self.norm(h, &prefix)?;
                let (out, _) = self.attention(&prefix, x, x)?;
                h = self.tape.add(h, out)?;
            }
            let prefix = format!("block{b}.cross");
            let x = self.norm(h, &prefix)?;
            let (out, weights) = self.attention(&prefix, x, context)?;
            h = self.tape.add(h, out)?;
            record = Some(weights);

            let prefix = format!("block{b}.ffn");
            let x = self.norm(h, &prefix)?;
            let x = self.affine(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
            let x = self.tape.gelu(x)?;
            let x = self.affine(x, &format!("{prefix}.w2"), &format!("{prefix}.b2"))?;
            h = self.tape.add(h, x)?;
        }
        let features = self.norm(h, "out")?;
        Ok((features, record.expect("at least one block")))
    }

    /// Classifier MLPs; row `r` uses head `r % heads`.
    fn heads(&mut self, features: Var) -> Result<Var, ModelError> {
        let w1 = self.p("head.w1")?;
        let b1 = self.p("head.b1")?;
        let w2 = self.p("head.w2")?;
        let b2 = self.p("head.b2")?;
        let blocks = self.tape.value(b1).rows();
        let x = self.tape.row_cycled_matmul(features, w1, blocks)?;
        let x = self.tape.add_bias(x, b1)?;
        let x = self.tape.gelu(x)?;
        let x = self.tape.row_cycled_matmul(x, w2, blocks)?;
        Ok(self.tape.add_bias(x, b2)?)
    }
}

impl Model {
    /// Records the forward pass of `path` for a batch of raw token matrices.
    pub fn forward_graph(&self, tape: &mut Tape, raws: &[&Matrix], path: Variant) -> Result<BatchOutput, ModelError> {
        let n = self.config.num_annotators;
        let mut g = Graph { model: self, tape, batch: raws.len() };
        let tokens = g.tokens(raws)?;
        let (logits, rows_per_sample, attention) = match path {
            Variant::Base => {
                let pooled = g.tape.mean_row_groups(tokens, self.config.num_tokens)?;
                let repeated = g.tape.gather_rows(pooled, (0..raws.len()).flat_map(|b| std::iter::repeat(b).take(n)).collect())?;
                (g.heads(repeated)?, n, None)
            }
            Variant::Full | Variant::UnifiedHead | Variant::NoSelfAttn => {
                let (features, attn) = g.query_block(tokens, path != Variant::NoSelfAttn)?;
                (g.heads(features)?, n, Some(attn))
            }
            Variant::PooledPremv => {
                if self.param("head.b1")?.rows() != 1 {
                    return Err(ModelError::MissingParameter("pooled head".into(), self.variant));
                }
                let (features, attn) = g.query_block(tokens, true)?;
                let pooled = g.tape.mean_row_groups(features, n)?;
                (g.heads(pooled)?, 1, Some(attn))
            }
        };
        let probs = tape.softmax_rows(logits)?;
        Ok(BatchOutput { probs, rows_per_sample, attention })
    }

    /// Forward pass of the model's own variant.
    pub fn forward_batch(&self, tape: &mut Tape, raws: &[&Matrix]) -> Result<BatchOutput, ModelError> {
        self.forward_graph(tape, raws, self.variant)
    }

    /// Predictions for many samples using the model's own variant.
    pub fn predict_batch(&self, raws: &[&Matrix]) -> Result<Vec<PredictionSet>, ModelError> {
        self.predict_path(raws, self.variant)
    }

    fn predict_path(&self, raws: &[&Matrix], path: Variant) -> Result<Vec<PredictionSet>, ModelError> {
        let mut tape = Tape::new();
        let out = self.forward_graph(&mut tape, raws, path)?;
        let probs = tape.value(out.probs);
        let n = self.config.num_annotators;
        let rows = out.rows_per_sample;
        Ok((0..raws.len())
            .map(|b| PredictionSet {
                probs: probs.slice_rows(b * rows, rows),
                attention: out.attention.as_ref().map(|a| AttentionRecord { weights: a.slice_rows(b * n, n) }),
            })
            .collect())
    }

    fn single(&self, raw: &Matrix, path: Variant) -> Result<PredictionSet, ModelError> {
        Ok(self.predict_path(&[raw], path)?.pop().expect("one sample"))
    }

    pub fn predict(&self, raw: &Matrix) -> Result<PredictionSet, ModelError> {
        self.single(raw, self.variant)
    }

    /// Queries with self-attention, cross-attention, and per-annotator heads.
    pub fn forward(&self, raw: &Matrix) -> Result<PredictionSet, ModelError> {
        self.single(raw, Variant::Full)
    }

    /// Like [`Model::forward`] with one shared head applied to every annotator feature.
    pub fn forward_unified(&self, raw: &Matrix) -> Result<PredictionSet, ModelError> {
        if self.param("head.b1")?.rows() != 1 {
            return Err(ModelError::MissingParameter("unified head".into(), self.variant));
        }
        self.single(raw, Variant::UnifiedHead)
    }

    /// Like [`Model::forward`] with the query self-attention sublayer skipped.
    pub fn forward_no_selfattn(&self, raw: &Matrix) -> Result<PredictionSet, ModelError> {
        self.single(raw, Variant::NoSelfAttn)
    }

    /// Mean of the annotator features through one head; a single distribution.
    pub fn forward_pooled(&self, raw: &Matrix) -> Result<Vec<f64>, ModelError> {
        Ok(self.single(raw, Variant::PooledPremv)?.probs.into_vec())
    }

    /// Mean-pooled encoder tokens through the per-annotator heads.
    pub fn forward_base(&self, raw: &Matrix) -> Result<PredictionSet, ModelError> {
        self.single(raw, Variant::Base)
    }

    /// Annotator features and cross-attention for already-encoded tokens `f`.
    pub fn qformer_forward(&self, features: &Matrix) -> Result<(Matrix, AttentionRecord), ModelError> {
        let d = self.config.hidden_dim;
        if features.cols() != d {
            return Err(ModelError::Width { expected: d, got: features.cols() });
        }
        if features.rows() != self.config.num_tokens {
            return Err(ModelError::Tokens { expected: self.config.num_tokens, got: features.rows() });
        }
        let mut tape = Tape::new();
        let mut g = Graph { model: self, tape: &mut tape, batch: 1 };
        let tokens = g.tape.constant(features.clone());
        let (out, attn) = g.query_block(tokens, self.variant.uses_self_attention())?;
        Ok((tape.value(out).clone(), AttentionRecord { weights: attn }))
    }

    /// Head logits for an `n × d` (or `heads × d`) feature matrix; row `k` uses head `k`.
    pub fn classify(&self, features: &Matrix) -> Result<Matrix, ModelError> {
        let d = self.config.hidden_dim;
        if features.cols() != d {
            return Err(ModelError::Width { expected: d, got: features.cols() });
        }
        let mut tape = Tape::new();
        let mut g = Graph { model: self, tape: &mut tape, batch: 1 };
        let x = g.tape.constant(features.clone());
        let logits = g.heads(x)?;
        Ok(tape.value(logits).clone())
    }
}
