//! Reverse-mode differentiation over dense matrices.
//!
//! Every forward pass records onto a fresh [`Tape`]; nodes are appended in
//! evaluation order so the node list is already topologically sorted and
//! backward is a single reverse sweep.

use std::sync::atomic::{AtomicU32, Ordering};

use super::matrix::{
    gelu, gelu_grad, gemm_acc, gemm_nt_acc, gemm_tn_acc, layer_norm_parts, Matrix,
};
use super::NumericsError;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(0);

/// Identifier of a trainable parameter, assigned by whoever owns the weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    tape: u32,
}

#[derive(Debug)]
enum Op {
    Param(ParamId),
    Input,
    Constant,
    MatMul(usize, usize),
    GroupedMatMulNT { a: usize, b: usize, groups: usize },
    GroupedMatMul { a: usize, b: usize, groups: usize },
    RowCycledMatMul { x: usize, w: usize, blocks: usize },
    AddBiasCycled { x: usize, bias: usize },
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    SoftmaxRows(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Matrix, inv_std: Vec<f64> },
    Gelu(usize),
    SliceCols { a: usize, start: usize },
    ConcatCols(Vec<usize>),
    GatherRows { a: usize, indices: Vec<usize> },
    MeanRowGroups { a: usize, group: usize },
    Sum(usize),
    NegLogPick { probs: usize, targets: Vec<Option<usize>>, floor: f64 },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    nodes: Vec<Option<Matrix>>,
    params: Vec<(ParamId, Matrix)>,
}

impl Gradients {
    /// Gradient with respect to a parameter, summed over every leaf that referenced it.
    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    /// Gradient with respect to any node; `None` when the node does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        if v.tape != self.tape {
            return None;
        }
        self.nodes.get(v.idx).and_then(Option::as_ref)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.params.iter().map(|(p, g)| (*p, g))
    }

    pub fn into_params(self) -> Vec<(ParamId, Matrix)> {
        self.params
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the tape can host a fresh forward pass.
    /// Handles issued before the reset are invalidated.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    fn check(&self, v: Var) -> Result<usize, NumericsError> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(NumericsError::UnknownNode);
        }
        Ok(v.idx)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.idx].value
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var { idx: self.nodes.len() - 1, tape: self.id }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn param(&mut self, id: ParamId, value: Matrix) -> Var {
        self.push(value, Op::Param(id), true)
    }

    /// Differentiable leaf that is not a parameter (gradient available via [`Gradients::wrt`]).
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let value = super::matrix::matmul(&self.nodes[ai].value, &self.nodes[bi].value)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(value, Op::MatMul(ai, bi), rg))
    }

    /// Block-diagonal `a_g × b_gᵀ` for `groups` consecutive row blocks of `a` and `b`.
    pub fn grouped_matmul_nt(&mut self, a: Var, b: Var, groups: usize) -> Result<Var, NumericsError> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (am, bm) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if groups == 0 || am.rows() % groups != 0 || bm.rows() % groups != 0 || am.cols() != bm.cols() {
            return Err(NumericsError::Shape { op: "grouped_matmul_nt", left: am.shape(), right: bm.shape() });
        }
        let (ra, rb, k) = (am.rows() / groups, bm.rows() / groups, am.cols());
        let mut out = Matrix::zeros(am.rows(), rb);
        for g in 0..groups {
            gemm_nt_acc(
                &am.as_slice()[g * ra * k..(g + 1) * ra * k],
                &bm.as_slice()[g * rb * k..(g + 1) * rb * k],
                &mut out.as_mut_slice()[g * ra * rb..(g + 1) * ra * rb],
                ra,
                k,
                rb,
            );
        }
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(out, Op::GroupedMatMulNT { a: ai, b: bi, groups }, rg))
    }

    /// Block-diagonal `a_g × b_g` for `groups` consecutive row blocks of `a` and `b`.
    pub fn grouped_matmul(&mut self, a: Var, b: Var, groups: usize) -> Result<Var, NumericsError> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (am, bm) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if groups == 0 || am.rows() % groups != 0 || bm.rows() % groups != 0 || am.cols() != bm.rows() / groups {
            return Err(NumericsError::Shape { op: "grouped_matmul", left: am.shape(), right: bm.shape() });
        }
        let (ra, inner, c) = (am.rows() / groups, am.cols(), bm.cols());
        let mut out = Matrix::zeros(am.rows(), c);
        for g in 0..groups {
            gemm_acc(
                &am.as_slice()[g * ra * inner..(g + 1) * ra * inner],
                &bm.as_slice()[g * inner * c..(g + 1) * inner * c],
                &mut out.as_mut_slice()[g * ra * c..(g + 1) * ra * c],
                ra,
                inner,
                c,
            );
        }
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(out, Op::GroupedMatMul { a: ai, b: bi, groups }, rg))
    }

    /// Row `r` of `x` is multiplied by block `r % blocks` of `w`, where `w`
    /// stacks `blocks` matrices of shape `x.cols × out` vertically.
    pub fn row_cycled_matmul(&mut self, x: Var, w: Var, blocks: usize) -> Result<Var, NumericsError> {
        let (xi, wi) = (self.check(x)?, self.check(w)?);
        let (xm, wm) = (&self.nodes[xi].value, &self.nodes[wi].value);
        if blocks == 0 || wm.rows() != blocks * xm.cols() {
            return Err(NumericsError::Shape { op: "row_cycled_matmul", left: xm.shape(), right: wm.shape() });
        }
        let (inner, outc) = (xm.cols(), wm.cols());
        let mut out = Matrix::zeros(xm.rows(), outc);
        for r in 0..xm.rows() {
            let b = r % blocks;
            gemm_acc(
                xm.row(r),
                &wm.as_slice()[b * inner * outc..(b + 1) * inner * outc],
                out.row_mut(r),
                1,
                inner,
                outc,
            );
        }
        let rg = self.rg(xi) || self.rg(wi);
        Ok(self.push(out, Op::RowCycledMatMul { x: xi, w: wi, blocks }, rg))
    }

    /// Adds row `r % bias.rows` of `bias` to row `r` of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (xi, bi) = (self.check(x)?, self.check(bias)?);
        let (xm, bm) = (&self.nodes[xi].value, &self.nodes[bi].value);
        if bm.cols() != xm.cols() || bm.rows() == 0 {
            return Err(NumericsError::Shape { op: "add_bias", left: xm.shape(), right: bm.shape() });
        }
        let mut out = xm.clone();
        let blocks = bm.rows();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bm.row(r % blocks)) {
                *o += b;
            }
        }
        let rg = self.rg(xi) || self.rg(bi);
        Ok(self.push(out, Op::AddBiasCycled { x: xi, bias: bi }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[ai].value.add(&self.nodes[bi].value)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(value, Op::Add(ai, bi), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (am, bm) = (&self.nodes[ai].value, &self.nodes[bi].value);
        am.check_same("mul", bm)?;
        let data = am.as_slice().iter().zip(bm.as_slice()).map(|(x, y)| x * y).collect();
        let value = Matrix::from_vec(am.rows(), am.cols(), data)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(value, Op::Mul(ai, bi), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, NumericsError> {
        let ai = self.check(a)?;
        let value = self.nodes[ai].value.scale(s);
        let rg = self.rg(ai);
        Ok(self.push(value, Op::Scale(ai, s), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ai = self.check(a)?;
        let value = super::matrix::softmax_rows(&self.nodes[ai].value);
        let rg = self.rg(ai);
        Ok(self.push(value, Op::SoftmaxRows(ai), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumericsError> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let (xm, gm, bm) = (&self.nodes[xi].value, &self.nodes[gi].value, &self.nodes[bi].value);
        if gm.len() != xm.cols() || bm.len() != xm.cols() {
            return Err(NumericsError::Shape { op: "layer_norm", left: xm.shape(), right: gm.shape() });
        }
        let (out, xhat, inv_std) = layer_norm_parts(xm, gm.as_slice(), bm.as_slice(), eps);
        let rg = self.rg(xi) || self.rg(gi) || self.rg(bi);
        Ok(self.push(out, Op::LayerNorm { x: xi, gain: gi, bias: bi, xhat, inv_std }, rg))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ai = self.check(a)?;
        let value = self.nodes[ai].value.map(gelu);
        let rg = self.rg(ai);
        Ok(self.push(value, Op::Gelu(ai), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let ai = self.check(a)?;
        let am = &self.nodes[ai].value;
        if start + len > am.cols() {
            return Err(NumericsError::Shape { op: "slice_cols", left: am.shape(), right: (start, len) });
        }
        let mut out = Matrix::zeros(am.rows(), len);
        for r in 0..am.rows() {
            out.row_mut(r).copy_from_slice(&am.row(r)[start..start + len]);
        }
        let rg = self.rg(ai);
        Ok(self.push(out, Op::SliceCols { a: ai, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>, _>>()?;
        let rows = idx.first().map_or(0, |&i| self.nodes[i].value.rows());
        let mut total = 0;
        for &i in &idx {
            let m = &self.nodes[i].value;
            if m.rows() != rows {
                return Err(NumericsError::Shape { op: "concat_cols", left: (rows, total), right: m.shape() });
            }
            total += m.cols();
        }
        let mut out = Matrix::zeros(rows, total);
        let mut offset = 0;
        for &i in &idx {
            let m = &self.nodes[i].value;
            for r in 0..rows {
                out.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(out, Op::ConcatCols(idx), rg))
    }

    /// Output row `i` is row `indices[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var, NumericsError> {
        let ai = self.check(a)?;
        let am = &self.nodes[ai].value;
        if let Some(&bad) = indices.iter().find(|&&i| i >= am.rows()) {
            return Err(NumericsError::Shape { op: "gather_rows", left: am.shape(), right: (bad, 0) });
        }
        let mut out = Matrix::zeros(indices.len(), am.cols());
        for (o, &i) in indices.iter().enumerate() {
            out.row_mut(o).copy_from_slice(am.row(i));
        }
        let rg = self.rg(ai);
        Ok(self.push(out, Op::GatherRows { a: ai, indices }, rg))
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn mean_row_groups(&mut self, a: Var, group: usize) -> Result<Var, NumericsError> {
        let ai = self.check(a)?;
        let am = &self.nodes[ai].value;
        if group == 0 || am.rows() % group != 0 {
            return Err(NumericsError::Shape { op: "mean_row_groups", left: am.shape(), right: (group, 0) });
        }
        let mut out = Matrix::zeros(am.rows() / group, am.cols());
        let inv = 1.0 / group as f64;
        for r in 0..am.rows() {
            for (o, v) in out.row_mut(r / group).iter_mut().zip(am.row(r)) {
                *o += v * inv;
            }
        }
        let rg = self.rg(ai);
        Ok(self.push(out, Op::MeanRowGroups { a: ai, group }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ai = self.check(a)?;
        let s = self.nodes[ai].value.sum();
        let rg = self.rg(ai);
        Ok(self.push(Matrix::filled(1, 1, s), Op::Sum(ai), rg))
    }

    /// Σ over rows with a target of `−ln(max(probs[r, target], floor))`; rows
    /// whose target is `None` contribute nothing.
    pub fn neg_log_pick(&mut self, probs: Var, targets: Vec<Option<usize>>, floor: f64) -> Result<Var, NumericsError> {
        let pi = self.check(probs)?;
        let pm = &self.nodes[pi].value;
        if targets.len() != pm.rows() {
            return Err(NumericsError::Shape { op: "neg_log_pick", left: pm.shape(), right: (targets.len(), 1) });
        }
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= pm.cols() {
                    return Err(NumericsError::Shape { op: "neg_log_pick", left: pm.shape(), right: (r, t) });
                }
                let p = pm.get(r, t);
                // NaN must not be floored away.
                total -= if p < floor { floor } else { p }.ln();
            }
        }
        let rg = self.rg(pi);
        Ok(self.push(Matrix::filled(1, 1, total), Op::NegLogPick { probs: pi, targets, floor }, rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let li = self.check(loss)?;
        let shape = self.nodes[li].value.shape();
        if shape != (1, 1) {
            return Err(NumericsError::NotScalar { rows: shape.0, cols: shape.1 });
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut params: Vec<(ParamId, Matrix)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                match params.iter_mut().find(|(p, _)| p == id) {
                    Some((_, acc)) => acc.add_assign(g),
                    None => params.push((*id, g.clone())),
                }
            }
        }
        params.sort_by_key(|(p, _)| *p);
        Ok(Gradients { tape: self.id, nodes: grads, params })
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let nodes = &self.nodes;
        let value = |j: usize| &nodes[j].value;
        let wants = |j: usize| nodes[j].requires_grad;
        match &nodes[i].op {
            Op::Param(_) | Op::Input | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (am, bm) = (value(*a), value(*b));
                let (m, k, n) = (am.rows(), am.cols(), bm.cols());
                if wants(*a) {
                    let ga = slot(grads, *a, am.shape());
                    gemm_nt_acc(g.as_slice(), bm.as_slice(), ga.as_mut_slice(), m, n, k);
                }
                if wants(*b) {
                    let gb = slot(grads, *b, bm.shape());
                    gemm_tn_acc(am.as_slice(), g.as_slice(), gb.as_mut_slice(), m, k, n);
                }
            }
            Op::GroupedMatMulNT { a, b, groups } => {
                let (am, bm) = (value(*a), value(*b));
                let (ra, rb, k) = (am.rows() / groups, bm.rows() / groups, am.cols());
                if wants(*a) {
                    let ga = slot(grads, *a, am.shape());
                    for gi in 0..*groups {
                        gemm_acc(
                            &g.as_slice()[gi * ra * rb..(gi + 1) * ra * rb],
                            &bm.as_slice()[gi * rb * k..(gi + 1) * rb * k],
                            &mut ga.as_mut_slice()[gi * ra * k..(gi + 1) * ra * k],
                            ra,
                            rb,
                            k,
                        );
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, bm.shape());
                    for gi in 0..*groups {
                        gemm_tn_acc(
                            &g.as_slice()[gi * ra * rb..(gi + 1) * ra * rb],
                            &am.as_slice()[gi * ra * k..(gi + 1) * ra * k],
                            &mut gb.as_mut_slice()[gi * rb * k..(gi + 1) * rb * k],
                            ra,
                            rb,
                            k,
                        );
                    }
                }
            }
            Op::GroupedMatMul { a, b, groups } => {
                let (am, bm) = (value(*a), value(*b));
                let (ra, inner, c) = (am.rows() / groups, am.cols(), bm.cols());
                if wants(*a) {
                    let ga = slot(grads, *a, am.shape());
                    for gi in 0..*groups {
                        gemm_nt_acc(
                            &g.as_slice()[gi * ra * c..(gi + 1) * ra * c],
                            &bm.as_slice()[gi * inner * c..(gi + 1) * inner * c],
                            &mut ga.as_mut_slice()[gi * ra * inner..(gi + 1) * ra * inner],
                            ra,
                            c,
                            inner,
                        );
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, bm.shape());
                    for gi in 0..*groups {
                        gemm_tn_acc(
                            &am.as_slice()[gi * ra * inner..(gi + 1) * ra * inner],
                            &g.as_slice()[gi * ra * c..(gi + 1) * ra * c],
                            &mut gb.as_mut_slice()[gi * inner * c..(gi + 1) * inner * c],
                            ra,
                            inner,
                            c,
                        );
                    }
                }
            }
            Op::RowCycledMatMul { x, w, blocks } => {
                let (xm, wm) = (value(*x), value(*w));
                let (inner, outc) = (xm.cols(), wm.cols());
                if wants(*x) {
                    let gx = slot(grads, *x, xm.shape());
                    for r in 0..xm.rows() {
                        let b = r % blocks;
                        gemm_nt_acc(
                            g.row(r),
                            &wm.as_slice()[b * inner * outc..(b + 1) * inner * outc],
                            gx.row_mut(r),
                            1,
                            outc,
                            inner,
                        );
                    }
                }
                if wants(*w) {
                    let gw = slot(grads, *w, wm.shape());
                    for r in 0..xm.rows() {
                        let b = r % blocks;
                        gemm_tn_acc(
                            xm.row(r),
                            g.row(r),
                            &mut gw.as_mut_slice()[b * inner * outc..(b + 1) * inner * outc],
                            1,
                            inner,
                            outc,
                        );
                    }
                }
            }
            Op::AddBiasCycled { x, bias } => {
                if wants(*x) {
                    slot(grads, *x, g.shape()).add_assign(g);
                }
                if wants(*bias) {
                    let bshape = value(*bias).shape();
                    let gb = slot(grads, *bias, bshape);
                    for r in 0..g.rows() {
                        for (o, v) in gb.row_mut(r % bshape.0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    slot(grads, *a, g.shape()).add_assign(g);
                }
                if wants(*b) {
                    slot(grads, *b, g.shape()).add_assign(g);
                }
            }
            Op::Mul(a, b) => {
                let (am, bm) = (value(*a), value(*b));
                if wants(*a) {
                    let ga = slot(grads, *a, am.shape());
                    for ((o, gv), bv) in ga.as_mut_slice().iter_mut().zip(g.as_slice()).zip(bm.as_slice()) {
                        *o += gv * bv;
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, bm.shape());
                    for ((o, gv), av) in gb.as_mut_slice().iter_mut().zip(g.as_slice()).zip(am.as_slice()) {
                        *o += gv * av;
                    }
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    let ga = slot(grads, *a, g.shape());
                    for (o, gv) in ga.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *o += s * gv;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if wants(*a) {
                    let y = &nodes[i].value;
                    let ga = slot(grads, *a, y.shape());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((o, yv), gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let cols = xhat.cols();
                let gain_v = value(*gain).as_slice();
                if wants(*gain) {
                    let gg = slot(grads, *gain, value(*gain).shape());
                    for r in 0..g.rows() {
                        for ((o, gv), h) in gg.as_mut_slice().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *o += gv * h;
                        }
                    }
                }
                if wants(*bias) {
                    let gb = slot(grads, *bias, value(*bias).shape());
                    for r in 0..g.rows() {
                        for (o, gv) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                }
                if wants(*x) {
                    let gx = slot(grads, *x, xhat.shape());
                    let n = cols as f64;
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..g.rows() {
                        let (gr, hr) = (g.row(r), xhat.row(r));
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for c in 0..cols {
                            dxhat[c] = gr[c] * gain_v[c];
                            sum_d += dxhat[c];
                            sum_dh += dxhat[c] * hr[c];
                        }
                        let scale = inv_std[r] / n;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o += scale * (n * dxhat[c] - sum_d - hr[c] * sum_dh);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let am = value(*a);
                    let ga = slot(grads, *a, am.shape());
                    for ((o, gv), xv) in ga.as_mut_slice().iter_mut().zip(g.as_slice()).zip(am.as_slice()) {
                        *o += gv * gelu_grad(*xv);
                    }
                }
            }
            Op::SliceCols { a, start } => {
                if wants(*a) {
                    let ashape = value(*a).shape();
                    let ga = slot(grads, *a, ashape);
                    let len = g.cols();
                    for r in 0..g.rows() {
                        for (o, gv) in ga.row_mut(r)[*start..*start + len].iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pshape = value(p).shape();
                    if wants(p) {
                        let gp = slot(grads, p, pshape);
                        for r in 0..g.rows() {
                            for (o, gv) in gp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + pshape.1]) {
                                *o += gv;
                            }
                        }
                    }
                    offset += pshape.1;
                }
            }
            Op::GatherRows { a, indices } => {
                if wants(*a) {
                    let ashape = value(*a).shape();
                    let ga = slot(grads, *a, ashape);
                    for (o, &src) in indices.iter().enumerate() {
                        for (d, gv) in ga.row_mut(src).iter_mut().zip(g.row(o)) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::MeanRowGroups { a, group } => {
                if wants(*a) {
                    let ashape = value(*a).shape();
                    let ga = slot(grads, *a, ashape);
                    let inv = 1.0 / *group as f64;
                    for r in 0..ashape.0 {
                        for (d, gv) in ga.row_mut(r).iter_mut().zip(g.row(r / group)) {
                            *d += gv * inv;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let s = g.get(0, 0);
                    let ashape = value(*a).shape();
                    for o in slot(grads, *a, ashape).as_mut_slice() {
                        *o += s;
                    }
                }
            }
            Op::NegLogPick { probs, targets, floor } => {
                if wants(*probs) {
                    let s = g.get(0, 0);
                    let pm = value(*probs);
                    let gp = slot(grads, *probs, pm.shape());
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let p = pm.get(r, t);
                            if p > *floor {
                                let cur = gp.get(r, t);
                                gp.set(r, t, cur - s / p);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Matrix>], i: usize, shape: (usize, usize)) -> &mut Matrix {
    grads[i].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}
