//! Reverse-mode differentiation over feature matrices.
//!
//! A [`Tape`] records every matrix operation of a forward pass together
//! with the values backward needs. [`Tape::backward`] walks the record in
//! exact reverse order and returns gradients for every parameter that took
//! part in the pass.
//!
//! The operation set is deliberately small: dense affine maps,
//! activations, concatenation, row gathers and the segment reductions that
//! implement neighbourhood aggregation.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::csr::Segments;
use crate::error::{GmnnError, Result};
use crate::event::ClassId;
use crate::tensor::{Matrix, Scalar};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a tensor in a parameter store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    #[default]
    Relu,
    Tanh,
    /// `x · sigmoid(x)`; smooth, used where finite differences must not
    /// straddle a kink.
    Silu,
}

impl Activation {
    pub fn apply(self, x: Scalar) -> Scalar {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Silu => x * sigmoid(x),
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn derivative(self, x: Scalar, y: Scalar) -> Scalar {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = GmnnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "linear" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "silu" => Ok(Activation::Silu),
            other => Err(GmnnError::config(format!("unknown activation {other:?}"))),
        }
    }
}

fn sigmoid(x: Scalar) -> Scalar {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Act(Var, Activation),
    Add(Var, Var),
    Scale(Var, Scalar),
    ScaleRows(Var, Arc<Vec<Scalar>>),
    ConcatCols(Var, Var),
    Gather(Var, Arc<Vec<u32>>),
    SegmentSoftmax(Var, Arc<Segments>),
    SegmentWeightedSum {
        weights: Var,
        values: Var,
        segments: Arc<Segments>,
    },
    GatherWeightedSum {
        weights: Var,
        values: Var,
        segments: Arc<Segments>,
    },
    SliceRows(Var, usize),
    AffineActAffine {
        input: Arc<Matrix>,
        w1: Var,
        b1: Var,
        act: Activation,
        w2: Var,
    },
    SegmentMean(Var, Arc<Segments>),
    WeightedSum(Vec<Var>, Vec<Scalar>),
    Dot(Var, Arc<Matrix>),
    CrossEntropy {
        logits: Var,
        labels: Arc<Vec<ClassId>>,
        row_weights: Arc<Vec<Scalar>>,
        probs: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Gradients keyed by parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: HashMap<ParamId, Matrix>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Matrix)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, id: ParamId, grad: Matrix) {
        self.grads.insert(id, grad);
    }

    /// `self += factor · other`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Gradients, factor: Scalar) {
        for (id, g) in &other.grads {
            let mut scaled = g.clone();
            scaled.scale(factor);
            match self.grads.get_mut(id) {
                Some(acc) => acc.add_assign(&scaled).expect("gradient shapes agree"),
                None => {
                    self.grads.insert(*id, scaled);
                }
            }
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Records a trainable tensor. Repeated calls with the same id return
    /// the same handle, so gradients from every use accumulate.
    pub fn param(&mut self, id: ParamId, value: &Matrix) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// Adds the `1 x C` row `bias` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(GmnnError::shape(format!(
                "bias {:?} for input {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut value = xv.clone();
        let b = bv.row(0).to_vec();
        for i in 0..value.rows() {
            for (v, bb) in value.row_mut(i).iter_mut().zip(&b) {
                *v += bb;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddBias(x, bias), ng))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return x;
        }
        let value = self.value(x).map(|v| act.apply(v));
        let ng = self.needs(x);
        self.push(value, Op::Act(x, act), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, factor: Scalar) -> Var {
        let mut value = self.value(x).clone();
        value.scale(factor);
        let ng = self.needs(x);
        self.push(value, Op::Scale(x, factor), ng)
    }

    /// Multiplies row `i` by `factors[i]`.
    pub fn scale_rows(&mut self, x: Var, factors: Arc<Vec<Scalar>>) -> Result<Var> {
        let xv = self.value(x);
        if factors.len() != xv.rows() {
            return Err(GmnnError::shape(format!(
                "{} row factors for {} rows",
                factors.len(),
                xv.rows()
            )));
        }
        let mut value = xv.clone();
        for (i, &f) in factors.iter().enumerate() {
            for v in value.row_mut(i) {
                *v *= f;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(value, Op::ScaleRows(x, factors), ng))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_cols(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::ConcatCols(a, b), ng))
    }

    /// Output row `e` is input row `indices[e]`.
    pub fn gather(&mut self, x: Var, indices: Arc<Vec<u32>>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= xv.rows()) {
            return Err(GmnnError::Index {
                index: bad as usize,
                len: xv.rows(),
            });
        }
        let value = xv.gather_rows(&indices);
        let ng = self.needs(x);
        Ok(self.push(value, Op::Gather(x, indices), ng))
    }

    /// Softmax over the rows of each segment, independently per column.
    pub fn segment_softmax(&mut self, x: Var, segments: Arc<Segments>) -> Result<Var> {
        let xv = self.value(x);
        check_segment_rows(&segments, xv.rows())?;
        let mut value = xv.clone();
        let c = value.cols();
        let off = segments.offsets();
        for s in 0..segments.rows() {
            let (lo, hi) = (off[s], off[s + 1]);
            if lo == hi {
                continue;
            }
            for col in 0..c {
                let mut m = Scalar::NEG_INFINITY;
                for r in lo..hi {
                    m = m.max(value[(r, col)]);
                }
                let mut z = 0.0;
                for r in lo..hi {
                    let e = (value[(r, col)] - m).exp();
                    value[(r, col)] = e;
                    z += e;
                }
                for r in lo..hi {
                    value[(r, col)] /= z;
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(value, Op::SegmentSoftmax(x, segments), ng))
    }

    /// `out[s] = Σ_{e ∈ s} weights[e] ⊙ values[e]`. `weights` has either one
    /// column (broadcast) or as many as `values`. Empty segments give zero
    /// rows.
    pub fn segment_weighted_sum(
        &mut self,
        weights: Var,
        values: Var,
        segments: Arc<Segments>,
    ) -> Result<Var> {
        let (wv, vv) = (self.value(weights), self.value(values));
        check_segment_rows(&segments, vv.rows())?;
        if wv.rows() != vv.rows() || (wv.cols() != 1 && wv.cols() != vv.cols()) {
            return Err(GmnnError::shape(format!(
                "weights {:?} for values {:?}",
                wv.shape(),
                vv.shape()
            )));
        }
        let c = vv.cols();
        let broadcast = wv.cols() == 1;
        let mut value = Matrix::zeros(segments.rows(), c);
        let off = segments.offsets();
        for s in 0..segments.rows() {
            let out = value.row_mut(s);
            for e in off[s]..off[s + 1] {
                let w = wv.row(e);
                for (col, (o, v)) in out.iter_mut().zip(vv.row(e)).enumerate() {
                    *o += if broadcast { w[0] } else { w[col] } * v;
                }
            }
        }
        let ng = self.needs(weights) || self.needs(values);
        Ok(self.push(
            value,
            Op::SegmentWeightedSum {
                weights,
                values,
                segments,
            },
            ng,
        ))
    }

    /// `out[s] = Σ_{e ∈ s} weights[e] ⊙ values[indices[e]]`: a gather of
    /// `values` by the segment indices fused with
    /// [`Tape::segment_weighted_sum`], without materializing the gathered
    /// rows.
    pub fn gather_weighted_sum(
        &mut self,
        weights: Var,
        values: Var,
        segments: Arc<Segments>,
    ) -> Result<Var> {
        let (wv, vv) = (self.value(weights), self.value(values));
        check_segment_rows(&segments, wv.rows())?;
        if wv.cols() != 1 && wv.cols() != vv.cols() {
            return Err(GmnnError::shape(format!(
                "weights {:?} for values {:?}",
                wv.shape(),
                vv.shape()
            )));
        }
        if let Some(j) = segments.max_index() {
            if j as usize >= vv.rows() {
                return Err(GmnnError::Index {
                    index: j as usize,
                    len: vv.rows(),
                });
            }
        }
        let c = vv.cols();
        let broadcast = wv.cols() == 1;
        let mut value = Matrix::zeros(segments.rows(), c);
        let off = segments.offsets();
        let idx = segments.indices();
        for s in 0..segments.rows() {
            let out = value.row_mut(s);
            let range = off[s]..off[s + 1];
            for (e, &j) in range.clone().zip(&idx[range]) {
                let w = wv.row(e);
                let v = vv.row(j as usize);
                if broadcast {
                    let w = w[0];
                    for (o, x) in out.iter_mut().zip(v) {
                        *o += w * x;
                    }
                } else {
                    for ((o, x), w) in out.iter_mut().zip(v).zip(w) {
                        *o += w * x;
                    }
                }
            }
        }
        let ng = self.needs(weights) || self.needs(values);
        Ok(self.push(
            value,
            Op::GatherWeightedSum {
                weights,
                values,
                segments,
            },
            ng,
        ))
    }

    /// `act(input · w1 + b1) · w2` for a constant `input`, row by row. The
    /// hidden activations are recomputed in backward instead of stored, so
    /// memory stays proportional to the input and output widths.
    pub fn affine_act_affine(
        &mut self,
        input: Arc<Matrix>,
        w1: Var,
        b1: Var,
        act: Activation,
        w2: Var,
    ) -> Result<Var> {
        let (w1v, b1v, w2v) = (self.value(w1), self.value(b1), self.value(w2));
        let h = w1v.cols();
        if w1v.rows() != input.cols() || b1v.shape() != (1, h) || w2v.rows() != h {
            return Err(GmnnError::shape(format!(
                "fused layers {:?} -> {:?} + {:?} -> {:?}",
                input.shape(),
                w1v.shape(),
                b1v.shape(),
                w2v.shape()
            )));
        }
        let out_cols = w2v.cols();
        let mut value = Matrix::zeros(input.rows(), out_cols);
        let mut hidden = vec![0.0; h];
        for r in 0..input.rows() {
            fused_hidden(input.row(r), w1v, b1v.row(0), act, &mut hidden, None);
            let out = value.row_mut(r);
            for (k, &a) in hidden.iter().enumerate() {
                if a != 0.0 {
                    for (o, w) in out.iter_mut().zip(w2v.row(k)) {
                        *o += a * w;
                    }
                }
            }
        }
        let ng = self.needs(w1) || self.needs(b1) || self.needs(w2);
        Ok(self.push(
            value,
            Op::AffineActAffine {
                input,
                w1,
                b1,
                act,
                w2,
            },
            ng,
        ))
    }

    /// Rows `start..end` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start > end || end > xv.rows() {
            return Err(GmnnError::shape(format!(
                "row slice {start}..{end} of {} rows",
                xv.rows()
            )));
        }
        let value = xv.slice_rows(start, end);
        let ng = self.needs(x);
        Ok(self.push(value, Op::SliceRows(x, start), ng))
    }

    /// Mean of the rows in each segment; empty segments give zero rows.
    pub fn segment_mean(&mut self, x: Var, segments: Arc<Segments>) -> Result<Var> {
        let xv = self.value(x);
        check_segment_rows(&segments, xv.rows())?;
        let mut value = Matrix::zeros(segments.rows(), xv.cols());
        let off = segments.offsets();
        for s in 0..segments.rows() {
            let n = off[s + 1] - off[s];
            if n == 0 {
                continue;
            }
            let out = value.row_mut(s);
            for e in off[s]..off[s + 1] {
                for (o, v) in out.iter_mut().zip(xv.row(e)) {
                    *o += v;
                }
            }
            let inv = 1.0 / n as Scalar;
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(value, Op::SegmentMean(x, segments), ng))
    }

    /// `Σ_k weights[k] · terms[k]` with every element evaluated in doubled
    /// working precision and rounded once.
    pub fn weighted_sum(&mut self, terms: &[Var], weights: &[Scalar]) -> Result<Var> {
        if terms.is_empty() || terms.len() != weights.len() {
            return Err(GmnnError::shape(format!(
                "{} terms with {} weights",
                terms.len(),
                weights.len()
            )));
        }
        let shape = self.value(terms[0]).shape();
        if terms.iter().any(|&t| self.value(t).shape() != shape) {
            return Err(GmnnError::shape("weighted sum terms differ in shape"));
        }
        let slices: Vec<&[Scalar]> = terms.iter().map(|&t| self.value(t).as_slice()).collect();
        let data = (0..shape.0 * shape.1)
            .map(|i| dot2(slices.iter().zip(weights).map(|(s, &w)| (w, s[i]))))
            .collect();
        let value = Matrix::from_vec(shape.0, shape.1, data)?;
        let ng = terms.iter().any(|&t| self.needs(t));
        Ok(self.push(value, Op::WeightedSum(terms.to_vec(), weights.to_vec()), ng))
    }

    /// `Σ x ⊙ probe` as a `1 x 1` value; handy as a scalar test objective.
    pub fn dot(&mut self, x: Var, probe: Arc<Matrix>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != probe.shape() {
            return Err(GmnnError::shape("dot probe shape"));
        }
        let value = Matrix::filled(1, 1, xv.dot(&probe));
        let ng = self.needs(x);
        Ok(self.push(value, Op::Dot(x, probe), ng))
    }

    /// `Σ_r w_r · (−log softmax(logits_r)[label_r])` as a `1 x 1` value.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: Arc<Vec<ClassId>>,
        row_weights: Arc<Vec<Scalar>>,
    ) -> Result<Var> {
        let z = self.value(logits);
        if labels.len() != z.rows() || row_weights.len() != z.rows() {
            return Err(GmnnError::shape(format!(
                "{} labels / {} weights for {} logit rows",
                labels.len(),
                row_weights.len(),
                z.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= z.cols()) {
            return Err(GmnnError::Label(format!(
                "label {bad} outside {} classes",
                z.cols()
            )));
        }
        let mut probs = z.clone();
        let mut loss = 0.0;
        for r in 0..z.rows() {
            let row = probs.row_mut(r);
            let m = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
            let lse = m + sum.ln();
            loss += row_weights[r] * (lse - z[(r, labels[r] as usize)]);
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                labels,
                row_weights,
                probs,
            },
            ng,
        ))
    }

    /// Gradients of the `1 x 1` value `loss` with respect to every recorded
    /// parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(GmnnError::shape("backward needs a 1x1 objective"));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    out.insert(*id, g);
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.matmul_t(self.value(*b))?;
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).t_matmul(&g)?;
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::AddBias(x, b) => {
                    if self.needs(*b) {
                        let mut gb = Matrix::zeros(1, g.cols());
                        for i in 0..g.rows() {
                            for (o, v) in gb.row_mut(0).iter_mut().zip(g.row(i)) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Act(x, act) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for ((gv, &xi), &yi) in gx
                        .as_mut_slice()
                        .iter_mut()
                        .zip(xv.as_slice())
                        .zip(node.value.as_slice())
                    {
                        *gv *= act.derivative(xi, yi);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Scale(x, f) => {
                    let mut gx = g;
                    gx.scale(*f);
                    accumulate(&mut grads, *x, gx);
                }
                Op::ScaleRows(x, factors) => {
                    let mut gx = g;
                    for (i, &f) in factors.iter().enumerate() {
                        for v in gx.row_mut(i) {
                            *v *= f;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.slice_cols(0, ca));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.slice_cols(ca, g.cols()));
                    }
                }
                Op::Gather(x, indices) => {
                    let rows = self.value(*x).rows();
                    accumulate(&mut grads, *x, g.scatter_add_rows(indices, rows));
                }
                Op::SegmentSoftmax(x, segments) => {
                    let y = &node.value;
                    let mut gx = g;
                    let off = segments.offsets();
                    for s in 0..segments.rows() {
                        for col in 0..y.cols() {
                            let mut dot = 0.0;
                            for r in off[s]..off[s + 1] {
                                dot += y[(r, col)] * gx[(r, col)];
                            }
                            for r in off[s]..off[s + 1] {
                                gx[(r, col)] = y[(r, col)] * (gx[(r, col)] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SegmentWeightedSum {
                    weights,
                    values,
                    segments,
                } => {
                    let (wv, vv) = (self.value(*weights), self.value(*values));
                    let broadcast = wv.cols() == 1;
                    let off = segments.offsets();
                    if self.needs(*values) {
                        let mut gv = Matrix::zeros(vv.rows(), vv.cols());
                        for s in 0..segments.rows() {
                            let go = g.row(s);
                            for e in off[s]..off[s + 1] {
                                let w = wv.row(e);
                                for (col, (o, gg)) in gv.row_mut(e).iter_mut().zip(go).enumerate() {
                                    *o = if broadcast { w[0] } else { w[col] } * gg;
                                }
                            }
                        }
                        accumulate(&mut grads, *values, gv);
                    }
                    if self.needs(*weights) {
                        let mut gw = Matrix::zeros(wv.rows(), wv.cols());
                        for s in 0..segments.rows() {
                            let go = g.row(s);
                            for e in off[s]..off[s + 1] {
                                let v = vv.row(e);
                                if broadcast {
                                    gw[(e, 0)] = v.iter().zip(go).map(|(a, b)| a * b).sum();
                                } else {
                                    for (o, (a, b)) in gw.row_mut(e).iter_mut().zip(v.iter().zip(go)) {
                                        *o = a * b;
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads, *weights, gw);
                    }
                }
                Op::GatherWeightedSum {
                    weights,
                    values,
                    segments,
                } => {
                    let (wv, vv) = (self.value(*weights), self.value(*values));
                    let broadcast = wv.cols() == 1;
                    let off = segments.offsets();
                    let idx = segments.indices();
                    if self.needs(*values) {
                        let mut gv = Matrix::zeros(vv.rows(), vv.cols());
                        for s in 0..segments.rows() {
                            let go = g.row(s);
                            let range = off[s]..off[s + 1];
                            for (e, &j) in range.clone().zip(&idx[range]) {
                                let w = wv.row(e);
                                let dst = gv.row_mut(j as usize);
                                if broadcast {
                                    for (o, gg) in dst.iter_mut().zip(go) {
                                        *o += w[0] * gg;
                                    }
                                } else {
                                    for ((o, gg), ww) in dst.iter_mut().zip(go).zip(w) {
                                        *o += ww * gg;
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads, *values, gv);
                    }
                    if self.needs(*weights) {
                        let mut gw = Matrix::zeros(wv.rows(), wv.cols());
                        for s in 0..segments.rows() {
                            let go = g.row(s);
                            for e in off[s]..off[s + 1] {
                                let v = vv.row(idx[e] as usize);
                                if broadcast {
                                    gw[(e, 0)] = v.iter().zip(go).map(|(a, b)| a * b).sum();
                                } else {
                                    for (o, (a, b)) in gw.row_mut(e).iter_mut().zip(v.iter().zip(go)) {
                                        *o = a * b;
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads, *weights, gw);
                    }
                }
                Op::AffineActAffine {
                    input,
                    w1,
                    b1,
                    act,
                    w2,
                } => {
                    let (w1v, b1v, w2v) = (self.value(*w1), self.value(*b1), self.value(*w2));
                    let h = w1v.cols();
                    let mut gw1 = Matrix::zeros(w1v.rows(), h);
                    let mut gb1 = Matrix::zeros(1, h);
                    let mut gw2 = Matrix::zeros(h, w2v.cols());
                    let mut hidden = vec![0.0; h];
                    let mut slope = vec![0.0; h];
                    for r in 0..input.rows() {
                        let x = input.row(r);
                        fused_hidden(x, w1v, b1v.row(0), *act, &mut hidden, Some(&mut slope));
                        let go = g.row(r);
                        for k in 0..h {
                            let wrow = w2v.row(k);
                            let mut ga = 0.0;
                            for ((gw, &gg), &w) in gw2.row_mut(k).iter_mut().zip(go).zip(wrow) {
                                *gw += hidden[k] * gg;
                                ga += w * gg;
                            }
                            let gz = ga * slope[k];
                            if gz != 0.0 {
                                gb1[(0, k)] += gz;
                                for (i, &xi) in x.iter().enumerate() {
                                    gw1[(i, k)] += xi * gz;
                                }
                            }
                        }
                    }
                    if self.needs(*w1) {
                        accumulate(&mut grads, *w1, gw1);
                    }
                    if self.needs(*b1) {
                        accumulate(&mut grads, *b1, gb1);
                    }
                    if self.needs(*w2) {
                        accumulate(&mut grads, *w2, gw2);
                    }
                }
                Op::SliceRows(x, start) => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        gx.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SegmentMean(x, segments) => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    let off = segments.offsets();
                    for s in 0..segments.rows() {
                        let n = off[s + 1] - off[s];
                        if n == 0 {
                            continue;
                        }
                        let inv = 1.0 / n as Scalar;
                        let go = g.row(s);
                        for e in off[s]..off[s + 1] {
                            for (o, gg) in gx.row_mut(e).iter_mut().zip(go) {
                                *o = gg * inv;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::WeightedSum(terms, weights) => {
                    for (&t, &w) in terms.iter().zip(weights) {
                        if self.needs(t) {
                            let mut gt = g.clone();
                            gt.scale(w);
                            accumulate(&mut grads, t, gt);
                        }
                    }
                }
                Op::Dot(x, probe) => {
                    let mut gx = (**probe).clone();
                    gx.scale(g[(0, 0)]);
                    accumulate(&mut grads, *x, gx);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    row_weights,
                    probs,
                } => {
                    let seed = g[(0, 0)];
                    let mut gz = probs.clone();
                    for r in 0..gz.rows() {
                        gz[(r, labels[r] as usize)] -= 1.0;
                        let w = row_weights[r] * seed;
                        for v in gz.row_mut(r) {
                            *v *= w;
                        }
                    }
                    accumulate(&mut grads, *logits, gz);
                }
            }
        }
        Ok(out)
    }
}

/// `hidden = act(x · w1 + b1)`; `slope` receives the activation
/// derivative when given.
fn fused_hidden(
    x: &[Scalar],
    w1: &Matrix,
    b1: &[Scalar],
    act: Activation,
    hidden: &mut [Scalar],
    slope: Option<&mut Vec<Scalar>>,
) {
    hidden.copy_from_slice(b1);
    for (i, &xi) in x.iter().enumerate() {
        for (hk, w) in hidden.iter_mut().zip(w1.row(i)) {
            *hk += xi * w;
        }
    }
    match slope {
        Some(slope) => {
            for (hk, sk) in hidden.iter_mut().zip(slope.iter_mut()) {
                let z = *hk;
                *hk = act.apply(z);
                *sk = act.derivative(z, *hk);
            }
        }
        None => {
            for hk in hidden.iter_mut() {
                *hk = act.apply(*hk);
            }
        }
    }
}

/// Dot product with error-free product and sum transformations.
pub fn dot2(pairs: impl Iterator<Item = (Scalar, Scalar)>) -> Scalar {
    let (mut s, mut c) = (0.0 as Scalar, 0.0 as Scalar);
    for (a, b) in pairs {
        let p = a * b;
        let pe = a.mul_add(b, -p);
        let t = s + p;
        let z = t - s;
        let se = (s - (t - z)) + (p - z);
        s = t;
        c += pe + se;
    }
    s + c
}

fn check_segment_rows(segments: &Segments, rows: usize) -> Result<()> {
    if segments.offsets().last().copied().unwrap_or(0) != rows {
        return Err(GmnnError::shape(format!(
            "segments cover {} rows, input has {rows}",
            segments.offsets().last().copied().unwrap_or(0)
        )));
    }
    Ok(())
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g).expect("gradient shape matches value"),
        slot @ None => *slot = Some(g),
    }
}
