//! Parameter storage and multilayer perceptrons on top of [`Tape`].

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::csr::Segments;
use crate::error::{GmnnError, Result};
use crate::knn::IndexMap;
use crate::tensor::{Matrix, Scalar};

pub use crate::tape::{Activation, Gradients, ParamId, Tape, Var};

/// Named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (_, name, v) in self.iter() {
            v.check_finite(name)?;
        }
        Ok(())
    }
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out).max(1) as Scalar).sqrt();
    Matrix::random_uniform(fan_in, fan_out, bound, rng)
}

/// One affine map `x W + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier_uniform(in_dim, out_dim, rng));
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, out_dim));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.in_dim {
            return Err(GmnnError::shape(format!(
                "linear layer expects {} input channels, got {cols}",
                self.in_dim
            )));
        }
        let w = tape.param(self.weight, store.get(self.weight));
        let b = tape.param(self.bias, store.get(self.bias));
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

/// Layers with `hidden` activation between them and `output` activation
/// after the last one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpParams {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

impl MlpParams {
    /// `dims = [in, h1, ..., out]`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(GmnnError::config(format!("MLP {name} needs at least two dims")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Ok(MlpParams {
            layers,
            hidden,
            output,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Linear::parameter_count).sum()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            let act = if i == last { self.output } else { self.hidden };
            h = tape.activation(h, act);
        }
        Ok(h)
    }
}

/// Pointwise MLP on every row of `input`, without keeping a tape.
pub fn mlp_forward(params: &MlpParams, store: &ParamStore, input: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = params.forward(&mut tape, store, x)?;
    Ok(tape.value(y).clone())
}

/// How neighbour sums are normalized before the affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `c_ij = |N_i|`.
    #[default]
    Mean,
    /// `c_ij = sqrt(|N_i| · |{q : j ∈ N_q}|)`.
    SymmetricDegree,
}

/// Aggregates neighbour rows of `x` per `map`, then applies the MLP.
pub fn neighborhood_mlp(
    tape: &mut Tape,
    params: &MlpParams,
    store: &ParamStore,
    x: Var,
    map: &IndexMap,
    normalization: Normalization,
) -> Result<Var> {
    let rows = tape.value(x).rows();
    if map.rows() != rows || map.domain_size() != rows {
        return Err(GmnnError::shape(format!(
            "map with {} rows over {} nodes for {rows} feature rows",
            map.rows(),
            map.domain_size()
        )));
    }
    let segments = Arc::new(map.to_segments());
    let gathered = tape.gather(x, Arc::new(map.entries().to_vec()))?;
    let agg = match normalization {
        Normalization::Mean => tape.segment_mean(gathered, segments)?,
        Normalization::SymmetricDegree => {
            let w = symmetric_weights(&segments, rows);
            let w = tape.constant(w);
            tape.segment_weighted_sum(w, gathered, segments)?
        }
    };
    params.forward(tape, store, agg)
}

fn symmetric_weights(segments: &Segments, domain: usize) -> Matrix {
    let mut in_deg = vec![0usize; domain];
    for &j in segments.indices() {
        in_deg[j as usize] += 1;
    }
    let mut w = Vec::with_capacity(segments.nnz());
    for i in 0..segments.rows() {
        let out_deg = segments.row(i).len() as Scalar;
        for &j in segments.row(i) {
            w.push(1.0 / (out_deg * in_deg[j as usize] as Scalar).sqrt());
        }
    }
    Matrix::from_vec(w.len(), 1, w).expect("one weight per entry")
}

/// Eval-only form of [`neighborhood_mlp`].
pub fn neighborhood_mlp_forward(
    params: &MlpParams,
    store: &ParamStore,
    input: &Matrix,
    map: &IndexMap,
    normalization: Normalization,
) -> Result<Matrix> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = neighborhood_mlp(&mut tape, params, store, x, map, normalization)?;
    Ok(tape.value(y).clone())
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(input: &Matrix) -> Matrix {
    let mut out = input.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}
