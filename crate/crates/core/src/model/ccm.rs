//! Collaborative contextual mixing.
//!
//! Each k-level scores every (query, neighbour) pair from the neighbour's
//! features and their relative position, normalizes the scores over the
//! neighbourhood and sums value projections with those weights. Levels
//! are combined with fixed weights. Inter-set mixing then feeds every node
//! the mean of the sets it belongs to.

use std::sync::Arc;

use rand::Rng;

use crate::error::{GmnnError, Result};
use crate::nn::{Activation, MlpParams, ParamStore, Tape, Var};
use crate::tensor::Scalar;

use super::structure::{InverseLists, NeighborMap};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CcmLevelParams {
    /// Channel mixing of neighbour features for scoring.
    pub g1: MlpParams,
    /// Encoding of `e_query - e_neighbour`.
    pub delta: MlpParams,
    /// Score head on `[g1(x_j); delta(e_i - e_j)]`.
    pub g2: MlpParams,
    /// Value projection.
    pub g3: MlpParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CcmParams {
    pub levels: Vec<CcmLevelParams>,
    pub weights: Vec<Scalar>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl CcmParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        score_width: usize,
        weights: &[Scalar],
        act: Activation,
        per_channel_scores: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let score_out = if per_channel_scores { out_dim } else { 1 };
        let levels = (0..weights.len())
            .map(|l| {
                let p = format!("{name}.k{l}");
                Ok(CcmLevelParams {
                    g1: MlpParams::new(store, &format!("{p}.g1"), &[in_dim, score_width], act, act, rng)?,
                    delta: MlpParams::new(store, &format!("{p}.delta"), &[3, score_width], act, act, rng)?,
                    g2: MlpParams::new(
                        store,
                        &format!("{p}.g2"),
                        &[2 * score_width, score_out],
                        act,
                        Activation::Identity,
                        rng,
                    )?,
                    g3: MlpParams::new(store, &format!("{p}.g3"), &[in_dim, out_dim], act, act, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(CcmParams {
            levels,
            weights: weights.to_vec(),
            in_dim,
            out_dim,
        })
    }

    /// Trainable scalars plus the fixed level weights.
    pub fn parameter_count(&self) -> usize {
        let mlps: usize = self
            .levels
            .iter()
            .map(|l| {
                l.g1.parameter_count()
                    + l.delta.parameter_count()
                    + l.g2.parameter_count()
                    + l.g3.parameter_count()
            })
            .sum();
        mlps + self.weights.len()
    }

    /// Raw scores `s_ij`, one row per stored pair (`nnz x 1`, or
    /// `nnz x out_dim` with per-channel scores).
    ///
    /// The score head is affine, so its weight splits into a feature half
    /// and a position half. The feature half is applied per node before
    /// the gather instead of per pair after it; the position half is fused
    /// with the position encoder so no per-pair hidden layer is stored.
    pub fn scores(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        level: usize,
        x: Var,
        map: &NeighborMap,
    ) -> Result<Var> {
        let p = &self.levels[level];
        let head = match p.g2.layers.as_slice() {
            [head] if p.g2.output == Activation::Identity => head,
            _ => return Err(GmnnError::config("score head must be a single affine layer")),
        };
        let h = p.g1.out_dim();
        let w = tape.param(head.weight, store.get(head.weight));
        let b = tape.param(head.bias, store.get(head.bias));
        let w_feat = tape.slice_rows(w, 0, h)?;
        let w_pos = tape.slice_rows(w, h, 2 * h)?;

        let a = p.g1.forward(tape, store, x)?;
        let node_part = tape.matmul(a, w_feat)?;
        let node_part = tape.gather(node_part, Arc::clone(&map.gather))?;
        let enc = match p.delta.layers.as_slice() {
            [enc] => enc,
            _ => return Err(GmnnError::config("position encoder must be a single layer")),
        };
        let w1 = tape.param(enc.weight, store.get(enc.weight));
        let b1 = tape.param(enc.bias, store.get(enc.bias));
        let pair_part = tape.affine_act_affine(Arc::clone(&map.rel), w1, b1, p.delta.output, w_pos)?;
        let s = tape.add(node_part, pair_part)?;
        tape.add_bias(s, b)
    }

    /// `u_i = Σ_j softmax(s)_j · g3(x_j)` over the neighbourhood of `i`.
    pub fn intra_set(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        level: usize,
        scores: Var,
        x: Var,
        map: &NeighborMap,
    ) -> Result<Var> {
        let weights = tape.segment_softmax(scores, Arc::clone(&map.segments))?;
        let v = self.levels[level].g3.forward(tape, store, x)?;
        tape.gather_weighted_sum(weights, v, Arc::clone(&map.segments))
    }

    /// All levels, combined with the level weights. `x` holds domain
    /// features; the result has one row per query.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        maps: &[NeighborMap],
    ) -> Result<Var> {
        if maps.len() != self.levels.len() {
            return Err(GmnnError::Structural(format!(
                "{} neighbour maps for {} CCM levels",
                maps.len(),
                self.levels.len()
            )));
        }
        let rows = tape.value(x).rows();
        if let Some(m) = maps.iter().find(|m| m.domain_size != rows) {
            return Err(GmnnError::Structural(format!(
                "map over {} nodes applied to {rows} feature rows",
                m.domain_size
            )));
        }
        let mut u = Vec::with_capacity(maps.len());
        for (level, map) in maps.iter().enumerate() {
            let s = self.scores(tape, store, level, x, map)?;
            u.push(self.intra_set(tape, store, level, s, x, map)?);
        }
        ccm_level_aggregate(tape, &u, &self.weights)
    }
}

/// `Σ_k w_k u_k`, evaluated with one rounding per element.
pub fn ccm_level_aggregate(tape: &mut Tape, u_levels: &[Var], weights: &[Scalar]) -> Result<Var> {
    tape.weighted_sum(u_levels, weights)
}

/// `u + mask ⊙ mlp(mean of u over the sets containing each node)`.
pub fn ccm_inter_set(
    tape: &mut Tape,
    store: &ParamStore,
    mlp: &MlpParams,
    u: Var,
    inverse: &InverseLists,
) -> Result<Var> {
    if inverse.segments.rows() != tape.value(u).rows() {
        return Err(GmnnError::Structural("inverse lists do not match node count".into()));
    }
    let g = tape.gather(u, Arc::clone(&inverse.gather))?;
    let mean = tape.segment_mean(g, Arc::clone(&inverse.segments))?;
    let mut mixed = mlp.forward(tape, store, mean)?;
    if inverse.empty_rows > 0 {
        mixed = tape.scale_rows(mixed, Arc::clone(&inverse.mask))?;
    }
    tape.add(u, mixed)
}

/// CCM followed by inter-set mixing, added to the block input.
#[derive(Debug, Clone, PartialEq)]
pub struct MixerParams {
    pub ccm: CcmParams,
    pub inter: MlpParams,
}

impl MixerParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        score_width: usize,
        weights: &[Scalar],
        act: Activation,
        per_channel_scores: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(MixerParams {
            ccm: CcmParams::new(
                store,
                &format!("{name}.ccm"),
                width,
                width,
                score_width,
                weights,
                act,
                per_channel_scores,
                rng,
            )?,
            inter: MlpParams::new(store, &format!("{name}.inter"), &[width, width], act, act, rng)?,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.ccm.parameter_count() + self.inter.parameter_count()
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        maps: &[NeighborMap],
        inverse: &InverseLists,
    ) -> Result<Var> {
        let u = self.ccm.forward(tape, store, x, maps)?;
        let mixed = ccm_inter_set(tape, store, &self.inter, u, inverse)?;
        tape.add(x, mixed)
    }
}
