//! The segmentation network: CCM mixer blocks, transitions and the
//! encoder-decoder around them.

mod ccm;
mod network;
mod structure;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GmnnError, Result};
use crate::fps::reduced_count;
use crate::tape::Activation;
use crate::tensor::Scalar;

pub use ccm::{
    ccm_inter_set, ccm_level_aggregate, CcmLevelParams, CcmParams, MixerParams,
};
pub use network::{count_parameters, gmnn_forward, ModelParams};
pub use structure::{GraphStructure, InverseLists, NeighborMap};

/// Architecture hyperparameters. Stored next to checkpoints; its digest
/// guards against loading weights into the wrong shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel width after each transition down; the stem uses the first.
    pub widths: Vec<usize>,
    /// Neighbourhood size per CCM level. Clamped to the level size.
    pub k_set: Vec<usize>,
    /// Fixed CCM level weights; defaults to the ramp `l / Σl`.
    pub level_weights: Option<Vec<Scalar>>,
    /// Node reduction per transition down.
    pub reduction: usize,
    pub classes: usize,
    /// Width of the score branch (`g1` and the position encoder).
    pub score_width: usize,
    pub activation: Activation,
    /// One softmax per channel instead of one per neighbour.
    pub per_channel_scores: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            widths: vec![32, 64, 128, 256],
            k_set: vec![16, 32, 48, 64],
            level_weights: None,
            reduction: 4,
            classes: 10,
            score_width: 16,
            activation: Activation::Relu,
            per_channel_scores: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(GmnnError::config("widths must be non-empty and positive"));
        }
        if self.k_set.is_empty() || self.k_set.contains(&0) {
            return Err(GmnnError::config("k_set must be non-empty and positive"));
        }
        if self.reduction == 0 {
            return Err(GmnnError::config("reduction factor must be >= 1"));
        }
        if self.classes == 0 || self.classes > u16::MAX as usize + 1 {
            return Err(GmnnError::config("class count out of range"));
        }
        if self.score_width == 0 {
            return Err(GmnnError::config("score_width must be positive"));
        }
        if let Some(w) = &self.level_weights {
            validate_level_weights(w, self.k_set.len())?;
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    /// Channel width at each level, finest first.
    pub fn level_widths(&self) -> Vec<usize> {
        std::iter::once(self.widths[0])
            .chain(self.widths.iter().copied())
            .collect()
    }

    pub fn resolved_level_weights(&self) -> Vec<Scalar> {
        self.level_weights
            .clone()
            .unwrap_or_else(|| default_level_weights(self.k_set.len()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            toml::from_str(text).map_err(|e| GmnnError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    /// SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("model config serializes");
        Sha256::digest(&json).into()
    }
}

/// `[1, 2, ..., L] / (L (L + 1) / 2)`; `[0.1, 0.2, 0.3, 0.4]` for four
/// levels.
pub fn default_level_weights(levels: usize) -> Vec<Scalar> {
    let total = (levels * (levels + 1) / 2) as Scalar;
    (1..=levels).map(|l| l as Scalar / total).collect()
}

pub fn validate_level_weights(w: &[Scalar], levels: usize) -> Result<()> {
    if w.len() != levels {
        return Err(GmnnError::config(format!(
            "{} level weights for {levels} levels",
            w.len()
        )));
    }
    if w.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(GmnnError::config("level weights must be finite and non-negative"));
    }
    let sum: Scalar = w.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(GmnnError::config(format!("level weights sum to {sum}, expected 1")));
    }
    Ok(())
}

/// Node counts at every level: `n, ceil(n / r), ...`, `stages + 1` entries.
pub fn node_count_chain(n: usize, reduction: usize, stages: usize) -> Vec<usize> {
    let mut out = vec![n];
    for _ in 0..stages {
        out.push(reduced_count(*out.last().unwrap(), reduction));
    }
    out
}
