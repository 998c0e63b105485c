//! Encoder-decoder assembly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GmnnError, Result};
use crate::graph::EventGraph;
use crate::nn::{Activation, MlpParams, ParamStore, Tape, Var};
use crate::tensor::Matrix;

use super::ccm::{CcmParams, MixerParams};
use super::structure::GraphStructure;
use super::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStage {
    /// Passes parent features to the sampled nodes.
    pub down: CcmParams,
    pub mixer: MixerParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStage {
    /// Passes coarse features back to the parent nodes.
    pub up: CcmParams,
    /// Fuses upsampled features with the skip connection.
    pub fuse: MlpParams,
    pub mixer: MixerParams,
}

/// Architecture handles plus the parameter values they index.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub stem: MlpParams,
    pub encoder: Vec<EncoderStage>,
    pub bottleneck: MlpParams,
    pub bottleneck_mixer: MixerParams,
    /// `decoder[s]` maps level `s + 1` back to level `s`.
    pub decoder: Vec<DecoderStage>,
    pub header: MlpParams,
}

impl ModelParams {
    /// Fresh model with seeded initialization.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let act = config.activation;
        let lw = config.level_widths();
        let w = config.resolved_level_weights();
        let (h, pc) = (config.score_width, config.per_channel_scores);
        let stages = config.stages();

        let stem = MlpParams::new(s, "stem", &[3, lw[0], lw[0]], act, act, rng)?;
        let mut encoder = Vec::with_capacity(stages);
        for l in 0..stages {
            encoder.push(EncoderStage {
                down: CcmParams::new(s, &format!("enc{l}.down"), lw[l], lw[l + 1], h, &w, act, pc, rng)?,
                mixer: MixerParams::new(s, &format!("enc{l}.mixer"), lw[l + 1], h, &w, act, pc, rng)?,
            });
        }
        let c = lw[stages];
        let bottleneck = MlpParams::new(s, "bottleneck", &[c, c], act, act, rng)?;
        let bottleneck_mixer = MixerParams::new(s, "bottleneck.mixer", c, h, &w, act, pc, rng)?;
        let mut decoder = Vec::with_capacity(stages);
        for l in 0..stages {
            decoder.push(DecoderStage {
                up: CcmParams::new(s, &format!("dec{l}.up"), lw[l + 1], lw[l], h, &w, act, pc, rng)?,
                fuse: MlpParams::new(s, &format!("dec{l}.fuse"), &[2 * lw[l], lw[l]], act, act, rng)?,
                mixer: MixerParams::new(s, &format!("dec{l}.mixer"), lw[l], h, &w, act, pc, rng)?,
            });
        }
        let header = MlpParams::new(
            s,
            "header",
            &[lw[0], lw[0], config.classes],
            act,
            Activation::Identity,
            rng,
        )?;
        Ok(ModelParams {
            config,
            store,
            stem,
            encoder,
            bottleneck,
            bottleneck_mixer,
            decoder,
            header,
        })
    }

    /// Model with `store` as its values. Names and shapes must match the
    /// architecture `config` describes.
    pub fn with_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let mut model = ModelParams::new(config)?;
        if store.len() != model.store.len() {
            return Err(GmnnError::Checkpoint(format!(
                "{} tensors, architecture expects {}",
                store.len(),
                model.store.len()
            )));
        }
        for ((_, na, a), (_, nb, b)) in model.store.iter().zip(store.iter()) {
            if na != nb || a.shape() != b.shape() {
                return Err(GmnnError::Checkpoint(format!(
                    "tensor {nb} {:?} does not match {na} {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        model.store = store;
        Ok(model)
    }

    pub fn structure(&self, graph: &EventGraph) -> Result<GraphStructure> {
        GraphStructure::build(graph, &self.config)
    }

    fn check_structure(&self, st: &GraphStructure) -> Result<()> {
        let stages = self.config.stages();
        let ks = self.config.k_set.len();
        let ok = st.levels() == stages + 1
            && st.down_maps.len() == stages
            && st.up_maps.len() == stages
            && st.mixer_maps.iter().all(|m| m.len() == ks)
            && st.down_maps.iter().chain(&st.up_maps).all(|m| m.len() == ks);
        if ok {
            Ok(())
        } else {
            Err(GmnnError::Structural(format!(
                "structure has {} levels, model needs {} with {ks} k-levels",
                st.levels(),
                stages + 1
            )))
        }
    }

    /// Level-`l` features to level `l + 1`.
    pub fn transition_down(&self, tape: &mut Tape, st: &GraphStructure, l: usize, x: Var) -> Result<Var> {
        let stage = &self.encoder[l];
        let h = stage.down.forward(tape, &self.store, x, &st.down_maps[l])?;
        stage
            .mixer
            .forward(tape, &self.store, h, &st.mixer_maps[l + 1], &st.inter[l + 1])
    }

    /// Level-`l + 1` features back to level `l`, fused with the level-`l`
    /// skip features.
    pub fn transition_up(
        &self,
        tape: &mut Tape,
        st: &GraphStructure,
        l: usize,
        coarse: Var,
        skip: Var,
    ) -> Result<Var> {
        let stage = &self.decoder[l];
        let up_maps = &st.up_maps[l];
        if tape.value(coarse).rows() != st.node_counts[l + 1] || tape.value(skip).rows() != st.node_counts[l] {
            return Err(GmnnError::Structural(format!(
                "transition up {l} expects {} -> {} nodes",
                st.node_counts[l + 1],
                st.node_counts[l]
            )));
        }
        let u = stage.up.forward(tape, &self.store, coarse, up_maps)?;
        let cat = tape.concat_cols(u, skip)?;
        let h = stage.fuse.forward(tape, &self.store, cat)?;
        stage
            .mixer
            .forward(tape, &self.store, h, &st.mixer_maps[l], &st.inter[l])
    }

    /// Per-node class logits for every graph in `st`.
    pub fn forward(&self, tape: &mut Tape, st: &GraphStructure) -> Result<Var> {
        self.check_structure(st)?;
        let stages = self.config.stages();
        let x0 = tape.constant((*st.input).clone());
        let mut h = self.stem.forward(tape, &self.store, x0)?;
        let mut skips = Vec::with_capacity(stages + 1);
        skips.push(h);
        for l in 0..stages {
            h = self.transition_down(tape, st, l, h)?;
            skips.push(h);
        }
        h = self.bottleneck.forward(tape, &self.store, h)?;
        h = self
            .bottleneck_mixer
            .forward(tape, &self.store, h, &st.mixer_maps[stages], &st.inter[stages])?;
        for l in (0..stages).rev() {
            h = self.transition_up(tape, st, l, h, skips[l])?;
        }
        let logits = self.header.forward(tape, &self.store, h)?;
        tape.value(logits).check_finite("logits")?;
        Ok(logits)
    }

    /// Logits without recording gradients.
    pub fn predict(&self, st: &GraphStructure) -> Result<Matrix> {
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, st)?;
        Ok(tape.value(logits).clone())
    }

    /// Every CCM block, encoder to decoder.
    pub fn ccm_blocks(&self) -> Vec<&CcmParams> {
        let mut out = Vec::new();
        for e in &self.encoder {
            out.push(&e.down);
            out.push(&e.mixer.ccm);
        }
        out.push(&self.bottleneck_mixer.ccm);
        for d in &self.decoder {
            out.push(&d.up);
            out.push(&d.mixer.ccm);
        }
        out
    }
}

/// Builds the structure for `graph` and returns its logits.
pub fn gmnn_forward(model: &ModelParams, graph: &EventGraph) -> Result<Matrix> {
    model.predict(&model.structure(graph)?)
}

/// Σ over every MLP of `in · out + out`, plus the fixed level weights of
/// every CCM block.
pub fn count_parameters(model: &ModelParams) -> usize {
    let mut total = model.stem.parameter_count()
        + model.bottleneck.parameter_count()
        + model.bottleneck_mixer.parameter_count()
        + model.header.parameter_count();
    for e in &model.encoder {
        total += e.down.parameter_count() + e.mixer.parameter_count();
    }
    for d in &model.decoder {
        total += d.up.parameter_count() + d.fuse.parameter_count() + d.mixer.parameter_count();
    }
    total
}
