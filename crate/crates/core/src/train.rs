//! Cross-entropy training with the rotating subset schedule.
//!
//! The dataset is split into `subsets` contiguous parts; iteration `t`
//! makes one pass over part `t mod subsets` in batches. Each batch is one
//! block-diagonal forward pass whose loss is the mean over members of the
//! per-graph mean cross-entropy.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{GmnnError, Result};
use crate::event::ClassId;
use crate::graph::EventGraph;
use crate::model::{GraphStructure, ModelParams};
use crate::nn::Tape;
use crate::optim::{SgdConfig, SgdState};
use crate::tensor::{Matrix, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: Scalar,
    pub momentum: Scalar,
    pub weight_decay: Scalar,
    pub batch: usize,
    /// Number of rotating subsets `L`.
    pub subsets: usize,
    /// Passes over the active subset.
    pub iterations: usize,
    /// Evaluate training accuracy every this many iterations (0: never).
    pub eval_every: usize,
    /// Stop once training accuracy reaches this value.
    pub stop_at_accuracy: Option<Scalar>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        TrainConfig {
            lr: sgd.lr,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            batch: 4,
            subsets: 1,
            iterations: 100,
            eval_every: 0,
            stop_at_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.subsets == 0 {
            return Err(GmnnError::config("batch and subsets must be >= 1"));
        }
        if !(self.lr.is_finite() && self.momentum.is_finite() && self.weight_decay.is_finite()) {
            return Err(GmnnError::config("optimizer coefficients must be finite"));
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// Mean over rows of `-log softmax(logits)[label]`, and its gradient with
/// respect to the logits.
pub fn cross_entropy_loss(logits: &Matrix, labels: &[ClassId]) -> Result<(Scalar, Matrix)> {
    if logits.rows() == 0 {
        return Err(GmnnError::EmptyGraph);
    }
    let mut tape = Tape::new();
    let z = tape.param(crate::nn::ParamId(0), logits);
    let w = vec![1.0 / logits.rows() as Scalar; logits.rows()];
    let loss = tape.cross_entropy(z, Arc::new(labels.to_vec()), Arc::new(w))?;
    let grads = tape.backward(loss)?;
    let g = grads.get(crate::nn::ParamId(0)).cloned().expect("logits gradient");
    Ok((tape.value(loss)[(0, 0)], g))
}

/// A graph with its structure and labels, ready for repeated passes.
#[derive(Debug, Clone)]
pub struct Sample {
    pub structure: GraphStructure,
    pub labels: Vec<ClassId>,
}

impl Sample {
    pub fn new(model: &ModelParams, graph: &EventGraph) -> Result<Self> {
        let labels = graph
            .labels
            .clone()
            .ok_or_else(|| GmnnError::Label("training graph has no labels".into()))?;
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= model.config.classes) {
            return Err(GmnnError::Label(format!(
                "label {bad} outside {} classes",
                model.config.classes
            )));
        }
        Ok(Sample {
            structure: model.structure(graph)?,
            labels,
        })
    }
}

/// Several samples merged into one forward pass.
#[derive(Debug, Clone)]
pub struct Batch {
    pub structure: GraphStructure,
    pub labels: Arc<Vec<ClassId>>,
    /// `1 / (n_b · B)` for every row of member `b`.
    pub row_weights: Arc<Vec<Scalar>>,
}

impl Batch {
    pub fn new(members: &[&Sample]) -> Result<Self> {
        let structs: Vec<&GraphStructure> = members.iter().map(|s| &s.structure).collect();
        let structure = GraphStructure::merge(&structs)?;
        let b = members.len() as Scalar;
        let mut labels = Vec::new();
        let mut row_weights = Vec::new();
        for s in members {
            labels.extend_from_slice(&s.labels);
            let w = 1.0 / (s.labels.len() as Scalar * b);
            row_weights.extend(std::iter::repeat_n(w, s.labels.len()));
        }
        Ok(Batch {
            structure,
            labels: Arc::new(labels),
            row_weights: Arc::new(row_weights),
        })
    }

    /// Loss and gradients of one pass.
    pub fn loss_and_grads(&self, model: &ModelParams) -> Result<(Scalar, crate::nn::Gradients)> {
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &self.structure)?;
        let loss = tape.cross_entropy(logits, Arc::clone(&self.labels), Arc::clone(&self.row_weights))?;
        let value = tape.value(loss)[(0, 0)];
        if !value.is_finite() {
            return Err(GmnnError::Numeric("training loss".into()));
        }
        Ok((value, tape.backward(loss)?))
    }
}

/// Contiguous split of `n` items into `parts` ranges, sizes differing by at
/// most one.
pub fn subset_ranges(n: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let parts = parts.max(1);
    let (base, extra) = (n / parts, n % parts);
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub subset: usize,
    /// Mean batch loss over the pass.
    pub loss: Scalar,
    pub train_accuracy: Option<Scalar>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainReport {
    pub history: Vec<IterationRecord>,
    pub iterations_run: usize,
    /// First iteration (1-based count) at which the accuracy target held.
    pub reached_target_at: Option<usize>,
    pub final_accuracy: Option<Scalar>,
    pub seconds: f64,
}

impl TrainReport {
    /// Two-column `iteration loss` text.
    pub fn loss_curve(&self) -> String {
        self.history
            .iter()
            .map(|r| format!("{} {}\n", r.iteration, r.loss))
            .collect()
    }
}

/// Fraction of nodes whose argmax logit equals the label, over all samples.
pub fn training_accuracy(model: &ModelParams, batches: &[Batch]) -> Result<Scalar> {
    let (mut hit, mut total) = (0usize, 0usize);
    for b in batches {
        let logits = model.predict(&b.structure)?;
        for (p, &l) in logits.argmax_rows().iter().zip(b.labels.iter()) {
            hit += usize::from(*p == l as usize);
            total += 1;
        }
    }
    Ok(hit as Scalar / total.max(1) as Scalar)
}

/// Trains `model` in place.
pub fn train(model: &mut ModelParams, dataset: &[EventGraph], cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, dataset, cfg, |_| {})
}

/// As [`train`], calling `progress` after every iteration.
pub fn train_with(
    model: &mut ModelParams,
    dataset: &[EventGraph],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&IterationRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(GmnnError::config("training set is empty"));
    }
    let start = Instant::now();
    let samples: Vec<Sample> = dataset.iter().map(|g| Sample::new(model, g)).collect::<Result<_>>()?;
    let ranges = subset_ranges(samples.len(), cfg.subsets.min(samples.len()));
    let subsets: Vec<Vec<Batch>> = ranges
        .iter()
        .map(|r| {
            samples[r.clone()]
                .chunks(cfg.batch)
                .map(|c| Batch::new(&c.iter().collect::<Vec<_>>()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let all_batches: Vec<Batch> = samples
        .chunks(cfg.batch)
        .map(|c| Batch::new(&c.iter().collect::<Vec<_>>()))
        .collect::<Result<_>>()?;

    let mut opt = SgdState::new(cfg.sgd(), &model.store);
    let mut report = TrainReport::default();
    for t in 0..cfg.iterations {
        let subset = t % subsets.len();
        let mut loss_sum = 0.0;
        for batch in &subsets[subset] {
            let (loss, grads) = batch.loss_and_grads(model)?;
            opt.step(&mut model.store, &grads)?;
            loss_sum += loss;
        }
        model.store.check_finite()?;
        let train_accuracy = if cfg.eval_every > 0 && (t + 1) % cfg.eval_every == 0 {
            Some(training_accuracy(model, &all_batches)?)
        } else {
            None
        };
        let record = IterationRecord {
            iteration: t + 1,
            subset,
            loss: loss_sum / subsets[subset].len() as Scalar,
            train_accuracy,
        };
        progress(&record);
        report.history.push(record);
        report.iterations_run = t + 1;
        if let (Some(acc), Some(target)) = (train_accuracy, cfg.stop_at_accuracy) {
            if acc >= target {
                report.reached_target_at = Some(t + 1);
                break;
            }
        }
    }
    report.final_accuracy = Some(training_accuracy(model, &all_batches)?);
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}
