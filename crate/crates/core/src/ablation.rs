//! Sweeps over CCM neighbourhood configurations.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GmnnError, Result};
use crate::event::ClassId;
use crate::graph::EventGraph;
use crate::metrics::Confusion;
use crate::model::{GraphStructure, ModelConfig, ModelParams};
use crate::train::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationGroup {
    /// Growing number of CCM levels, `k = 16, 32, ...`.
    Layers,
    /// Four levels with different neighbourhood sizes.
    KSet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCase {
    pub group: AblationGroup,
    pub k_set: Vec<usize>,
}

/// `l` levels with `k = 16 · 1, ..., 16 · l` for each requested `l`.
pub fn layer_count_cases(counts: &[usize]) -> Vec<AblationCase> {
    counts
        .iter()
        .map(|&l| AblationCase {
            group: AblationGroup::Layers,
            k_set: (1..=l).map(|i| 16 * i).collect(),
        })
        .collect()
}

/// The five four-level neighbourhood sets.
pub fn k_set_cases() -> Vec<AblationCase> {
    [
        [3, 3, 9, 12],
        [8, 16, 24, 32],
        [16, 32, 48, 64],
        [25, 50, 75, 100],
        [40, 80, 160, 240],
    ]
    .into_iter()
    .map(|k| AblationCase {
        group: AblationGroup::KSet,
        k_set: k.to_vec(),
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub group: AblationGroup,
    pub k_set: Vec<usize>,
    pub parameters: usize,
    pub accuracy: f64,
    pub mean_iou: f64,
    pub final_loss: f64,
    pub seconds: f64,
}

/// Predicted labels for every node of every graph, concatenated.
pub fn predict_labels(model: &ModelParams, graphs: &[EventGraph]) -> Result<Vec<ClassId>> {
    let mut out = Vec::new();
    for g in graphs {
        let logits = model.predict(&GraphStructure::build(g, &model.config)?)?;
        out.extend(logits.argmax_rows().into_iter().map(|c| c as ClassId));
    }
    Ok(out)
}

pub fn concat_labels(graphs: &[EventGraph]) -> Result<Vec<ClassId>> {
    let mut out = Vec::new();
    for g in graphs {
        out.extend_from_slice(
            g.labels
                .as_ref()
                .ok_or_else(|| GmnnError::Label("evaluation graph has no labels".into()))?,
        );
    }
    Ok(out)
}

/// Trains one model per case from `base` (with the case's k set and the
/// default level weights) and scores it on `eval_set`. Cases run in
/// parallel; each is deterministic on its own.
pub fn ablate_ccm(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &[EventGraph],
    eval_set: &[EventGraph],
    cases: &[AblationCase],
) -> Result<Vec<AblationRow>> {
    let truth = concat_labels(eval_set)?;
    cases
        .par_iter()
        .map(|case| {
            let start = Instant::now();
            let config = ModelConfig {
                k_set: case.k_set.clone(),
                level_weights: None,
                ..base.clone()
            };
            let mut model = ModelParams::new(config)?;
            let report = train(&mut model, train_set, train_cfg)?;
            let pred = predict_labels(&model, eval_set)?;
            let conf = Confusion::new(&pred, &truth, model.config.classes)?;
            Ok(AblationRow {
                group: case.group,
                k_set: case.k_set.clone(),
                parameters: crate::model::count_parameters(&model),
                accuracy: conf.accuracy(),
                mean_iou: conf.mean_iou(),
                final_loss: report.history.last().map_or(f64::NAN, |r| crate::tensor::widen(r.loss)),
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

/// Text table: one column per CCM level (`-` when absent), then accuracy
/// and mIoU in percent.
pub fn render_table(rows: &[AblationRow]) -> String {
    let levels = rows.iter().map(|r| r.k_set.len()).max().unwrap_or(0);
    let mut out = String::from("group  ");
    for l in 1..=levels {
        out.push_str(&format!("{:>5}", format!("L{l}")));
    }
    out.push_str("   ACC%   mIoU%\n");
    for r in rows {
        let group = match r.group {
            AblationGroup::Layers => "layers",
            AblationGroup::KSet => "k_set ",
        };
        out.push_str(&format!("{group} "));
        for l in 0..levels {
            match r.k_set.get(l) {
                Some(k) => out.push_str(&format!("{k:>5}")),
                None => out.push_str(&format!("{:>5}", "-")),
            }
        }
        out.push_str(&format!(" {:>6.2} {:>7.2}\n", 100.0 * r.accuracy, 100.0 * r.mean_iou));
    }
    out
}
