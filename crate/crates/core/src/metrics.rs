//! Segmentation metrics: per-event accuracy, count-ratio accuracy, IoU and
//! the boundary analysis of false positives.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{GmnnError, Result};
use crate::event::ClassId;
use crate::graph::Position;

fn check_lengths(pred: &[ClassId], truth: &[ClassId]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(GmnnError::shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

fn check_classes(labels: &[ClassId], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l as usize >= classes) {
        Some(&bad) => Err(GmnnError::Label(format!("label {bad} outside {classes} classes"))),
        None => Ok(()),
    }
}

/// Counts indexed `[truth][pred]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn new(pred: &[ClassId], truth: &[ClassId], classes: usize) -> Result<Self> {
        check_lengths(pred, truth)?;
        check_classes(pred, classes)?;
        check_classes(truth, classes)?;
        let mut counts = vec![vec![0u64; classes]; classes];
        for (&p, &t) in pred.iter().zip(truth) {
            counts[t as usize][p as usize] += 1;
        }
        Ok(Confusion { classes, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn true_count(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn pred_count(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn class_counts(&self, c: usize) -> ClassCounts {
        let tp = self.counts[c][c];
        let fp = self.pred_count(c) - tp;
        let fn_ = self.true_count(c) - tp;
        ClassCounts {
            tp,
            fp,
            fn_,
            tn: self.total() - tp - fp - fn_,
        }
    }

    pub fn accuracy(&self) -> f64 {
        let hits: u64 = (0..self.classes).map(|c| self.counts[c][c]).sum();
        hits as f64 / self.total().max(1) as f64
    }

    /// `TP / (TP + FP + FN)` per class; `None` for classes absent from
    /// both prediction and truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let k = self.class_counts(c);
                let denom = k.tp + k.fp + k.fn_;
                (denom > 0).then(|| k.tp as f64 / denom as f64)
            })
            .collect()
    }

    pub fn mean_iou(&self) -> f64 {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            return 1.0;
        }
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Fraction of events predicted correctly.
pub fn per_event_accuracy(pred: &[ClassId], truth: &[ClassId]) -> Result<f64> {
    check_lengths(pred, truth)?;
    if truth.is_empty() {
        return Ok(1.0);
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Mean over classes of `min(n_true, n_pred) / max(n_true, n_pred)`, with
/// 1 for classes absent from both.
pub fn count_ratio_accuracy(pred: &[ClassId], truth: &[ClassId], classes: usize) -> Result<f64> {
    let conf = Confusion::new(pred, truth, classes)?;
    let sum: f64 = (0..classes)
        .map(|c| {
            let (a, b) = (conf.true_count(c), conf.pred_count(c));
            if a.max(b) == 0 {
                1.0
            } else {
                a.min(b) as f64 / a.max(b) as f64
            }
        })
        .sum();
    Ok(sum / classes as f64)
}

/// Unbounded per-class count ratios, averaged over classes whose
/// denominator is non-zero, in both orientations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiteralCountRatio {
    pub truth_over_pred: Option<f64>,
    pub pred_over_truth: Option<f64>,
}

pub fn literal_count_ratio(pred: &[ClassId], truth: &[ClassId], classes: usize) -> Result<LiteralCountRatio> {
    let conf = Confusion::new(pred, truth, classes)?;
    let ratio = |num: &dyn Fn(usize) -> u64, den: &dyn Fn(usize) -> u64| {
        let terms: Vec<f64> = (0..classes)
            .filter(|&c| den(c) > 0)
            .map(|c| num(c) as f64 / den(c) as f64)
            .collect();
        (!terms.is_empty()).then(|| terms.iter().sum::<f64>() / terms.len() as f64)
    };
    Ok(LiteralCountRatio {
        truth_over_pred: ratio(&|c| conf.true_count(c), &|c| conf.pred_count(c)),
        pred_over_truth: ratio(&|c| conf.pred_count(c), &|c| conf.true_count(c)),
    })
}

/// Mean IoU over classes present in prediction or truth, plus per-class
/// values.
pub fn mean_iou(pred: &[ClassId], truth: &[ClassId], classes: usize) -> Result<(f64, Vec<Option<f64>>)> {
    let conf = Confusion::new(pred, truth, classes)?;
    Ok((conf.mean_iou(), conf.iou()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryReport {
    /// Misclassified events.
    pub false_positives: u64,
    /// Misclassified events within the radius of a differently labelled
    /// event.
    pub boundary_false_positives: u64,
    /// `100 · boundary / all`, 0 without false positives.
    pub boundary_percentage: f64,
    /// Foreground (any class but `background`) against background.
    pub foreground: ClassCounts,
}

/// Marks events lying within `radius` (normalized x/y only) of an event
/// whose true label differs.
pub fn boundary_mask(truth: &[ClassId], positions: &[Position], radius: f64) -> Result<Vec<bool>> {
    if truth.len() != positions.len() {
        return Err(GmnnError::shape("labels and positions differ in length"));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(GmnnError::config("boundary radius must be positive"));
    }
    let cell = |p: &Position| ((p[0] / radius).floor() as i64, (p[1] / radius).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in positions.iter().enumerate() {
        grid.entry(cell(p)).or_default().push(i);
    }
    let r2 = radius * radius;
    Ok(positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (cx, cy) = cell(p);
            (-1..=1).any(|dx| {
                (-1..=1).any(|dy| {
                    grid.get(&(cx + dx, cy + dy)).is_some_and(|list| {
                        list.iter().any(|&j| {
                            truth[j] != truth[i] && {
                                let q = &positions[j];
                                let (ex, ey) = (p[0] - q[0], p[1] - q[1]);
                                ex * ex + ey * ey <= r2
                            }
                        })
                    })
                })
            })
        })
        .collect())
}

pub fn boundary_overlap_analysis(
    pred: &[ClassId],
    truth: &[ClassId],
    positions: &[Position],
    radius: f64,
    background: ClassId,
) -> Result<BoundaryReport> {
    check_lengths(pred, truth)?;
    let boundary = boundary_mask(truth, positions, radius)?;
    let mut fp = 0;
    let mut bfp = 0;
    let mut fg = ClassCounts::default();
    for ((&p, &t), &b) in pred.iter().zip(truth).zip(&boundary) {
        if p != t {
            fp += 1;
            bfp += u64::from(b);
        }
        match (p != background, t != background) {
            (true, true) => fg.tp += 1,
            (true, false) => fg.fp += 1,
            (false, true) => fg.fn_ += 1,
            (false, false) => fg.tn += 1,
        }
    }
    Ok(BoundaryReport {
        false_positives: fp,
        boundary_false_positives: bfp,
        boundary_percentage: if fp == 0 { 0.0 } else { 100.0 * bfp as f64 / fp as f64 },
        foreground: fg,
    })
}

/// Everything the evaluator reports for one labelled prediction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub events: usize,
    pub accuracy: f64,
    pub count_ratio_accuracy: f64,
    pub count_ratio_literal: LiteralCountRatio,
    pub mean_iou: f64,
    pub class_iou: Vec<Option<f64>>,
    pub class_counts: Vec<ClassCounts>,
    pub boundary: BoundaryReport,
}

impl MetricReport {
    pub fn compute(
        pred: &[ClassId],
        truth: &[ClassId],
        positions: &[Position],
        classes: usize,
        radius: f64,
        background: ClassId,
    ) -> Result<Self> {
        let conf = Confusion::new(pred, truth, classes)?;
        Ok(MetricReport {
            events: truth.len(),
            accuracy: conf.accuracy(),
            count_ratio_accuracy: count_ratio_accuracy(pred, truth, classes)?,
            count_ratio_literal: literal_count_ratio(pred, truth, classes)?,
            mean_iou: conf.mean_iou(),
            class_iou: conf.iou(),
            class_counts: (0..classes).map(|c| conf.class_counts(c)).collect(),
            boundary: boundary_overlap_analysis(pred, truth, positions, radius, background)?,
        })
    }

    /// Plain-text rendering.
    pub fn render(&self) -> String {
        let mut s = format!(
            "events            {}\naccuracy          {:.4}\ncount-ratio acc   {:.4}\nmIoU              {:.4}\nboundary FP       {}/{} ({:.2}%)\n",
            self.events,
            self.accuracy,
            self.count_ratio_accuracy,
            self.mean_iou,
            self.boundary.boundary_false_positives,
            self.boundary.false_positives,
            self.boundary.boundary_percentage
        );
        s.push_str("class    IoU       TP       FP       FN\n");
        for (c, (iou, k)) in self.class_iou.iter().zip(&self.class_counts).enumerate() {
            if let Some(iou) = iou {
                s.push_str(&format!("{c:<5} {iou:>6.4} {:>8} {:>8} {:>8}\n", k.tp, k.fp, k.fn_));
            }
        }
        s
    }
}
