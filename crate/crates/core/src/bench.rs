//! Inference timing in sequential and batch mode.
//!
//! Sequential mode builds and runs one graph at a time. Batch mode builds
//! every graph's structure, merges them and runs a single forward pass.
//! Both include structure construction, so they do the same arithmetic.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GmnnError, Result};
use crate::event::WindowSpec;
use crate::graph::EventGraph;
use crate::model::{GraphStructure, ModelParams};
use crate::synth::{scene_graphs, SceneConfig};

/// Batch mode may be this much slower per graph and still count as not
/// slower.
pub const BATCH_SLACK: f64 = 1.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub graphs: usize,
    pub mean_events: f64,
    pub repetitions: usize,
    /// Wall-clock seconds for all graphs, per repetition.
    pub sequential_mean_s: f64,
    pub sequential_std_s: f64,
    pub batch_mean_s: f64,
    pub batch_std_s: f64,
    pub sequential_per_graph_s: f64,
    pub batch_per_graph_s: f64,
    /// `batch_per_graph <= BATCH_SLACK · sequential_per_graph`.
    pub batch_within_slack: bool,
}

impl BenchReport {
    pub fn render(&self) -> String {
        format!(
            "graphs {} (mean {:.1} events), {} repetitions\nsequential {:.6} ± {:.6} s ({:.6} s/graph)\nbatch      {:.6} ± {:.6} s ({:.6} s/graph)\nbatch within {:.0}% of sequential: {}\n",
            self.graphs,
            self.mean_events,
            self.repetitions,
            self.sequential_mean_s,
            self.sequential_std_s,
            self.sequential_per_graph_s,
            self.batch_mean_s,
            self.batch_std_s,
            self.batch_per_graph_s,
            (BATCH_SLACK - 1.0) * 100.0,
            self.batch_within_slack
        )
    }
}

/// The first `count` non-empty windows of `window_us` from the scene.
pub fn bench_graphs(scene: &SceneConfig, seed: u64, count: usize, window_us: u64) -> Result<Vec<EventGraph>> {
    let needed = window_us * count as u64;
    let scene = SceneConfig {
        duration_us: scene.duration_us.max(needed),
        ..scene.clone()
    };
    let mut graphs = scene_graphs(&scene, seed, WindowSpec::tumbling(window_us, 10_000))?;
    if graphs.len() < count {
        return Err(GmnnError::config(format!(
            "scene yields {} non-empty windows, {count} requested",
            graphs.len()
        )));
    }
    graphs.truncate(count);
    Ok(graphs)
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn run_sequential(model: &ModelParams, graphs: &[EventGraph]) -> Result<()> {
    for g in graphs {
        let st = GraphStructure::build(g, &model.config)?;
        std::hint::black_box(model.predict(&st)?);
    }
    Ok(())
}

fn run_batch(model: &ModelParams, graphs: &[EventGraph]) -> Result<()> {
    let structures: Vec<GraphStructure> = graphs
        .par_iter()
        .map(|g| GraphStructure::build(g, &model.config))
        .collect::<Result<_>>()?;
    let refs: Vec<&GraphStructure> = structures.iter().collect();
    let merged = GraphStructure::merge(&refs)?;
    std::hint::black_box(model.predict(&merged)?);
    Ok(())
}

/// Times both modes over `repetitions` runs after one warm-up run each.
/// Sequential runs stay on the calling thread; batch runs may use the
/// current rayon pool.
pub fn bench_timing(model: &ModelParams, graphs: &[EventGraph], repetitions: usize) -> Result<BenchReport> {
    if graphs.is_empty() || repetitions == 0 {
        return Err(GmnnError::config("benchmark needs graphs and repetitions"));
    }
    run_sequential(model, graphs)?;
    run_batch(model, graphs)?;
    let mut seq = Vec::with_capacity(repetitions);
    let mut bat = Vec::with_capacity(repetitions);
    // Interleaved so drift in machine load hits both modes alike.
    for _ in 0..repetitions {
        let t = Instant::now();
        run_sequential(model, graphs)?;
        seq.push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        run_batch(model, graphs)?;
        bat.push(t.elapsed().as_secs_f64());
    }
    let (sm, ss) = mean_std(&seq);
    let (bm, bs) = mean_std(&bat);
    let n = graphs.len() as f64;
    Ok(BenchReport {
        graphs: graphs.len(),
        mean_events: graphs.iter().map(EventGraph::len).sum::<usize>() as f64 / n,
        repetitions,
        sequential_mean_s: sm,
        sequential_std_s: ss,
        batch_mean_s: bm,
        batch_std_s: bs,
        sequential_per_graph_s: sm / n,
        batch_per_graph_s: bm / n,
        batch_within_slack: bm / n <= BATCH_SLACK * sm / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }
}
