//! Normalized spatiotemporal event graphs.

use std::fmt::Write as _;

use crate::error::{GmnnError, Result};
use crate::event::{ClassId, EventWindow, SensorGeometry};
use crate::knn::KnnPyramid;

/// Position of a node in the unit cube: `[x / X, y / Y, (t - t0) / T]`.
pub type Position = [f64; 3];

/// Total order used to break distance ties: timestamp, column, row, then
/// ingestion index. It travels with the node through permutations and
/// subsampling, which keeps every index structure permutation-stable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct NodeKey {
    pub t: u64,
    pub x: u32,
    pub y: u32,
    pub seq: u64,
}

impl NodeKey {
    /// Key that orders purely by index, for graphs built from raw positions.
    pub fn from_index(i: usize) -> Self {
        NodeKey {
            seq: i as u64,
            ..NodeKey::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventGraph {
    pub positions: Vec<Position>,
    pub keys: Vec<NodeKey>,
    pub labels: Option<Vec<ClassId>>,
    /// Start of the originating window (µs).
    pub t0: u64,
    /// Stream index of the window's first retained event.
    pub start_index: usize,
}

impl EventGraph {
    /// Graph over arbitrary positions; ties break by node index.
    pub fn from_positions(positions: Vec<Position>) -> Result<Self> {
        if positions.is_empty() {
            return Err(GmnnError::EmptyGraph);
        }
        if positions
            .iter()
            .flatten()
            .any(|c| !c.is_finite() || !(0.0..=1.0).contains(c))
        {
            return Err(GmnnError::config("graph positions must lie in [0, 1]"));
        }
        let keys = (0..positions.len()).map(NodeKey::from_index).collect();
        Ok(EventGraph {
            positions,
            keys,
            labels: None,
            t0: 0,
            start_index: 0,
        })
    }

    pub fn with_labels(mut self, labels: Vec<ClassId>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(GmnnError::shape(format!(
                "{} labels for {} nodes",
                labels.len(),
                self.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Node `i` of the result is node `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> EventGraph {
        EventGraph {
            positions: perm.iter().map(|&i| self.positions[i]).collect(),
            keys: perm.iter().map(|&i| self.keys[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| perm.iter().map(|&i| l[i]).collect()),
            t0: self.t0,
            start_index: self.start_index,
        }
    }

    /// Text dump: one `i,xn,yn,tn,label` line per node, then one
    /// `M k i: j1 j2 ...` line per pyramid row.
    pub fn dump(&self, pyramid: Option<&KnnPyramid>) -> String {
        let mut out = String::new();
        for (i, p) in self.positions.iter().enumerate() {
            let label = self
                .labels
                .as_ref()
                .map_or_else(|| "-".to_string(), |l| l[i].to_string());
            let _ = writeln!(out, "{i},{},{},{},{label}", p[0], p[1], p[2]);
        }
        if let Some(pyr) = pyramid {
            for level in pyr.levels() {
                for i in 0..level.rows() {
                    let _ = write!(out, "M {} {i}:", level.k());
                    for j in level.row(i) {
                        let _ = write!(out, " {j}");
                    }
                    out.push('\n');
                }
            }
        }
        out
    }
}

/// Normalizes a window into graph coordinates.
pub fn build_graph(window: &EventWindow, geometry: SensorGeometry) -> Result<EventGraph> {
    if window.is_empty() {
        return Err(GmnnError::EmptyGraph);
    }
    if window.duration == 0 {
        return Err(GmnnError::config("window duration must be > 0"));
    }
    let (w, h, d) = (
        geometry.width as f64,
        geometry.height as f64,
        window.duration as f64,
    );
    let mut positions = Vec::with_capacity(window.len());
    let mut keys = Vec::with_capacity(window.len());
    for (i, e) in window.events.iter().enumerate() {
        if e.x >= geometry.width || e.y >= geometry.height {
            return Err(GmnnError::Bounds {
                line: i + 1,
                x: e.x as i64,
                y: e.y as i64,
                width: geometry.width,
                height: geometry.height,
            });
        }
        if e.t < window.t0 || e.t - window.t0 >= window.duration {
            return Err(GmnnError::Structural(format!(
                "event {i} at t={} outside window [{}, {})",
                e.t,
                window.t0,
                window.t0 + window.duration
            )));
        }
        let dt = e.t - window.t0;
        positions.push([e.x as f64 / w, e.y as f64 / h, dt as f64 / d]);
        keys.push(NodeKey {
            t: dt,
            x: e.x,
            y: e.y,
            seq: (window.start_index + i) as u64,
        });
    }
    let labels = if window.is_labeled() {
        Some(window.events.iter().map(|e| e.label.unwrap()).collect())
    } else {
        None
    };
    Ok(EventGraph {
        positions,
        keys,
        labels,
        t0: window.t0,
        start_index: window.start_index,
    })
}

#[inline]
pub(crate) fn dist2(a: &Position, b: &Position) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}
