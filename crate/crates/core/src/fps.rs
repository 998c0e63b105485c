//! Greedy farthest point sampling.

use crate::error::{GmnnError, Result};
use crate::graph::{dist2, EventGraph, NodeKey, Position};
use crate::knn::Domain;

/// Picks `m` nodes: first the node nearest the centroid, then repeatedly
/// the node whose distance to the chosen set is largest. Ties go to the
/// smaller [`NodeKey`].
pub fn farthest_point_sample(graph: &EventGraph, m: usize) -> Result<Vec<u32>> {
    farthest_point_sample_in(graph.into(), m)
}

pub fn farthest_point_sample_in(domain: Domain<'_>, m: usize) -> Result<Vec<u32>> {
    let n = domain.positions.len();
    if n == 0 {
        return Err(GmnnError::EmptyGraph);
    }
    if m == 0 || m > n {
        return Err(GmnnError::config(format!(
            "cannot sample {m} of {n} nodes"
        )));
    }

    let start = centroid_nearest(domain);
    let mut chosen = Vec::with_capacity(m);
    chosen.push(start as u32);
    let mut min_d2: Vec<f64> = domain
        .positions
        .iter()
        .map(|p| dist2(p, &domain.positions[start]))
        .collect();
    // Chosen nodes drop out of the running even when duplicates leave
    // every distance at zero.
    min_d2[start] = f64::NEG_INFINITY;

    while chosen.len() < m {
        let mut best = usize::MAX;
        for j in 0..n {
            if best == usize::MAX
                || min_d2[j] > min_d2[best]
                || (min_d2[j] == min_d2[best] && domain.keys[j] < domain.keys[best])
            {
                best = j;
            }
        }
        chosen.push(best as u32);
        min_d2[best] = f64::NEG_INFINITY;
        let pb = domain.positions[best];
        for (d, p) in min_d2.iter_mut().zip(domain.positions) {
            let nd = dist2(p, &pb);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(chosen)
}

/// Node closest to the mean position. The mean is accumulated in key order
/// so it does not depend on storage order.
pub fn centroid_nearest(domain: Domain<'_>) -> usize {
    let n = domain.positions.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by_key(|&i| domain.keys[i]);
    let mut sum = [0.0f64; 3];
    for &i in &order {
        for (s, c) in sum.iter_mut().zip(&domain.positions[i]) {
            *s += c;
        }
    }
    let centroid: Position = sum.map(|s| s / n as f64);
    let mut best = 0;
    let mut best_key: (f64, NodeKey) = (f64::INFINITY, NodeKey::default());
    for i in 0..n {
        let d = dist2(&domain.positions[i], &centroid);
        if d < best_key.0 || (d == best_key.0 && domain.keys[i] < best_key.1) {
            best = i;
            best_key = (d, domain.keys[i]);
        }
    }
    best
}

/// `ceil(n / factor)`, the node count after one reduction.
pub fn reduced_count(n: usize, factor: usize) -> usize {
    n.div_ceil(factor.max(1))
}
