//! Exact k-nearest-neighbour index maps over normalized event positions.
//!
//! Rows are ordered by squared Euclidean distance, ties broken by
//! [`NodeKey`]. Two search routes produce identical maps: an O(N²) scan and
//! a uniform-grid search with expanding cell shells.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::csr::Segments;
use crate::error::{GmnnError, Result};
use crate::graph::{dist2, EventGraph, NodeKey, Position};

/// Query batches smaller than this run on the calling thread.
const PAR_THRESHOLD: usize = 256;

/// `M_k`: for each query row, the `min(k, N)` nearest domain nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMap {
    k: usize,
    row_len: usize,
    n_rows: usize,
    domain_size: usize,
    entries: Vec<u32>,
}

impl IndexMap {
    /// Builds a map from explicit equal-length rows.
    pub fn from_rows(k: usize, rows: &[Vec<u32>], domain_size: usize) -> Result<Self> {
        let row_len = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != row_len) {
            return Err(GmnnError::shape("index map rows must have equal length"));
        }
        let entries: Vec<u32> = rows.iter().flatten().copied().collect();
        if let Some(&bad) = entries.iter().find(|&&j| j as usize >= domain_size) {
            return Err(GmnnError::Index {
                index: bad as usize,
                len: domain_size,
            });
        }
        Ok(IndexMap {
            k,
            row_len,
            n_rows: rows.len(),
            domain_size,
            entries,
        })
    }

    /// Requested neighbourhood size.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Stored neighbours per row, `k` clamped to the domain.
    pub fn row_len(&self) -> usize {
        self.row_len
    }

    pub fn rows(&self) -> usize {
        self.n_rows
    }

    pub fn domain_size(&self) -> usize {
        self.domain_size
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.entries[i * self.row_len..(i + 1) * self.row_len]
    }

    pub fn entries(&self) -> &[u32] {
        &self.entries
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[u32]> {
        (0..self.n_rows).map(move |i| self.row(i))
    }

    /// First `len` entries of every row.
    pub fn prefix(&self, k: usize) -> IndexMap {
        let len = k.min(self.row_len);
        let entries = self
            .iter_rows()
            .flat_map(|r| r[..len].iter().copied())
            .collect();
        IndexMap {
            k,
            row_len: len,
            n_rows: self.n_rows,
            domain_size: self.domain_size,
            entries,
        }
    }

    pub fn to_segments(&self) -> Segments {
        Segments::uniform(self.entries.clone(), self.row_len, self.n_rows)
    }
}

/// `M⁻¹`: for each domain node, the ascending list of query rows that
/// contain it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InverseIndexMap {
    lists: Segments,
}

impl InverseIndexMap {
    pub fn len(&self) -> usize {
        self.lists.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.rows() == 0
    }

    pub fn list(&self, j: usize) -> &[u32] {
        self.lists.row(j)
    }

    /// Σ_j |M⁻¹_j|.
    pub fn total(&self) -> usize {
        self.lists.nnz()
    }

    pub fn segments(&self) -> &Segments {
        &self.lists
    }

    /// Inverts again; the result holds, for each original query row, the
    /// ascending set of its members.
    pub fn invert(&self, query_count: usize) -> Result<InverseIndexMap> {
        Ok(InverseIndexMap {
            lists: self.lists.transpose(query_count)?,
        })
    }
}

pub fn invert_index_map(map: &IndexMap, domain_size: usize) -> Result<InverseIndexMap> {
    Ok(InverseIndexMap {
        lists: map.to_segments().transpose(domain_size)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KnnMethod {
    BruteForce,
    #[default]
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KnnOptions {
    pub method: KnnMethod,
    /// Keep the query node in its own row.
    pub include_self: bool,
}

impl Default for KnnOptions {
    fn default() -> Self {
        KnnOptions {
            method: KnnMethod::Grid,
            include_self: true,
        }
    }
}

/// Nodes a search runs over.
#[derive(Clone, Copy)]
pub struct Domain<'a> {
    pub positions: &'a [Position],
    pub keys: &'a [NodeKey],
}

impl<'a> From<&'a EventGraph> for Domain<'a> {
    fn from(g: &'a EventGraph) -> Self {
        Domain {
            positions: &g.positions,
            keys: &g.keys,
        }
    }
}

/// Self-kNN with the grid search.
pub fn knn(graph: &EventGraph, k: usize) -> Result<IndexMap> {
    knn_with(graph, k, KnnOptions::default())
}

/// Self-kNN with the O(N²) scan; the reference route.
pub fn knn_brute_force(graph: &EventGraph, k: usize) -> Result<IndexMap> {
    knn_with(
        graph,
        k,
        KnnOptions {
            method: KnnMethod::BruteForce,
            include_self: true,
        },
    )
}

pub fn knn_with(graph: &EventGraph, k: usize, opts: KnnOptions) -> Result<IndexMap> {
    if graph.is_empty() {
        return Err(GmnnError::EmptyGraph);
    }
    let queries: Vec<u32> = (0..graph.len() as u32).collect();
    search(graph.into(), &queries, k, opts)
}

/// Neighbours of each sampled node among all nodes of `full`. The sampled
/// node itself is always a candidate.
pub fn knn_cross(sampled: &[u32], full: &EventGraph, k: usize, method: KnnMethod) -> Result<IndexMap> {
    if full.is_empty() {
        return Err(GmnnError::EmptyGraph);
    }
    knn_cross_in(full.into(), sampled, k, method)
}

pub fn knn_cross_in(domain: Domain<'_>, sampled: &[u32], k: usize, method: KnnMethod) -> Result<IndexMap> {
    if let Some(&bad) = sampled.iter().find(|&&s| s as usize >= domain.positions.len()) {
        return Err(GmnnError::Index {
            index: bad as usize,
            len: domain.positions.len(),
        });
    }
    search(
        domain,
        sampled,
        k,
        KnnOptions {
            method,
            include_self: true,
        },
    )
}

/// Rows for the domain nodes listed in `queries`. With `include_self`
/// false, query `q` never lists itself.
pub fn search(domain: Domain<'_>, queries: &[u32], k: usize, opts: KnnOptions) -> Result<IndexMap> {
    if k == 0 {
        return Err(GmnnError::config("k must be >= 1"));
    }
    let n = domain.positions.len();
    if n == 0 {
        return Err(GmnnError::EmptyGraph);
    }
    let available = if opts.include_self { n } else { n - 1 };
    let row_len = k.min(available);
    let mut entries = vec![0u32; queries.len() * row_len];
    if row_len > 0 {
        let exclude = |q: u32| if opts.include_self { None } else { Some(q) };
        match opts.method {
            KnnMethod::BruteForce => fill_rows(&mut entries, row_len, queries, |q, out| {
                brute_row(domain, q, exclude(q), out)
            }),
            KnnMethod::Grid => {
                let grid = UniformGrid::build(domain.positions, row_len);
                fill_rows(&mut entries, row_len, queries, |q, out| {
                    grid.row(domain, q, exclude(q), out)
                })
            }
        }
    }
    Ok(IndexMap {
        k,
        row_len,
        n_rows: queries.len(),
        domain_size: n,
        entries,
    })
}

fn fill_rows<F>(entries: &mut [u32], row_len: usize, queries: &[u32], f: F)
where
    F: Fn(u32, &mut [u32]) + Sync,
{
    if queries.len() >= PAR_THRESHOLD {
        entries
            .par_chunks_mut(row_len)
            .zip(queries.par_iter())
            .for_each(|(out, &q)| f(q, out));
    } else {
        for (out, &q) in entries.chunks_mut(row_len).zip(queries) {
            f(q, out);
        }
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    d2: f64,
    key: NodeKey,
    idx: u32,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then_with(|| self.key.cmp(&other.key))
            .then_with(|| self.idx.cmp(&other.idx))
    }
}

fn brute_row(domain: Domain<'_>, q: u32, exclude: Option<u32>, out: &mut [u32]) {
    let p = &domain.positions[q as usize];
    let mut cands: Vec<Candidate> = domain
        .positions
        .iter()
        .zip(domain.keys)
        .enumerate()
        .filter(|&(j, _)| Some(j as u32) != exclude)
        .map(|(j, (pos, key))| Candidate {
            d2: dist2(p, pos),
            key: *key,
            idx: j as u32,
        })
        .collect();
    let k = out.len();
    if k < cands.len() {
        cands.select_nth_unstable(k - 1);
        cands.truncate(k);
    }
    cands.sort_unstable();
    for (o, c) in out.iter_mut().zip(&cands) {
        *o = c.idx;
    }
}

/// Cubic cells over the bounding box of the domain, points bucketed by cell.
struct UniformGrid {
    origin: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    cell_start: Vec<u32>,
    points: Vec<u32>,
    /// Positions in bucket order, next to `points`.
    cell_pos: Vec<Position>,
}

/// Slack on cell-face distances; absorbs rounding in cell assignment.
const FACE_SLACK: f64 = 1e-12;

impl UniformGrid {
    fn build(positions: &[Position], k: usize) -> Self {
        let n = positions.len();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent: Vec<f64> = (0..3).map(|a| hi[a] - lo[a]).collect();
        // Aim for roughly k/2 points per cell, measured over the non-flat axes.
        let per_cell = (k as f64 / 2.0).max(1.0);
        let cells_wanted = (n as f64 / per_cell).max(1.0);
        let active: Vec<f64> = extent.iter().copied().filter(|&e| e > 0.0).collect();
        let cell = if active.is_empty() {
            1.0
        } else {
            let measure: f64 = active.iter().product();
            (measure / cells_wanted).powf(1.0 / active.len() as f64)
        };
        let mut dims = [1usize; 3];
        for a in 0..3 {
            if extent[a] > 0.0 && cell > 0.0 {
                dims[a] = ((extent[a] / cell).floor() as usize + 1).clamp(1, 1024);
            }
        }
        let mut grid = UniformGrid {
            origin: lo,
            cell: if cell > 0.0 { cell } else { 1.0 },
            dims,
            cell_start: Vec::new(),
            points: Vec::new(),
            cell_pos: Vec::new(),
        };
        // Clamping dims can leave the far edge uncovered; stretch the cell.
        for a in 0..3 {
            if extent[a] >= grid.cell * dims[a] as f64 {
                grid.cell = extent[a] / dims[a] as f64 * (1.0 + 1e-9);
            }
        }

        let ncells = dims[0] * dims[1] * dims[2];
        let cells: Vec<usize> = positions.iter().map(|p| grid.flat(grid.coords(p))).collect();
        let mut counts = vec![0u32; ncells + 1];
        for &c in &cells {
            counts[c + 1] += 1;
        }
        for c in 0..ncells {
            counts[c + 1] += counts[c];
        }
        let mut cursor = counts.clone();
        let mut points = vec![0u32; n];
        for (i, &c) in cells.iter().enumerate() {
            points[cursor[c] as usize] = i as u32;
            cursor[c] += 1;
        }
        grid.cell_pos = points.iter().map(|&i| positions[i as usize]).collect();
        grid.cell_start = counts;
        grid.points = points;
        grid
    }

    fn coords(&self, p: &Position) -> [usize; 3] {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let v = ((p[a] - self.origin[a]) / self.cell).floor();
            c[a] = if v <= 0.0 {
                0
            } else {
                (v as usize).min(self.dims[a] - 1)
            };
        }
        c
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    /// Squared distance from coordinate `v` to slab `c` along axis `a`,
    /// shrunk by the slack so it never overestimates.
    fn gap2(&self, v: f64, c: usize, a: usize) -> f64 {
        let lo = self.origin[a] + c as f64 * self.cell;
        let g = (lo - v).max(v - (lo + self.cell)) - FACE_SLACK;
        if g > 0.0 {
            g * g
        } else {
            0.0
        }
    }

    fn row(&self, domain: Domain<'_>, q: u32, exclude: Option<u32>, out: &mut [u32]) {
        let k = out.len();
        let p = &domain.positions[q as usize];
        let centre = self.coords(p);
        // Best candidates so far, kept sorted.
        let mut best: Vec<Candidate> = Vec::with_capacity(k + 1);
        // Squared distance of the current k-th candidate once the buffer is
        // full. Anything strictly farther can be skipped; equal distances
        // still go through the key comparison.
        let mut worst = f64::INFINITY;
        let max_r = *self.dims.iter().max().unwrap();

        for r in 0..max_r {
            let lo: [usize; 3] = std::array::from_fn(|a| centre[a].saturating_sub(r));
            let hi: [usize; 3] = std::array::from_fn(|a| (centre[a] + r).min(self.dims[a] - 1));
            for cx in lo[0]..=hi[0] {
                let gx = self.gap2(p[0], cx, 0);
                if gx > worst {
                    continue;
                }
                let ex = cx.abs_diff(centre[0]) == r;
                for cy in lo[1]..=hi[1] {
                    let gxy = gx + self.gap2(p[1], cy, 1);
                    if gxy > worst {
                        continue;
                    }
                    let ey = ex || cy.abs_diff(centre[1]) == r;
                    for cz in lo[2]..=hi[2] {
                        // Interior cells were covered by earlier rings.
                        if !ey && cz.abs_diff(centre[2]) != r {
                            continue;
                        }
                        if gxy + self.gap2(p[2], cz, 2) > worst {
                            continue;
                        }
                        let c = self.flat([cx, cy, cz]);
                        let (s, e) = (self.cell_start[c] as usize, self.cell_start[c + 1] as usize);
                        for (&j, pos) in self.points[s..e].iter().zip(&self.cell_pos[s..e]) {
                            let d2 = dist2(p, pos);
                            if d2 > worst || Some(j) == exclude {
                                continue;
                            }
                            let cand = Candidate {
                                d2,
                                key: domain.keys[j as usize],
                                idx: j,
                            };
                            if best.len() == k && cand >= best[k - 1] {
                                continue;
                            }
                            let at = best.partition_point(|b| *b < cand);
                            best.insert(at, cand);
                            best.truncate(k);
                            if best.len() == k {
                                worst = best[k - 1].d2;
                            }
                        }
                    }
                }
            }

            // Distance from the query to the nearest face of the searched
            // block that still has unsearched cells behind it.
            let mut bound = f64::INFINITY;
            for a in 0..3 {
                if centre[a] > r {
                    let face = self.origin[a] + (centre[a] - r) as f64 * self.cell;
                    bound = bound.min((p[a] - face).max(0.0));
                }
                if centre[a] + r + 1 < self.dims[a] {
                    let face = self.origin[a] + (centre[a] + r + 1) as f64 * self.cell;
                    bound = bound.min((face - p[a]).max(0.0));
                }
            }
            if bound.is_infinite() {
                break;
            }
            let bound = bound - FACE_SLACK;
            if best.len() == k && bound > 0.0 && worst < bound * bound {
                break;
            }
        }

        for (o, c) in out.iter_mut().zip(&best) {
            *o = c.idx;
        }
    }
}

/// Index maps for several neighbourhood sizes; every smaller level is a
/// row-prefix of the largest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnPyramid {
    levels: Vec<IndexMap>,
}

impl KnnPyramid {
    /// Splits one map computed at the largest size into prefix levels.
    pub fn from_largest(largest: &IndexMap, k_set: &[usize]) -> Result<Self> {
        validate_k_set(k_set)?;
        if *k_set.last().unwrap() != largest.k() {
            return Err(GmnnError::config("largest pyramid level must match the map's k"));
        }
        Ok(KnnPyramid {
            levels: k_set.iter().map(|&k| largest.prefix(k)).collect(),
        })
    }

    pub fn levels(&self) -> &[IndexMap] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> &IndexMap {
        &self.levels[i]
    }

    pub fn largest(&self) -> &IndexMap {
        self.levels.last().expect("pyramid has at least one level")
    }

    pub fn k_set(&self) -> Vec<usize> {
        self.levels.iter().map(IndexMap::k).collect()
    }
}

pub fn validate_k_set(k_set: &[usize]) -> Result<()> {
    if k_set.is_empty() {
        return Err(GmnnError::config("k set must not be empty"));
    }
    if k_set[0] == 0 {
        return Err(GmnnError::config("k must be >= 1"));
    }
    if k_set.windows(2).any(|w| w[0] >= w[1]) {
        return Err(GmnnError::config(format!(
            "k set must be strictly increasing, got {k_set:?}"
        )));
    }
    Ok(())
}

/// One sorted search per query at the largest k; smaller levels are
/// prefixes.
pub fn knn_pyramid(graph: &EventGraph, k_set: &[usize]) -> Result<KnnPyramid> {
    knn_pyramid_with(graph, k_set, KnnOptions::default())
}

pub fn knn_pyramid_with(graph: &EventGraph, k_set: &[usize], opts: KnnOptions) -> Result<KnnPyramid> {
    validate_k_set(k_set)?;
    let largest = knn_with(graph, *k_set.last().unwrap(), opts)?;
    KnnPyramid::from_largest(&largest, k_set)
}
