//! Index structures a forward pass needs, computed once per graph.
//!
//! Everything here depends only on node positions, so training builds it
//! once per window and reuses it every iteration. Structures of several
//! graphs concatenate into one block-diagonal structure for batched passes.

use std::sync::Arc;

use crate::csr::Segments;
use crate::error::{GmnnError, Result};
use crate::fps::{farthest_point_sample_in, reduced_count};
use crate::graph::{dist2, EventGraph, NodeKey, Position};
use crate::knn::{knn_cross_in, search, Domain, IndexMap, KnnMethod, KnnOptions};
use crate::tensor::{Matrix, Scalar};

use super::ModelConfig;

/// Variable-length neighbour lists from query nodes into a domain, with
/// the relative positions `e_query - e_neighbour` of every pair.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborMap {
    pub segments: Arc<Segments>,
    pub gather: Arc<Vec<u32>>,
    pub rel: Arc<Matrix>,
    pub domain_size: usize,
    /// Rows that were empty and received the nearest domain node instead.
    pub fallback_rows: usize,
}

impl NeighborMap {
    pub fn new(
        segments: Segments,
        queries: &[Position],
        domain: &[Position],
        fallback_rows: usize,
    ) -> Result<Self> {
        if segments.rows() != queries.len() {
            return Err(GmnnError::shape("neighbour lists do not match query count"));
        }
        if let Some(j) = segments.max_index() {
            if j as usize >= domain.len() {
                return Err(GmnnError::Index {
                    index: j as usize,
                    len: domain.len(),
                });
            }
        }
        let mut rel = Vec::with_capacity(segments.nnz() * 3);
        for (i, q) in queries.iter().enumerate() {
            for &j in segments.row(i) {
                let d = &domain[j as usize];
                rel.extend((0..3).map(|a| (q[a] - d[a]) as Scalar));
            }
        }
        let rel = Matrix::from_vec(segments.nnz(), 3, rel)?;
        Ok(NeighborMap {
            gather: Arc::new(segments.indices().to_vec()),
            segments: Arc::new(segments),
            rel: Arc::new(rel),
            domain_size: domain.len(),
            fallback_rows,
        })
    }

    pub fn from_index_map(map: &IndexMap, queries: &[Position], domain: &[Position]) -> Result<Self> {
        NeighborMap::new(map.to_segments(), queries, domain, 0)
    }

    pub fn queries(&self) -> usize {
        self.segments.rows()
    }

    fn concat(parts: &[&NeighborMap]) -> NeighborMap {
        let mut shifts = Vec::with_capacity(parts.len());
        let mut acc = 0u32;
        for p in parts {
            shifts.push(acc);
            acc += p.domain_size as u32;
        }
        let segs: Vec<&Segments> = parts.iter().map(|p| p.segments.as_ref()).collect();
        let segments = Segments::concat(&segs, &shifts);
        let rels: Vec<&Matrix> = parts.iter().map(|p| p.rel.as_ref()).collect();
        NeighborMap {
            gather: Arc::new(segments.indices().to_vec()),
            segments: Arc::new(segments),
            rel: Arc::new(Matrix::vstack(&rels).expect("relative positions are 3 wide")),
            domain_size: acc as usize,
            fallback_rows: parts.iter().map(|p| p.fallback_rows).sum(),
        }
    }
}

/// For each node, the queries whose neighbourhood contains it, ordered by
/// query key. Rows of nodes contained nowhere carry mask 0.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseLists {
    pub segments: Arc<Segments>,
    pub gather: Arc<Vec<u32>>,
    pub mask: Arc<Vec<Scalar>>,
    pub empty_rows: usize,
}

impl InverseLists {
    fn new(segments: Segments) -> Self {
        let mask: Vec<Scalar> = (0..segments.rows())
            .map(|j| if segments.row(j).is_empty() { 0.0 } else { 1.0 })
            .collect();
        let empty_rows = mask.iter().filter(|&&m| m == 0.0).count();
        InverseLists {
            gather: Arc::new(segments.indices().to_vec()),
            segments: Arc::new(segments),
            mask: Arc::new(mask),
            empty_rows,
        }
    }

    fn concat(parts: &[&InverseLists], query_counts: &[usize]) -> InverseLists {
        let mut shifts = Vec::with_capacity(parts.len());
        let mut acc = 0u32;
        for &q in query_counts {
            shifts.push(acc);
            acc += q as u32;
        }
        let segs: Vec<&Segments> = parts.iter().map(|p| p.segments.as_ref()).collect();
        InverseLists::new(Segments::concat(&segs, &shifts))
    }
}

/// Per-level maps of one graph, or of a batch of graphs laid out
/// block-diagonally.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphStructure {
    /// Level-0 positions as an `N x 3` feature matrix.
    pub input: Arc<Matrix>,
    /// Node count per level, finest first.
    pub node_counts: Vec<usize>,
    pub positions: Vec<Vec<Position>>,
    pub keys: Vec<Vec<NodeKey>>,
    /// `[level][k]`: self neighbourhoods for mixer blocks.
    pub mixer_maps: Vec<Vec<NeighborMap>>,
    /// `[level]`: inverse of the largest self neighbourhood.
    pub inter: Vec<InverseLists>,
    /// `[transition][k]`: sampled nodes into their parent level.
    pub down_maps: Vec<Vec<NeighborMap>>,
    /// `[transition][k]`: parent nodes into the sampled level.
    pub up_maps: Vec<Vec<NeighborMap>>,
    /// `[transition]`: parent-level index of every sampled node.
    pub sampled: Vec<Vec<u32>>,
    /// Level-0 row range of each member graph.
    pub graph_offsets: Vec<usize>,
}

impl GraphStructure {
    pub fn build(graph: &EventGraph, config: &ModelConfig) -> Result<Self> {
        GraphStructure::build_with(graph, config, KnnMethod::Grid)
    }

    pub fn build_with(graph: &EventGraph, config: &ModelConfig, method: KnnMethod) -> Result<Self> {
        config.validate()?;
        if graph.is_empty() {
            return Err(GmnnError::EmptyGraph);
        }
        let stages = config.stages();
        let k_max = *config.k_set.iter().max().expect("validated k_set");
        let opts = KnnOptions {
            method,
            include_self: true,
        };

        let mut positions = vec![graph.positions.clone()];
        let mut keys = vec![graph.keys.clone()];
        let mut mixer_maps = Vec::with_capacity(stages + 1);
        let mut inter = Vec::with_capacity(stages + 1);
        let mut down_maps = Vec::with_capacity(stages);
        let mut up_maps = Vec::with_capacity(stages);
        let mut sampled_all = Vec::with_capacity(stages);

        for level in 0..=stages {
            let pos = &positions[level];
            let key = &keys[level];
            let n = pos.len();
            let domain = Domain {
                positions: pos,
                keys: key,
            };
            let all: Vec<u32> = (0..n as u32).collect();
            let largest = search(domain, &all, k_max, opts)?;
            let mut maps = Vec::with_capacity(config.k_set.len());
            for &k in &config.k_set {
                maps.push(NeighborMap::from_index_map(&largest.prefix(k), pos, pos)?);
            }
            mixer_maps.push(maps);
            inter.push(InverseLists::new(inverse_by_key(&largest, key)?));

            if level == stages {
                break;
            }
            let m = reduced_count(n, config.reduction);
            let sampled = farthest_point_sample_in(domain, m)?;
            let s_pos: Vec<Position> = sampled.iter().map(|&i| pos[i as usize]).collect();
            let s_key: Vec<NodeKey> = sampled.iter().map(|&i| key[i as usize]).collect();
            let down_largest = knn_cross_in(domain, &sampled, k_max, method)?;
            let mut downs = Vec::with_capacity(config.k_set.len());
            let mut ups = Vec::with_capacity(config.k_set.len());
            for &k in &config.k_set {
                let down = down_largest.prefix(k);
                downs.push(NeighborMap::from_index_map(&down, &s_pos, pos)?);
                let (lists, fallback) = up_lists(&down, &s_key, pos, key, &s_pos)?;
                ups.push(NeighborMap::new(lists, pos, &s_pos, fallback)?);
            }
            down_maps.push(downs);
            up_maps.push(ups);
            sampled_all.push(sampled);
            positions.push(s_pos);
            keys.push(s_key);
        }

        let input: Vec<Scalar> = graph
            .positions
            .iter()
            .flat_map(|p| p.iter().map(|&c| c as Scalar))
            .collect();
        Ok(GraphStructure {
            input: Arc::new(Matrix::from_vec(graph.len(), 3, input)?),
            node_counts: positions.iter().map(Vec::len).collect(),
            positions,
            keys,
            mixer_maps,
            inter,
            down_maps,
            up_maps,
            sampled: sampled_all,
            graph_offsets: vec![0, graph.len()],
        })
    }

    pub fn levels(&self) -> usize {
        self.node_counts.len()
    }

    pub fn graph_count(&self) -> usize {
        self.graph_offsets.len() - 1
    }

    /// Block-diagonal union: node `i` of member `b` at level `l` becomes
    /// node `offset_b(l) + i`.
    pub fn merge(parts: &[&GraphStructure]) -> Result<GraphStructure> {
        let first = parts
            .first()
            .ok_or_else(|| GmnnError::config("cannot merge zero graph structures"))?;
        let levels = first.levels();
        let ks = first.mixer_maps[0].len();
        if parts
            .iter()
            .any(|p| p.levels() != levels || p.mixer_maps[0].len() != ks)
        {
            return Err(GmnnError::Structural(
                "merged structures differ in depth or k levels".into(),
            ));
        }
        let counts = |l: usize| -> Vec<usize> { parts.iter().map(|p| p.node_counts[l]).collect() };

        let inputs: Vec<&Matrix> = parts.iter().map(|p| p.input.as_ref()).collect();
        let positions = (0..levels)
            .map(|l| parts.iter().flat_map(|p| p.positions[l].iter().copied()).collect())
            .collect();
        let keys = (0..levels)
            .map(|l| parts.iter().flat_map(|p| p.keys[l].iter().copied()).collect())
            .collect();
        let merge_maps = |pick: &dyn Fn(&GraphStructure) -> &Vec<Vec<NeighborMap>>, slot: usize| {
            (0..ks)
                .map(|k| {
                    let members: Vec<&NeighborMap> = parts.iter().map(|p| &pick(p)[slot][k]).collect();
                    NeighborMap::concat(&members)
                })
                .collect::<Vec<_>>()
        };
        let mixer_maps = (0..levels).map(|l| merge_maps(&|p| &p.mixer_maps, l)).collect();
        let down_maps = (0..levels - 1).map(|t| merge_maps(&|p| &p.down_maps, t)).collect();
        let up_maps = (0..levels - 1).map(|t| merge_maps(&|p| &p.up_maps, t)).collect();
        let inter = (0..levels)
            .map(|l| {
                let members: Vec<&InverseLists> = parts.iter().map(|p| &p.inter[l]).collect();
                InverseLists::concat(&members, &counts(l))
            })
            .collect();
        let sampled = (0..levels - 1)
            .map(|t| {
                let mut out = Vec::new();
                let mut shift = 0u32;
                for p in parts {
                    out.extend(p.sampled[t].iter().map(|&i| i + shift));
                    shift += p.node_counts[t] as u32;
                }
                out
            })
            .collect();
        let mut graph_offsets = vec![0];
        for p in parts {
            let base = *graph_offsets.last().unwrap();
            graph_offsets.extend(p.graph_offsets[1..].iter().map(|&o| o + base));
        }
        Ok(GraphStructure {
            input: Arc::new(Matrix::vstack(&inputs)?),
            node_counts: (0..levels).map(|l| counts(l).iter().sum()).collect(),
            positions,
            keys,
            mixer_maps,
            inter,
            down_maps,
            up_maps,
            sampled,
            graph_offsets,
        })
    }
}

/// Inverse lists of `map`, each sorted by the key of the query node so the
/// order survives any relabelling of nodes.
fn inverse_by_key(map: &IndexMap, query_keys: &[NodeKey]) -> Result<Segments> {
    let t = map.to_segments().transpose(map.domain_size())?;
    let mut rows: Vec<Vec<u32>> = (0..t.rows()).map(|j| t.row(j).to_vec()).collect();
    for r in &mut rows {
        r.sort_by_key(|&i| query_keys[i as usize]);
    }
    Ok(Segments::from_rows(&rows))
}

/// Upsampling lists: parent node `j` lists every sampled node whose down
/// neighbourhood contains it. Uncovered parents fall back to their nearest
/// sampled node.
fn up_lists(
    down: &IndexMap,
    sampled_keys: &[NodeKey],
    parent_pos: &[Position],
    parent_keys: &[NodeKey],
    sampled_pos: &[Position],
) -> Result<(Segments, usize)> {
    let inv = inverse_by_key(down, sampled_keys)?;
    let mut fallback = 0;
    let rows: Vec<Vec<u32>> = (0..inv.rows())
        .map(|j| {
            let row = inv.row(j);
            if !row.is_empty() {
                return row.to_vec();
            }
            fallback += 1;
            let p = &parent_pos[j];
            let best = (0..sampled_pos.len())
                .min_by(|&a, &b| {
                    dist2(p, &sampled_pos[a])
                        .total_cmp(&dist2(p, &sampled_pos[b]))
                        .then(sampled_keys[a].cmp(&sampled_keys[b]))
                })
                .expect("sampled level is non-empty");
            vec![best as u32]
        })
        .collect();
    debug_assert_eq!(rows.len(), parent_keys.len());
    Ok((Segments::from_rows(&rows), fallback))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_graph(n: usize, seed: u64) -> EventGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EventGraph::from_positions((0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect())
            .unwrap()
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            widths: vec![4, 4, 4, 4],
            k_set: vec![2, 4, 6, 8],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn counts_follow_ceil_chain() {
        for n in [1, 3, 37, 256] {
            let s = GraphStructure::build(&random_graph(n, n as u64), &small_config()).unwrap();
            assert_eq!(s.node_counts, super::super::node_count_chain(n, 4, 4));
            for (t, ups) in s.up_maps.iter().enumerate() {
                for up in ups {
                    assert_eq!(up.queries(), s.node_counts[t]);
                    // Every parent node reaches at least one sampled node.
                    assert!((0..up.queries()).all(|j| !up.segments.row(j).is_empty()));
                }
            }
        }
    }

    #[test]
    fn sampled_nodes_cover_down_rows() {
        let s = GraphStructure::build(&random_graph(50, 3), &small_config()).unwrap();
        for downs in &s.down_maps {
            for d in downs {
                assert!((0..d.queries()).all(|i| !d.segments.row(i).is_empty()));
            }
        }
        // A sampled node lists itself first in its down neighbourhood.
        let d = &s.down_maps[0][0];
        for (i, &p) in s.sampled[0].iter().enumerate() {
            assert_eq!(d.segments.row(i)[0], p);
        }
    }

    #[test]
    fn merge_is_block_diagonal() {
        let cfg = small_config();
        let a = GraphStructure::build(&random_graph(20, 1), &cfg).unwrap();
        let b = GraphStructure::build(&random_graph(9, 2), &cfg).unwrap();
        let m = GraphStructure::merge(&[&a, &b]).unwrap();
        assert_eq!(m.graph_offsets, vec![0, 20, 29]);
        for l in 0..m.levels() {
            assert_eq!(m.node_counts[l], a.node_counts[l] + b.node_counts[l]);
        }
        let up = &m.up_maps[0][3];
        let shift = a.node_counts[1] as u32;
        assert_eq!(
            up.segments.row(20),
            b.up_maps[0][3]
                .segments
                .row(0)
                .iter()
                .map(|&i| i + shift)
                .collect::<Vec<_>>()
        );
    }
}
