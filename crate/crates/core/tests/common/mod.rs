//! Reference implementations written directly from the definitions, with
//! plain loops and no shared code paths beyond parameter storage.

#![allow(dead_code)]

pub mod grad;

use gmnn_core::event::ClassId;
use gmnn_core::graph::{EventGraph, NodeKey, Position};
use gmnn_core::model::{CcmParams, MixerParams, ModelParams};
use gmnn_core::nn::{Activation, Linear, MlpParams, ParamStore};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rows = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_graph(rng: &mut impl Rng, n: usize) -> EventGraph {
    EventGraph::from_positions((0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()).unwrap()
}

/// Positions on a coarse lattice, so distance ties are common.
pub fn lattice_graph(rng: &mut impl Rng, n: usize, steps: u32) -> EventGraph {
    let s = steps as f64;
    let mut coord = || rng.random_range(0..=steps) as f64 / s;
    EventGraph::from_positions((0..n).map(|_| [coord(), coord(), coord()]).collect()).unwrap()
}

/// Mostly continuous graphs, every fourth one on a lattice.
pub fn mixed_graph(rng: &mut impl Rng, n: usize, i: usize) -> EventGraph {
    if i % 4 == 3 {
        lattice_graph(rng, n, 4)
    } else {
        random_graph(rng, n)
    }
}

pub fn permutation(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

pub fn sq_dist(a: &Position, b: &Position) -> f64 {
    (a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2])
}

/// The `min(k, n)` domain nodes nearest each query, by distance then key.
pub fn oracle_knn(pos: &[Position], keys: &[NodeKey], queries: &[Position], k: usize) -> Vec<Vec<u32>> {
    let take = k.min(pos.len());
    queries
        .iter()
        .map(|q| {
            let mut c: Vec<(f64, NodeKey, u32)> =
                pos.iter().enumerate().map(|(j, p)| (sq_dist(q, p), keys[j], j as u32)).collect();
            let order = |a: &(f64, NodeKey, u32), b: &(f64, NodeKey, u32)| {
                a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
            };
            if take < c.len() {
                c.select_nth_unstable_by(take, order);
                c.truncate(take);
            }
            c.sort_by(order);
            c.into_iter().map(|e| e.2).collect()
        })
        .collect()
}

/// Greedy farthest point sampling, recomputing every candidate's distance
/// to the whole chosen set at each step.
pub fn oracle_fps(pos: &[Position], keys: &[NodeKey], m: usize) -> Vec<u32> {
    let n = pos.len();
    let mut by_key: Vec<usize> = (0..n).collect();
    by_key.sort_by_key(|&i| keys[i]);
    let mut c = [0.0; 3];
    for &i in &by_key {
        c[0] += pos[i][0];
        c[1] += pos[i][1];
        c[2] += pos[i][2];
    }
    let c = [c[0] / n as f64, c[1] / n as f64, c[2] / n as f64];
    let mut start = 0;
    for i in 1..n {
        let (di, ds) = (sq_dist(&pos[i], &c), sq_dist(&pos[start], &c));
        if di < ds || (di == ds && keys[i] < keys[start]) {
            start = i;
        }
    }
    let mut chosen = vec![start];
    while chosen.len() < m {
        let mut best: Option<(f64, usize)> = None;
        for cand in 0..n {
            if chosen.contains(&cand) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|&s| sq_dist(&pos[cand], &pos[s]))
                .fold(f64::INFINITY, f64::min);
            let better = match best {
                None => true,
                Some((bd, b)) => d > bd || (d == bd && keys[cand] < keys[b]),
            };
            if better {
                best = Some((d, cand));
            }
        }
        chosen.push(best.unwrap().1);
    }
    chosen.into_iter().map(|i| i as u32).collect()
}

pub fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Identity => x,
        Activation::Relu => {
            if x > 0.0 {
                x
            } else {
                0.0
            }
        }
        Activation::Tanh => x.tanh(),
        Activation::Silu => x / (1.0 + (-x).exp()),
    }
}

pub fn linear(store: &ParamStore, l: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.get(l.weight);
    let b = store.get(l.bias);
    assert_eq!(x.len(), w.rows());
    (0..w.cols())
        .map(|o| {
            let mut s = b[(0, o)];
            for (i, xi) in x.iter().enumerate() {
                s += xi * w[(i, o)];
            }
            s
        })
        .collect()
}

pub fn mlp(store: &ParamStore, m: &MlpParams, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (i, l) in m.layers.iter().enumerate() {
        let a = if i + 1 == m.layers.len() { m.output } else { m.hidden };
        h = linear(store, l, &h).into_iter().map(|v| act(a, v)).collect();
    }
    h
}

/// Scores every neighbour from `[g1(x_j); delta(e_i - e_j)]`, normalizes
/// them over the neighbourhood and sums `g3(x_j)`; levels are added with
/// the block's weights. `lists[level][i]` are the neighbours of query `i`.
pub fn oracle_ccm(
    store: &ParamStore,
    p: &CcmParams,
    x: &Rows,
    qpos: &[Position],
    dpos: &[Position],
    lists: &[Vec<Vec<u32>>],
) -> Rows {
    let mut out = vec![vec![0.0; p.out_dim]; qpos.len()];
    for (level, lp) in p.levels.iter().enumerate() {
        for i in 0..qpos.len() {
            let nb = &lists[level][i];
            let scores: Vec<Vec<f64>> = nb
                .iter()
                .map(|&j| {
                    let j = j as usize;
                    let rel = [qpos[i][0] - dpos[j][0], qpos[i][1] - dpos[j][1], qpos[i][2] - dpos[j][2]];
                    let mut cat = mlp(store, &lp.g1, &x[j]);
                    cat.extend(mlp(store, &lp.delta, &rel));
                    mlp(store, &lp.g2, &cat)
                })
                .collect();
            let width = scores[0].len();
            let mut alpha = vec![vec![0.0; width]; nb.len()];
            for c in 0..width {
                let m = scores.iter().map(|s| s[c]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s[c] - m).exp()).sum();
                for (a, s) in alpha.iter_mut().zip(&scores) {
                    a[c] = (s[c] - m).exp() / z;
                }
            }
            let mut u = vec![0.0; p.out_dim];
            for (a, &j) in alpha.iter().zip(nb) {
                let v = mlp(store, &lp.g3, &x[j as usize]);
                for c in 0..p.out_dim {
                    u[c] += a[if width == 1 { 0 } else { c }] * v[c];
                }
            }
            for c in 0..p.out_dim {
                out[i][c] += p.weights[level] * u[c];
            }
        }
    }
    out
}

/// `u_j + mlp(mean of u_i over the queries i listing j)`, unchanged for
/// nodes no query lists.
pub fn oracle_inter(store: &ParamStore, m: &MlpParams, u: &Rows, lists: &[Vec<u32>]) -> Rows {
    (0..u.len())
        .map(|j| {
            let owners: Vec<usize> = (0..lists.len()).filter(|&i| lists[i].contains(&(j as u32))).collect();
            if owners.is_empty() {
                return u[j].clone();
            }
            let mut mean = vec![0.0; u[j].len()];
            for &i in &owners {
                for (a, b) in mean.iter_mut().zip(&u[i]) {
                    *a += b;
                }
            }
            for a in &mut mean {
                *a /= owners.len() as f64;
            }
            let mixed = mlp(store, m, &mean);
            u[j].iter().zip(mixed).map(|(a, b)| a + b).collect()
        })
        .collect()
}

pub fn oracle_mixer(store: &ParamStore, mx: &MixerParams, x: &Rows, pos: &[Position], lists: &[Vec<Vec<u32>>]) -> Rows {
    let u = oracle_ccm(store, &mx.ccm, x, pos, pos, lists);
    let largest = lists.iter().max_by_key(|l| l.first().map_or(0, Vec::len)).unwrap();
    let inter = oracle_inter(store, &mx.inter, &u, largest);
    x.iter().zip(inter).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect()
}

/// Nodes of one pyramid level.
pub struct OracleLevel {
    pub pos: Vec<Position>,
    pub keys: Vec<NodeKey>,
    /// `[k][i]` self neighbourhoods.
    pub lists: Vec<Vec<Vec<u32>>>,
}

/// Node sets and maps of every level, derived from the definitions.
pub struct OracleStructure {
    pub levels: Vec<OracleLevel>,
    /// `[t][k][s]`: parent-level neighbours of sampled node `s`.
    pub down: Vec<Vec<Vec<Vec<u32>>>>,
    /// `[t][k][j]`: sampled nodes whose down lists contain parent `j`, or
    /// the nearest sampled node when there are none.
    pub up: Vec<Vec<Vec<Vec<u32>>>>,
    pub sampled: Vec<Vec<u32>>,
}

pub fn oracle_structure(graph: &EventGraph, k_set: &[usize], reduction: usize, stages: usize) -> OracleStructure {
    let self_lists = |pos: &[Position], keys: &[NodeKey]| -> Vec<Vec<Vec<u32>>> {
        k_set.iter().map(|&k| oracle_knn(pos, keys, pos, k)).collect()
    };
    let mut levels = vec![OracleLevel {
        lists: self_lists(&graph.positions, &graph.keys),
        pos: graph.positions.clone(),
        keys: graph.keys.clone(),
    }];
    let (mut down, mut up, mut sampled) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..stages {
        let parent = levels.last().unwrap();
        let m = parent.pos.len().div_ceil(reduction);
        let s = oracle_fps(&parent.pos, &parent.keys, m);
        let s_pos: Vec<Position> = s.iter().map(|&i| parent.pos[i as usize]).collect();
        let s_keys: Vec<NodeKey> = s.iter().map(|&i| parent.keys[i as usize]).collect();
        let d: Vec<Vec<Vec<u32>>> = k_set.iter().map(|&k| oracle_knn(&parent.pos, &parent.keys, &s_pos, k)).collect();
        let u: Vec<Vec<Vec<u32>>> = d
            .iter()
            .map(|dk| {
                (0..parent.pos.len())
                    .map(|j| {
                        let owners: Vec<u32> =
                            (0..dk.len() as u32).filter(|&si| dk[si as usize].contains(&(j as u32))).collect();
                        if owners.is_empty() {
                            oracle_knn(&s_pos, &s_keys, &[parent.pos[j]], 1).remove(0)
                        } else {
                            owners
                        }
                    })
                    .collect()
            })
            .collect();
        down.push(d);
        up.push(u);
        sampled.push(s);
        let lists = self_lists(&s_pos, &s_keys);
        levels.push(OracleLevel {
            pos: s_pos,
            keys: s_keys,
            lists,
        });
    }
    OracleStructure {
        levels,
        down,
        up,
        sampled,
    }
}

/// The whole network in loop form.
pub fn oracle_forward(model: &ModelParams, graph: &EventGraph) -> Rows {
    let cfg = &model.config;
    let stages = cfg.stages();
    let st = oracle_structure(graph, &cfg.k_set, cfg.reduction, stages);
    let s = &model.store;
    let mut h: Rows = graph.positions.iter().map(|p| mlp(s, &model.stem, p)).collect();
    let mut skips = vec![h.clone()];
    for l in 0..stages {
        let (parent, child) = (&st.levels[l], &st.levels[l + 1]);
        let e = &model.encoder[l];
        let down = oracle_ccm(s, &e.down, &h, &child.pos, &parent.pos, &st.down[l]);
        h = oracle_mixer(s, &e.mixer, &down, &child.pos, &child.lists);
        skips.push(h.clone());
    }
    h = h.iter().map(|r| mlp(s, &model.bottleneck, r)).collect();
    let last = &st.levels[stages];
    h = oracle_mixer(s, &model.bottleneck_mixer, &h, &last.pos, &last.lists);
    for l in (0..stages).rev() {
        let (parent, child) = (&st.levels[l], &st.levels[l + 1]);
        let d = &model.decoder[l];
        let up = oracle_ccm(s, &d.up, &h, &parent.pos, &child.pos, &st.up[l]);
        let fused: Rows = up
            .iter()
            .zip(&skips[l])
            .map(|(a, b)| {
                let cat: Vec<f64> = a.iter().chain(b).copied().collect();
                mlp(s, &d.fuse, &cat)
            })
            .collect();
        h = oracle_mixer(s, &d.mixer, &fused, &parent.pos, &parent.lists);
    }
    h.iter().map(|r| mlp(s, &model.header, r)).collect()
}

pub fn max_abs_diff(a: &Rows, b: &gmnn_core::Matrix) -> f64 {
    assert_eq!((a.len(), a.first().map_or(0, Vec::len)), b.shape());
    let mut m: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            m = m.max((v - b[(i, c)]).abs());
        }
    }
    m
}

/// Per-class (tp, fp, fn) by direct counting.
pub fn oracle_counts(pred: &[ClassId], truth: &[ClassId], classes: usize) -> Vec<(u64, u64, u64)> {
    (0..classes as ClassId)
        .map(|c| {
            let mut k = (0, 0, 0);
            for (&p, &t) in pred.iter().zip(truth) {
                match (p == c, t == c) {
                    (true, true) => k.0 += 1,
                    (true, false) => k.1 += 1,
                    (false, true) => k.2 += 1,
                    _ => {}
                }
            }
            k
        })
        .collect()
}

pub fn oracle_accuracy(pred: &[ClassId], truth: &[ClassId]) -> f64 {
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

/// Mean Jaccard index over classes that occur in the prediction or the
/// truth; 1 for empty inputs.
pub fn oracle_miou(pred: &[ClassId], truth: &[ClassId], classes: usize) -> f64 {
    let mut sum = 0.0;
    let mut present = 0;
    for (tp, fp, fn_) in oracle_counts(pred, truth, classes) {
        if tp + fp + fn_ > 0 {
            sum += tp as f64 / (tp + fp + fn_) as f64;
            present += 1;
        }
    }
    if present == 0 {
        1.0
    } else {
        sum / present as f64
    }
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}
