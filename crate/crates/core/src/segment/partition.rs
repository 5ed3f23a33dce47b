//! Greedy region merging toward a piecewise-constant feature partition.
//!
//! The objective is `sum_i |f_i - mean(seg(i))|^2 + lambda * cut`, where
//! `cut` counts adjacency edges between different segments. Starting from
//! singletons, the adjacent pair whose merge lowers the objective the most is
//! merged until no merge lowers it.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};

use super::features::FEATURE_DIM;
use crate::error::{Error, Result};
use crate::spatial::KdTree;

/// Undirected adjacency as sorted `(a, b)` pairs with `a < b`.
pub fn knn_adjacency(tree: &KdTree, k: usize) -> Vec<(usize, usize)> {
    let pts = tree.points();
    let mut edges = Vec::new();
    for (i, p) in pts.iter().enumerate() {
        for (j, _) in tree.knn(p, k + 1) {
            if j != i {
                edges.push((i.min(j), i.max(j)));
            }
        }
    }
    edges.sort_unstable();
    edges.dedup();
    edges
}

#[derive(Clone, Debug)]
pub struct Partition {
    /// Dense labels numbered by first occurrence.
    pub labels: Vec<u32>,
    pub segments: usize,
    /// Objective before the first merge and after every merge.
    pub objective_trace: Vec<f64>,
}

#[derive(Clone)]
struct Seg {
    count: f64,
    sum: [f64; FEATURE_DIM],
    neighbors: HashMap<usize, f64>,
    version: u64,
    alive: bool,
}

fn merge_delta(a: &Seg, b: &Seg, lambda: f64, w: f64) -> f64 {
    let mut d2 = 0.0;
    for c in 0..FEATURE_DIM {
        let diff = a.sum[c] / a.count - b.sum[c] / b.count;
        d2 += diff * diff;
    }
    a.count * b.count / (a.count + b.count) * d2 - lambda * w
}

#[derive(PartialEq)]
struct Cand {
    delta: f64,
    a: usize,
    b: usize,
    va: u64,
    vb: u64,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.delta
            .total_cmp(&other.delta)
            .then(self.a.cmp(&other.a))
            .then(self.b.cmp(&other.b))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Objective of a labeling; exposed for oracle tests.
pub fn partition_objective(features: &[[f64; FEATURE_DIM]], edges: &[(usize, usize)], labels: &[u32], lambda: f64) -> f64 {
    let mut stats: HashMap<u32, (f64, [f64; FEATURE_DIM])> = HashMap::new();
    for (f, &l) in features.iter().zip(labels) {
        let e = stats.entry(l).or_insert((0.0, [0.0; FEATURE_DIM]));
        e.0 += 1.0;
        for c in 0..FEATURE_DIM {
            e.1[c] += f[c];
        }
    }
    let mut sse = 0.0;
    for (f, &l) in features.iter().zip(labels) {
        let (n, s) = stats[&l];
        for c in 0..FEATURE_DIM {
            sse += (f[c] - s[c] / n).powi(2);
        }
    }
    let cut = edges.iter().filter(|&&(a, b)| labels[a] != labels[b]).count();
    sse + lambda * cut as f64
}

/// Partitions points with the given features over the given adjacency.
pub fn partition_features(
    features: &[[f64; FEATURE_DIM]],
    edges: &[(usize, usize)],
    lambda: f64,
) -> Result<Partition> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("regularization {lambda} must be >= 0")));
    }
    let n = features.len();
    let mut segs: Vec<Seg> = features
        .iter()
        .map(|f| Seg {
            count: 1.0,
            sum: *f,
            neighbors: HashMap::new(),
            version: 0,
            alive: true,
        })
        .collect();
    for &(a, b) in edges {
        if a != b {
            *segs[a].neighbors.entry(b).or_default() += 1.0;
            *segs[b].neighbors.entry(a).or_default() += 1.0;
        }
    }
    let mut objective = lambda * edges.iter().filter(|e| e.0 != e.1).count() as f64;
    let mut trace = vec![objective];
    let mut parent: Vec<usize> = (0..n).collect();

    let candidates = |segs: &[Seg], heap: &mut BinaryHeap<Reverse<Cand>>, a: usize| {
        for (&b, &w) in &segs[a].neighbors {
            let d = merge_delta(&segs[a], &segs[b], lambda, w);
            if d < 0.0 {
                let (x, y) = (a.min(b), a.max(b));
                heap.push(Reverse(Cand {
                    delta: d,
                    a: x,
                    b: y,
                    va: segs[x].version,
                    vb: segs[y].version,
                }));
            }
        }
    };
    let rebuild = |segs: &[Seg]| {
        let mut heap = BinaryHeap::new();
        for a in 0..segs.len() {
            if segs[a].alive {
                for (&b, &w) in &segs[a].neighbors {
                    if a < b {
                        let d = merge_delta(&segs[a], &segs[b], lambda, w);
                        if d < 0.0 {
                            heap.push(Reverse(Cand {
                                delta: d,
                                a,
                                b,
                                va: segs[a].version,
                                vb: segs[b].version,
                            }));
                        }
                    }
                }
            }
        }
        heap
    };

    let mut heap = rebuild(&segs);
    let mut live_edges = edges.len();
    while let Some(Reverse(c)) = heap.pop() {
        let (a, b) = (c.a, c.b);
        if !segs[a].alive || !segs[b].alive || segs[a].version != c.va || segs[b].version != c.vb {
            continue;
        }
        // Merge b into a.
        let sb = std::mem::replace(
            &mut segs[b],
            Seg {
                count: 0.0,
                sum: [0.0; FEATURE_DIM],
                neighbors: HashMap::new(),
                version: 0,
                alive: false,
            },
        );
        parent[b] = a;
        objective += c.delta;
        trace.push(objective);
        segs[a].count += sb.count;
        for k in 0..FEATURE_DIM {
            segs[a].sum[k] += sb.sum[k];
        }
        segs[a].neighbors.remove(&b);
        for (nb, w) in sb.neighbors {
            if nb == a {
                continue;
            }
            *segs[a].neighbors.entry(nb).or_default() += w;
            let m = &mut segs[nb].neighbors;
            m.remove(&b);
            *m.entry(a).or_default() += w;
        }
        segs[a].version += 1;
        live_edges = live_edges.saturating_sub(1);
        candidates(&segs, &mut heap, a);
        if heap.len() > 4 * live_edges.max(1) + 4096 {
            heap = rebuild(&segs);
        }
    }

    let root = |mut i: usize| {
        while parent[i] != i {
            i = parent[i];
        }
        i
    };
    let mut dense: HashMap<usize, u32> = HashMap::new();
    let labels: Vec<u32> = (0..n)
        .map(|i| {
            let r = root(i);
            let next = dense.len() as u32;
            *dense.entry(r).or_insert(next)
        })
        .collect();
    Ok(Partition {
        labels,
        segments: dense.len(),
        objective_trace: trace,
    })
}
