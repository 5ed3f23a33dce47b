//! Segment graphs with seeded per-node edge subsampling.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Segment membership of a point set plus directed edges `(i, j)` meaning
/// segment `i` receives from segment `j`. Edges of node `i` occupy
/// `edges[offsets[i]..offsets[i + 1]]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentGraph {
    pub segment_of_point: Vec<usize>,
    pub segments: usize,
    pub edges: Vec<(usize, usize)>,
    pub offsets: Vec<usize>,
}

impl SegmentGraph {
    pub fn out_edges(&self, i: usize) -> &[(usize, usize)] {
        &self.edges[self.offsets[i]..self.offsets[i + 1]]
    }
}

/// Relabels arbitrary segment ids densely in first-occurrence order.
pub fn dense_labels(labels: &[u32]) -> (Vec<usize>, usize) {
    let mut map: HashMap<u32, usize> = HashMap::new();
    let dense = labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect();
    (dense, map.len())
}

/// Connects every segment present in `labels` to every other one, keeping a
/// seeded uniform subset of `max_edges` per node when there are more.
pub fn build_edges(labels: &[u32], max_edges: usize, seed: u64) -> Result<SegmentGraph> {
    if max_edges == 0 {
        return Err(Error::InvalidArgument("max_edges must be >= 1".into()));
    }
    let (segment_of_point, s) = dense_labels(labels);
    if s == 0 {
        return Err(Error::Graph("no segments".into()));
    }
    let mut edges = Vec::with_capacity(s * (s - 1).min(max_edges));
    let mut offsets = Vec::with_capacity(s + 1);
    offsets.push(0);
    for i in 0..s {
        if s - 1 <= max_edges {
            edges.extend((0..s).filter(|&j| j != i).map(|j| (i, j)));
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut picks: Vec<usize> = sample(&mut rng, s - 1, max_edges).into_vec();
            picks.sort_unstable();
            // Skip over `i` itself.
            edges.extend(picks.into_iter().map(|j| (i, if j >= i { j + 1 } else { j })));
        }
        offsets.push(edges.len());
    }
    Ok(SegmentGraph {
        segment_of_point,
        segments: s,
        edges,
        offsets,
    })
}
