//! Fixed-width radius neighbor lists.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::KdTree;
use crate::exec;

/// Row-major `queries x width` neighbor indices into a support set. Missing
/// entries hold the shadow index, equal to the support length.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborLists {
    pub width: usize,
    pub indices: Vec<u32>,
    pub shadow: u32,
}

impl NeighborLists {
    pub fn queries(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.indices.len() / self.width
        }
    }

    pub fn row(&self, q: usize) -> &[u32] {
        &self.indices[q * self.width..(q + 1) * self.width]
    }

    /// Neighbors of `q` without shadow padding.
    pub fn valid(&self, q: usize) -> impl Iterator<Item = usize> + '_ {
        let shadow = self.shadow;
        self.row(q)
            .iter()
            .filter(move |&&j| j != shadow)
            .map(|&j| j as usize)
    }

    pub(crate) fn from_lists(lists: &[Vec<usize>], shadow: usize, queries: usize) -> Self {
        let width = lists.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let mut indices = vec![shadow as u32; queries * width];
        for (q, l) in lists.iter().enumerate() {
            for (k, &j) in l.iter().enumerate() {
                indices[q * width + k] = j as u32;
            }
        }
        NeighborLists {
            width,
            indices,
            shadow: shadow as u32,
        }
    }
}

/// Per-query seed for truncation so that results do not depend on the order
/// in which queries are processed.
fn query_seed(seed: u64, q: usize) -> u64 {
    seed ^ (q as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// All support points within `r` of each query, in ascending index order.
pub fn radius_lists(tree: &KdTree, queries: &[[f64; 3]], r: f64) -> Vec<Vec<usize>> {
    exec::map_range(queries.len(), |q| tree.radius(&queries[q], r))
}

/// Radius neighbors of each query, truncated to `max_neighbors` by a seeded
/// random subsample (kept in ascending order) and padded with the shadow
/// index.
pub fn radius_search(
    queries: &[[f64; 3]],
    support: &[[f64; 3]],
    r: f64,
    max_neighbors: Option<usize>,
    seed: u64,
) -> NeighborLists {
    let tree = KdTree::new(support);
    radius_search_tree(&tree, queries, r, max_neighbors, seed)
}

pub fn radius_search_tree(
    tree: &KdTree,
    queries: &[[f64; 3]],
    r: f64,
    max_neighbors: Option<usize>,
    seed: u64,
) -> NeighborLists {
    let lists = exec::map_range(queries.len(), |q| {
        let all = tree.radius(&queries[q], r);
        match max_neighbors {
            Some(m) if all.len() > m => {
                let mut rng = ChaCha8Rng::seed_from_u64(query_seed(seed, q));
                let mut keep = sample(&mut rng, all.len(), m).into_vec();
                keep.sort_unstable();
                keep.into_iter().map(|k| all[k]).collect()
            }
            _ => all,
        }
    });
    NeighborLists::from_lists(&lists, tree.len(), queries.len())
}

/// The `q`-quantile (in `[0, 1]`) of neighbor counts within `r`.
pub fn neighbor_count_quantile(points: &[[f64; 3]], r: f64, q: f64) -> usize {
    neighbor_count_quantile_over(&KdTree::new(points), points, r, q)
}

pub fn neighbor_count_quantile_over(tree: &KdTree, queries: &[[f64; 3]], r: f64, q: f64) -> usize {
    if queries.is_empty() {
        return 0;
    }
    let mut counts: Vec<usize> = radius_lists(tree, queries, r).iter().map(Vec::len).collect();
    counts.sort_unstable();
    let k = ((q.clamp(0.0, 1.0) * (counts.len() - 1) as f64).round()) as usize;
    counts[k]
}
