//! Unsupervised partition of clouds into segments and segment graphs.

mod features;
mod graph;
mod partition;

pub use features::{point_features, shape_features, FEATURE_DIM};
pub use graph::{build_edges, dense_labels, SegmentGraph};
pub use partition::{knn_adjacency, partition_features, partition_objective, Partition};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::spatial::KdTree;

/// Partitions `positions` using covariance features over `k_adj` neighbors
/// and `intensity` (already normalized to [0, 1]).
pub fn partition(positions: &[[f64; 3]], intensity: &[f64], reg: f64, k_adj: usize) -> Result<Partition> {
    if k_adj < 3 {
        return Err(Error::InvalidArgument(format!("k_adj = {k_adj} must be >= 3")));
    }
    if intensity.len() != positions.len() {
        return Err(Error::Shape(format!(
            "{} intensities for {} points",
            intensity.len(),
            positions.len()
        )));
    }
    let tree = KdTree::new(positions);
    let feats = point_features(&tree, intensity, k_adj);
    let edges = knn_adjacency(&tree, k_adj);
    partition_features(&feats, &edges, reg)
}

/// Writes partition labels into the cloud's segment column.
pub fn segment_cloud(cloud: &mut PointCloud, intensity_max: f64, reg: f64, k_adj: usize) -> Result<usize> {
    let p = partition(&cloud.positions, &cloud.normalized_intensity(intensity_max), reg, k_adj)?;
    cloud.segment = p.labels;
    Ok(p.segments)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two regular pentagons far apart, one horizontal and one vertical.
    fn pentagons() -> (Vec<[f64; 3]>, Vec<f64>) {
        let mut pts = Vec::new();
        let mut inten = Vec::new();
        for k in 0..5 {
            let a = k as f64 * std::f64::consts::TAU / 5.0;
            pts.push([a.cos(), a.sin(), 0.0]);
            inten.push(0.5 + 0.004 * k as f64);
        }
        for k in 0..5 {
            let a = k as f64 * std::f64::consts::TAU / 5.0;
            pts.push([100.0 + a.cos(), 0.0, 10.0 + a.sin()]);
            inten.push(0.3 - 0.003 * k as f64);
        }
        (pts, inten)
    }

    /// Restricted-growth strings enumerate every set partition once.
    fn all_partitions(n: usize, f: &mut impl FnMut(&[u32])) {
        fn rec(buf: &mut Vec<u32>, n: usize, max: u32, f: &mut impl FnMut(&[u32])) {
            if buf.len() == n {
                f(buf);
                return;
            }
            for v in 0..=max + 1 {
                buf.push(v);
                rec(buf, n, max.max(v), f);
                buf.pop();
            }
        }
        let mut buf = vec![0];
        rec(&mut buf, n, 0, f);
    }

    #[test]
    fn two_planar_patches_split_in_two_and_match_exhaustive_search() {
        let (pts, inten) = pentagons();
        let k = 3;
        let p = partition(&pts, &inten, 0.03, k).unwrap();
        assert_eq!(p.segments, 2);
        assert_eq!(p.labels, vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);

        let tree = KdTree::new(&pts);
        let feats = point_features(&tree, &inten, k);
        let edges = knn_adjacency(&tree, k);
        let mut best = (f64::INFINITY, Vec::new());
        let mut count = 0;
        all_partitions(10, &mut |labels| {
            count += 1;
            let e = partition_objective(&feats, &edges, labels, 0.03);
            if e < best.0 - 1e-12 {
                best = (e, labels.to_vec());
            }
        });
        assert_eq!(count, 115_975);
        assert_eq!(best.1, p.labels);
        let got = partition_objective(&feats, &edges, &p.labels, 0.03);
        assert!((got - best.0).abs() < 1e-12);
    }

    #[test]
    fn small_k_is_rejected() {
        let (pts, inten) = pentagons();
        assert!(partition(&pts, &inten, 0.03, 2).is_err());
    }
}
