//! Local covariance features for partitioning.

use nalgebra::{Matrix3, SymmetricEigen};

use crate::exec;
use crate::spatial::KdTree;

pub const FEATURE_DIM: usize = 5;

/// Linearity, planarity, sphericity and verticality of the covariance of
/// `points`, in that order. Degenerate neighborhoods give zeros.
pub fn shape_features(points: &[[f64; 3]]) -> [f64; 4] {
    let n = points.len() as f64;
    if points.len() < 2 {
        return [0.0; 4];
    }
    let mut mean = [0.0; 3];
    for p in points {
        for d in 0..3 {
            mean[d] += p[d] / n;
        }
    }
    let mut cov = Matrix3::<f64>::zeros();
    for p in points {
        for a in 0..3 {
            for b in 0..3 {
                cov[(a, b)] += (p[a] - mean[a]) * (p[b] - mean[b]) / n;
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let l: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    if l[0] <= 1e-12 {
        return [0.0; 4];
    }
    let normal = eig.eigenvectors.column(order[2]);
    [
        (l[0] - l[1]) / l[0],
        (l[1] - l[2]) / l[0],
        l[2] / l[0],
        1.0 - normal[2].abs(),
    ]
}

/// Per-point feature vectors: shape features over the point and its `k`
/// nearest neighbors, followed by normalized intensity.
pub fn point_features(tree: &KdTree, intensity: &[f64], k: usize) -> Vec<[f64; FEATURE_DIM]> {
    let pts = tree.points();
    exec::map_range(pts.len(), |i| {
        let nb: Vec<[f64; 3]> = tree.knn(&pts[i], k + 1).iter().map(|&(j, _)| pts[j]).collect();
        let s = shape_features(&nb);
        [s[0], s[1], s[2], s[3], intensity[i]]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizontal_plane() {
        let pts: Vec<[f64; 3]> = (0..25).map(|i| [(i % 5) as f64, (i / 5) as f64, 0.0]).collect();
        let f = shape_features(&pts);
        assert!(f[1] > 0.9 && f[2] < 1e-9 && f[3] < 1e-9, "{f:?}");
    }

    #[test]
    fn vertical_plane_and_line() {
        let wall: Vec<[f64; 3]> = (0..25).map(|i| [(i % 5) as f64, 0.0, (i / 5) as f64]).collect();
        assert!((shape_features(&wall)[3] - 1.0).abs() < 1e-9);
        let line: Vec<[f64; 3]> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        assert!((shape_features(&line)[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_neighborhood() {
        assert_eq!(shape_features(&[[1.0; 3]; 4]), [0.0; 4]);
    }
}
