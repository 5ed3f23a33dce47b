//! Spatial indexing, subsampling, pyramids, spheres and augmentation.

mod grid;
mod kdtree;
mod neighbors;
mod pyramid;

pub use grid::{cell_key, grid_subsample, grid_subsample_points, GridSample};
pub use kdtree::{dist2, KdTree};
pub use neighbors::{
    neighbor_count_quantile, neighbor_count_quantile_over, radius_lists, radius_search,
    radius_search_tree, NeighborLists,
};
pub use pyramid::{build_pyramid, check_schedule, LevelSpec, PyramidLevel, SphereBatch};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Indices of all points within `r` of `center`, ascending.
pub fn sample_sphere(points: &[[f64; 3]], center: &[f64; 3], r: f64) -> Vec<usize> {
    let r2 = r * r;
    (0..points.len())
        .filter(|&i| dist2(&points[i], center) <= r2)
        .collect()
}

/// Input features `[1, intensity, z, normalized z]`, one row per point.
/// Normalized z is zero when all heights are equal.
pub fn assemble_input_features<T: Real>(points: &[[f64; 3]], intensity: &[f64]) -> Result<Tensor<T>> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("cannot build features for an empty sphere".into()));
    }
    if intensity.len() != points.len() {
        return Err(Error::Shape(format!(
            "{} intensities for {} points",
            intensity.len(),
            points.len()
        )));
    }
    let (lo, hi) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[2]), hi.max(p[2])));
    let range = hi - lo;
    let mut data = Vec::with_capacity(points.len() * 4);
    for (p, &i) in points.iter().zip(intensity) {
        let zn = if range > 0.0 { (p[2] - lo) / range } else { 0.0 };
        data.extend([T::one(), T::lit(i), T::lit(p[2]), T::lit(zn)]);
    }
    Tensor::matrix(points.len(), 4, data)
}

/// Rotates `points` by `angle` about the vertical axis through `center` and
/// adds i.i.d. Gaussian noise of standard deviation `sigma` per coordinate.
pub fn rotate_and_jitter<R: Rng>(
    points: &[[f64; 3]],
    center: &[f64; 3],
    angle: f64,
    sigma: f64,
    rng: &mut R,
) -> Vec<[f64; 3]> {
    let (s, c) = angle.sin_cos();
    let noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).unwrap());
    points
        .iter()
        .map(|p| {
            let x = p[0] - center[0];
            let y = p[1] - center[1];
            let mut q = [center[0] + c * x - s * y, center[1] + s * x + c * y, p[2]];
            if let Some(n) = &noise {
                for v in q.iter_mut() {
                    *v += n.sample(rng);
                }
            }
            q
        })
        .collect()
}

/// Training augmentation: uniform angle in `[0, 2 pi)` and jitter `sigma`.
pub fn augment(points: &[[f64; 3]], center: &[f64; 3], seed: u64, sigma: f64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    rotate_and_jitter(points, center, angle, sigma, &mut rng)
}
