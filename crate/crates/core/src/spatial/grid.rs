//! Voxel-grid subsampling anchored at the coordinate origin.

use std::collections::HashMap;

use crate::cloud::{PointCloud, UNASSIGNED, UNLABELED};
use crate::error::{Error, Result};

/// Integer cell of `p` for cells of side `cell`, anchored at the origin.
pub fn cell_key(p: &[f64; 3], cell: f64) -> [i64; 3] {
    [
        (p[0] / cell).floor() as i64,
        (p[1] / cell).floor() as i64,
        (p[2] / cell).floor() as i64,
    ]
}

/// Subsampled cloud plus, for every input point, the index of its output
/// point.
#[derive(Clone, Debug)]
pub struct GridSample {
    pub cloud: PointCloud,
    pub cell_of_point: Vec<usize>,
}

/// Groups points by cell; groups are numbered in order of first occurrence.
fn group(points: &[[f64; 3]], cell: f64) -> Result<(Vec<usize>, usize)> {
    if !(cell > 0.0) || !cell.is_finite() {
        return Err(Error::InvalidArgument(format!("cell size {cell} must be positive")));
    }
    let mut map: HashMap<[i64; 3], usize> = HashMap::new();
    let mut of_point = Vec::with_capacity(points.len());
    for p in points {
        let n = map.len();
        of_point.push(*map.entry(cell_key(p, cell)).or_insert(n));
    }
    Ok((of_point, map.len()))
}

fn barycenters(points: &[[f64; 3]], of_point: &[usize], groups: usize) -> Vec<[f64; 3]> {
    let mut sum = vec![[0.0; 3]; groups];
    let mut count = vec![0usize; groups];
    for (p, &g) in points.iter().zip(of_point) {
        for d in 0..3 {
            sum[g][d] += p[d];
        }
        count[g] += 1;
    }
    sum.iter()
        .zip(&count)
        .map(|(s, &c)| [s[0] / c as f64, s[1] / c as f64, s[2] / c as f64])
        .collect()
}

/// Most frequent value, ignoring `skip`; ties go to the smallest value.
fn majority<V: Copy + Ord + std::hash::Hash>(values: impl Iterator<Item = V>, skip: V) -> V {
    let mut counts: HashMap<V, usize> = HashMap::new();
    for v in values.filter(|&v| v != skip) {
        *counts.entry(v).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(v, _)| v)
        .unwrap_or(skip)
}

/// Positions-only subsampling: barycenters and the point-to-cell map.
pub fn grid_subsample_points(points: &[[f64; 3]], cell: f64) -> Result<(Vec<[f64; 3]>, Vec<usize>)> {
    let (of_point, groups) = group(points, cell)?;
    Ok((barycenters(points, &of_point, groups), of_point))
}

/// One point per occupied cell at the barycenter of its members, with mean
/// intensity, rounded mean return count and majority label and segment.
pub fn grid_subsample(cloud: &PointCloud, cell: f64) -> Result<GridSample> {
    cloud.validate()?;
    let (of_point, groups) = group(&cloud.positions, cell)?;
    let positions = barycenters(&cloud.positions, &of_point, groups);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); groups];
    for (i, &g) in of_point.iter().enumerate() {
        members[g].push(i);
    }
    let mut out = PointCloud {
        positions,
        ..PointCloud::default()
    };
    for m in &members {
        let n = m.len() as f64;
        out.intensity
            .push(m.iter().map(|&i| cloud.intensity[i]).sum::<f64>() / n);
        let rc = m.iter().map(|&i| cloud.return_count[i] as f64).sum::<f64>() / n;
        out.return_count.push(rc.round() as u8);
        out.label
            .push(majority(m.iter().map(|&i| cloud.label[i]), UNLABELED));
        out.segment
            .push(majority(m.iter().map(|&i| cloud.segment[i]), UNASSIGNED));
    }
    Ok(GridSample {
        cloud: out,
        cell_of_point: of_point,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_cell_gives_centroid() {
        let mut c = PointCloud::from_positions(vec![[0.1, 0.1, 0.1], [0.3, 0.2, 0.1], [0.2, 0.0, 0.4]]);
        c.label = vec![2, 1, 1];
        c.intensity = vec![3.0, 6.0, 9.0];
        let g = grid_subsample(&c, 1.0).unwrap();
        assert_eq!(g.cloud.len(), 1);
        let p = g.cloud.positions[0];
        assert!((p[0] - 0.2).abs() < 1e-15 && (p[1] - 0.1).abs() < 1e-15 && (p[2] - 0.2).abs() < 1e-15);
        assert_eq!(g.cloud.label, vec![1]);
        assert_eq!(g.cloud.intensity, vec![6.0]);
    }

    #[test]
    fn distinct_cells_are_kept() {
        let c = PointCloud::from_positions(vec![[0.5, 0.5, 0.5], [1.5, 0.5, 0.5]]);
        let g = grid_subsample(&c, 1.0).unwrap();
        assert_eq!(g.cloud.positions, c.positions);
        assert_eq!(g.cell_of_point, vec![0, 1]);
    }

    #[test]
    fn label_ties_go_to_lowest_and_unlabeled_is_ignored() {
        let mut c = PointCloud::from_positions(vec![[0.1; 3], [0.2; 3], [0.3; 3], [0.4; 3]]);
        c.label = vec![3, 1, UNLABELED, UNLABELED];
        let g = grid_subsample(&c, 1.0).unwrap();
        assert_eq!(g.cloud.label, vec![1]);
    }

    #[test]
    fn empty_cloud_gives_empty_output() {
        let g = grid_subsample(&PointCloud::default(), 0.5).unwrap();
        assert!(g.cloud.is_empty());
        assert!(grid_subsample(&PointCloud::default(), 0.0).is_err());
    }

    #[test]
    fn barycenters_lie_in_their_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<[f64; 3]> = (0..500)
            .map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let (out, map) = grid_subsample_points(&pts, 0.7).unwrap();
        let mut keys: Vec<[i64; 3]> = out.iter().map(|p| cell_key(p, 0.7)).collect();
        for (i, p) in pts.iter().enumerate() {
            assert_eq!(cell_key(p, 0.7), keys[map[i]]);
        }
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), out.len());
    }
}
