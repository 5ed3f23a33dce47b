//! Multi-level point pyramids and stacked sphere batches.

use serde::{Deserialize, Serialize};

use super::grid::grid_subsample_points;
use super::neighbors::{radius_search_tree, NeighborLists};
use super::KdTree;
use crate::error::{Error, Result};
use crate::exec;

/// Grid size and convolution radius of one level. Neighbor caps are
/// calibrated on training data; `None` keeps every neighbor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub grid: f64,
    pub radius: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_neighbors: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_strided_neighbors: Option<usize>,
}

impl LevelSpec {
    pub fn new(grid: f64, radius: f64) -> Self {
        LevelSpec {
            grid,
            radius,
            max_neighbors: None,
            max_strided_neighbors: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel {
    pub points: Vec<[f64; 3]>,
    pub grid: f64,
    pub radius: f64,
    /// For each point here, the nearest point of the previous level
    /// (identity on level 0).
    pub pool_indices: Vec<usize>,
    /// Neighbors among this level's points within `radius`.
    pub self_neighbors: NeighborLists,
    /// Neighbors among the previous level's points within `radius`
    /// (absent on level 0).
    pub strided_neighbors: Option<NeighborLists>,
    /// For each point of the previous level, the nearest point here
    /// (identity on level 0).
    pub up_indices: Vec<usize>,
}

impl PyramidLevel {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn check_schedule(schedule: &[LevelSpec]) -> Result<()> {
    if schedule.is_empty() {
        return Err(Error::Config("layer schedule is empty".into()));
    }
    for (i, s) in schedule.iter().enumerate() {
        if !(s.grid > 0.0) || !(s.radius > 0.0) {
            return Err(Error::Config(format!(
                "level {i}: grid and radius must be positive"
            )));
        }
        if i > 0 && !(s.grid > schedule[i - 1].grid) {
            return Err(Error::Config(format!(
                "level {i}: grid sizes must be strictly increasing ({} after {})",
                s.grid,
                schedule[i - 1].grid
            )));
        }
    }
    Ok(())
}

fn nearest_all(tree: &KdTree, queries: &[[f64; 3]]) -> Vec<usize> {
    exec::map_range(queries.len(), |i| tree.nearest(&queries[i]).unwrap())
}

/// Builds the pyramid for one sphere. Level 0 holds `points` unchanged; each
/// later level subsamples the previous one at its grid size.
pub fn build_pyramid(points: &[[f64; 3]], schedule: &[LevelSpec], seed: u64) -> Result<Vec<PyramidLevel>> {
    check_schedule(schedule)?;
    if points.is_empty() {
        return Err(Error::EmptyLevel { level: 0 });
    }
    let mut levels: Vec<PyramidLevel> = Vec::with_capacity(schedule.len());
    let mut prev_tree: Option<KdTree> = None;
    for (l, spec) in schedule.iter().enumerate() {
        let level_seed = seed.wrapping_add((l as u64) << 32);
        let pts = match levels.last() {
            None => points.to_vec(),
            Some(prev) => grid_subsample_points(&prev.points, spec.grid)?.0,
        };
        if pts.is_empty() {
            return Err(Error::EmptyLevel { level: l });
        }
        let tree = KdTree::new(&pts);
        let self_neighbors =
            radius_search_tree(&tree, &pts, spec.radius, spec.max_neighbors, level_seed);
        let (pool_indices, strided_neighbors, up_indices) = match (&levels.last(), &prev_tree) {
            (Some(prev), Some(pt)) => (
                nearest_all(pt, &pts),
                Some(radius_search_tree(
                    pt,
                    &pts,
                    spec.radius,
                    spec.max_strided_neighbors,
                    level_seed ^ 0x5555,
                )),
                nearest_all(&tree, &prev.points),
            ),
            _ => ((0..pts.len()).collect(), None, (0..pts.len()).collect()),
        };
        levels.push(PyramidLevel {
            points: pts,
            grid: spec.grid,
            radius: spec.radius,
            pool_indices,
            self_neighbors,
            strided_neighbors,
            up_indices,
        });
        prev_tree = Some(tree);
    }
    Ok(levels)
}

/// Several sphere pyramids concatenated level by level. Indices are shifted
/// so that no neighbor list crosses a sphere boundary.
#[derive(Clone, Debug)]
pub struct SphereBatch {
    pub levels: Vec<PyramidLevel>,
    /// `offsets[l][s]..offsets[l][s + 1]` are sphere `s`'s rows on level `l`.
    pub offsets: Vec<Vec<usize>>,
}

fn stack_lists(parts: &[&NeighborLists], support_offsets: &[usize]) -> NeighborLists {
    let width = parts.iter().map(|p| p.width).max().unwrap_or(1);
    let shadow = *support_offsets.last().unwrap() as u32;
    let mut indices = Vec::new();
    for (s, p) in parts.iter().enumerate() {
        for q in 0..p.queries() {
            let mut row: Vec<u32> = p
                .valid(q)
                .map(|j| (j + support_offsets[s]) as u32)
                .collect();
            row.resize(width, shadow);
            indices.extend(row);
        }
    }
    NeighborLists {
        width,
        indices,
        shadow,
    }
}

impl SphereBatch {
    pub fn single(levels: Vec<PyramidLevel>) -> Self {
        let offsets = levels.iter().map(|l| vec![0, l.len()]).collect();
        SphereBatch { levels, offsets }
    }

    pub fn spheres(&self) -> usize {
        self.offsets[0].len() - 1
    }

    pub fn stack(pyramids: Vec<Vec<PyramidLevel>>) -> Result<Self> {
        if pyramids.is_empty() {
            return Err(Error::InvalidArgument("no spheres to stack".into()));
        }
        let depth = pyramids[0].len();
        if pyramids.iter().any(|p| p.len() != depth) {
            return Err(Error::InvalidArgument("pyramids differ in depth".into()));
        }
        if pyramids.len() == 1 {
            return Ok(Self::single(pyramids.into_iter().next().unwrap()));
        }
        let offsets: Vec<Vec<usize>> = (0..depth)
            .map(|l| {
                let mut o = vec![0];
                for p in &pyramids {
                    o.push(o.last().unwrap() + p[l].len());
                }
                o
            })
            .collect();
        let mut levels = Vec::with_capacity(depth);
        for l in 0..depth {
            let shift = |vals: &[usize], s: usize, off: &[usize]| -> Vec<usize> {
                vals.iter().map(|&v| v + off[s]).collect::<Vec<_>>()
            };
            let mut points = Vec::new();
            let mut pool = Vec::new();
            let mut up = Vec::new();
            for (s, p) in pyramids.iter().enumerate() {
                points.extend_from_slice(&p[l].points);
                let prev = if l == 0 { &offsets[0] } else { &offsets[l - 1] };
                pool.extend(shift(&p[l].pool_indices, s, prev));
                up.extend(shift(&p[l].up_indices, s, &offsets[l]));
            }
            let selfs: Vec<&NeighborLists> = pyramids.iter().map(|p| &p[l].self_neighbors).collect();
            let strided = if l == 0 {
                None
            } else {
                let parts: Vec<&NeighborLists> = pyramids
                    .iter()
                    .map(|p| p[l].strided_neighbors.as_ref().unwrap())
                    .collect();
                Some(stack_lists(&parts, &offsets[l - 1]))
            };
            levels.push(PyramidLevel {
                points,
                grid: pyramids[0][l].grid,
                radius: pyramids[0][l].radius,
                pool_indices: pool,
                self_neighbors: stack_lists(&selfs, &offsets[l]),
                strided_neighbors: strided,
                up_indices: up,
            });
        }
        Ok(SphereBatch { levels, offsets })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::kdtree::dist2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0), rng.gen_range(0.0..2.0)])
            .collect()
    }

    fn schedule() -> Vec<LevelSpec> {
        vec![LevelSpec::new(0.25, 0.6), LevelSpec::new(0.5, 1.2), LevelSpec::new(1.0, 2.4)]
    }

    #[test]
    fn one_level_is_identity() {
        let pts = cloud(50, 1);
        let p = build_pyramid(&pts, &[LevelSpec::new(0.1, 0.3)], 0).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].points, pts);
        assert_eq!(p[0].up_indices, (0..50).collect::<Vec<_>>());
        assert!(p[0].strided_neighbors.is_none());
    }

    #[test]
    fn levels_shrink_and_respect_radius() {
        let pts = cloud(800, 2);
        let p = build_pyramid(&pts, &schedule(), 3).unwrap();
        for l in 1..p.len() {
            assert!(p[l].len() <= p[l - 1].len());
            let st = p[l].strided_neighbors.as_ref().unwrap();
            for q in 0..p[l].len() {
                for j in st.valid(q) {
                    assert!(dist2(&p[l].points[q], &p[l - 1].points[j]).sqrt() <= p[l].radius);
                }
                for j in p[l].self_neighbors.valid(q) {
                    assert!(dist2(&p[l].points[q], &p[l].points[j]).sqrt() <= p[l].radius);
                }
            }
        }
    }

    #[test]
    fn up_indices_are_true_nearest() {
        let pts = cloud(300, 4);
        let p = build_pyramid(&pts, &schedule(), 0).unwrap();
        for l in 1..p.len() {
            for (i, &u) in p[l].up_indices.iter().enumerate() {
                let q = p[l - 1].points[i];
                let best = (0..p[l].len())
                    .min_by(|&a, &b| {
                        dist2(&q, &p[l].points[a])
                            .total_cmp(&dist2(&q, &p[l].points[b]))
                            .then(a.cmp(&b))
                    })
                    .unwrap();
                assert_eq!(u, best);
            }
        }
    }

    #[test]
    fn bad_schedule_is_rejected() {
        let pts = cloud(10, 0);
        let s = vec![LevelSpec::new(0.5, 1.0), LevelSpec::new(0.5, 2.0)];
        assert!(build_pyramid(&pts, &s, 0).is_err());
        assert!(matches!(
            build_pyramid(&[], &schedule(), 0),
            Err(Error::EmptyLevel { level: 0 })
        ));
    }

    #[test]
    fn stacking_keeps_spheres_apart() {
        let a = build_pyramid(&cloud(200, 5), &schedule(), 0).unwrap();
        let b = build_pyramid(&cloud(150, 6), &schedule(), 0).unwrap();
        let batch = SphereBatch::stack(vec![a.clone(), b.clone()]).unwrap();
        assert_eq!(batch.spheres(), 2);
        for (l, level) in batch.levels.iter().enumerate() {
            let off = &batch.offsets[l];
            assert_eq!(level.len(), off[2]);
            for q in 0..level.len() {
                let s = if q < off[1] { 0 } else { 1 };
                for j in level.self_neighbors.valid(q) {
                    assert!(j >= off[s] && j < off[s + 1]);
                }
            }
        }
        let l1 = &batch.levels[1];
        assert_eq!(l1.up_indices[a[0].len()], b[1].up_indices[0] + batch.offsets[1][1]);
    }
}
