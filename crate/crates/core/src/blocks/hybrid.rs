//! Residual block with parallel 3D and 2D kernel point convolutions.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{corr_table, leaky, BatchNorm, KpConv, Linear, Unary};
use crate::error::{Error, Result};
use crate::kernel::KernelLayout;
use crate::spatial::NeighborLists;
use crate::tensor::{CorrTable, Graph, ParamStore, Real, Var};

/// Which convolution branches a block runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchMode {
    #[default]
    Hybrid,
    Only3d,
    Only2d,
}

impl BranchMode {
    fn branches(self) -> usize {
        match self {
            BranchMode::Hybrid => 2,
            _ => 1,
        }
    }
}

/// Correlation tables for one (center set, support set) pair, plus the pool
/// map used by strided shortcuts.
#[derive(Clone, Debug)]
pub struct ConvTables<T> {
    pub t3: Arc<CorrTable<T>>,
    pub t2: Arc<CorrTable<T>>,
    pub pool: Option<Arc<Vec<usize>>>,
}

impl<T: Real> ConvTables<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        centers: &[[f64; 3]],
        support: &[[f64; 3]],
        neighbors: &NeighborLists,
        layout3: &KernelLayout,
        layout2: &KernelLayout,
        radius: f64,
        sigma: f64,
        pool: Option<Vec<usize>>,
    ) -> Result<Self> {
        Ok(ConvTables {
            t3: Arc::new(corr_table(centers, support, neighbors, layout3, radius, sigma)?),
            t2: Arc::new(corr_table(centers, support, neighbors, layout2, radius, sigma)?),
            pool: pool.map(Arc::new),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridBlock {
    pub cin: usize,
    pub cout: usize,
    pub cmid: usize,
    pub strided: bool,
    pub mode: BranchMode,
    pub reduce: Unary,
    pub conv3: Option<(KpConv, BatchNorm)>,
    pub conv2: Option<(KpConv, BatchNorm)>,
    pub merge: Linear,
    pub merge_bn: BatchNorm,
    pub shortcut: Option<(Linear, BatchNorm)>,
}

impl HybridBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        strided: bool,
        mode: BranchMode,
        kernels3: usize,
        kernels2: usize,
        rng: &mut R,
    ) -> Self {
        let cmid = (cout / 4).max(1);
        let reduce = Unary::new(store, &format!("{name}.reduce"), cin, cmid, rng);
        let conv3 = (mode != BranchMode::Only2d).then(|| {
            (
                KpConv::new(store, &format!("{name}.conv3d"), kernels3, cmid, cmid, rng),
                BatchNorm::new(store, &format!("{name}.conv3d.bn"), cmid),
            )
        });
        let conv2 = (mode != BranchMode::Only3d).then(|| {
            (
                KpConv::new(store, &format!("{name}.conv2d"), kernels2, cmid, cmid, rng),
                BatchNorm::new(store, &format!("{name}.conv2d.bn"), cmid),
            )
        });
        let merge = Linear::new(store, &format!("{name}.merge"), mode.branches() * cmid, cout, false, rng);
        let merge_bn = BatchNorm::new(store, &format!("{name}.merge.bn"), cout);
        let shortcut = (cin != cout).then(|| {
            (
                Linear::new(store, &format!("{name}.shortcut"), cin, cout, false, rng),
                BatchNorm::new(store, &format!("{name}.shortcut.bn"), cout),
            )
        });
        HybridBlock {
            cin,
            cout,
            cmid,
            strided,
            mode,
            reduce,
            conv3,
            conv2,
            merge,
            merge_bn,
            shortcut,
        }
    }

    /// `x` has one row per support point; the output has one row per center
    /// of `tables`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        tables: &ConvTables<T>,
    ) -> Result<Var> {
        let r = self.reduce.forward(g, store, x)?;
        let mut parts = Vec::with_capacity(2);
        for (branch, table) in [(&self.conv3, &tables.t3), (&self.conv2, &tables.t2)] {
            if let Some((conv, bn)) = branch {
                let y = conv.forward(g, store, r, table)?;
                let y = bn.forward(g, store, y)?;
                parts.push(leaky(g, y)?);
            }
        }
        let cat = if parts.len() == 1 { parts[0] } else { g.concat(&parts)? };
        let m = self.merge.forward(g, store, cat)?;
        let m = self.merge_bn.forward(g, store, m)?;
        let mut s = x;
        if self.strided {
            let pool = tables
                .pool
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("strided block needs a pool map".into()))?;
            s = g.gather_rows(s, pool.clone())?;
        }
        if let Some((lin, bn)) = &self.shortcut {
            s = lin.forward(g, store, s)?;
            s = bn.forward(g, store, s)?;
        }
        let sum = g.add(m, s)?;
        leaky(g, sum)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::bind_all;
    use crate::kernel::init_kernel_points;
    use crate::spatial::build_pyramid;
    use crate::spatial::LevelSpec;
    use crate::tensor::gradcheck::{finite_difference_check, GradCheckOptions};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        levels: Vec<crate::spatial::PyramidLevel>,
        l3: KernelLayout,
        l2: KernelLayout,
    }

    fn fixture(n: usize, seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0), rng.gen_range(0.0..1.0)])
            .collect();
        let schedule = vec![LevelSpec::new(0.3, 0.9), LevelSpec::new(0.9, 1.5)];
        Fixture {
            levels: build_pyramid(&pts, &schedule, 0).unwrap(),
            l3: init_kernel_points(15, 3, 0).unwrap(),
            l2: init_kernel_points(17, 2, 0).unwrap(),
        }
    }

    fn tables(f: &Fixture, strided: bool) -> ConvTables<f64> {
        if strided {
            let l = &f.levels[1];
            ConvTables::build(
                &l.points,
                &f.levels[0].points,
                l.strided_neighbors.as_ref().unwrap(),
                &f.l3,
                &f.l2,
                l.radius,
                0.6 * l.radius,
                Some(l.pool_indices.clone()),
            )
            .unwrap()
        } else {
            let l = &f.levels[0];
            ConvTables::build(&l.points, &l.points, &l.self_neighbors, &f.l3, &f.l2, l.radius, 0.6 * l.radius, None)
                .unwrap()
        }
    }

    fn features(n: usize, c: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(n, c, (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn output_shapes_for_all_variants() {
        let f = fixture(40, 1);
        for strided in [false, true] {
            for (cin, cout) in [(8, 8), (4, 8)] {
                let mut rng = ChaCha8Rng::seed_from_u64(2);
                let mut store = ParamStore::<f64>::new();
                let b = HybridBlock::new(&mut store, "b", cin, cout, strided, BranchMode::Hybrid, 15, 17, &mut rng);
                let t = tables(&f, strided);
                let mut g = Graph::new(true);
                let x = g.constant(features(f.levels[0].len(), cin, 3));
                let y = b.forward(&mut g, &store, x, &t).unwrap();
                let rows = if strided { f.levels[1].len() } else { f.levels[0].len() };
                assert_eq!(g.shape(y), &[rows, cout]);
                assert_eq!(b.shortcut.is_some(), cin != cout);
            }
        }
    }

    #[test]
    fn zeroed_planar_merge_rows_equal_a_3d_only_block() {
        let f = fixture(40, 4);
        let t = tables(&f, false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let hybrid = HybridBlock::new(&mut store, "b", 6, 8, false, BranchMode::Hybrid, 15, 17, &mut rng);
        let cmid = hybrid.cmid;
        let merge = store.get(hybrid.merge.weight).value.clone();
        let mut zeroed = merge.clone();
        for r in cmid..2 * cmid {
            zeroed.row_mut(r).fill(0.0);
        }
        store.get_mut(hybrid.merge.weight).value = zeroed;
        let top = Tensor::matrix(cmid, 8, merge.data()[..cmid * 8].to_vec()).unwrap();
        let mut only3 = hybrid.clone();
        only3.mode = BranchMode::Only3d;
        only3.conv2 = None;
        only3.merge = Linear {
            weight: store.add("only3.merge", top),
            bias: None,
            cin: cmid,
            cout: 8,
        };
        let x = features(f.levels[0].len(), 6, 6);
        let run = |b: &HybridBlock| {
            let mut g = Graph::new(true);
            let xv = g.constant(x.clone());
            let y = b.forward(&mut g, &store, xv, &t).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(&hybrid), run(&only3));
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let f = fixture(14, 7);
        for strided in [false, true] {
            let t = tables(&f, strided);
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let mut store = ParamStore::<f64>::new();
            let b = HybridBlock::new(&mut store, "b", 3, 8, strided, BranchMode::Hybrid, 15, 17, &mut rng);
            let mut inputs = vec![features(f.levels[0].len(), 3, 9)];
            inputs.extend(store.params().iter().map(|p| p.value.clone()));
            let out = finite_difference_check(
                |g, v| {
                    bind_all(g, &store, &v[1..]);
                    b.forward(g, &store, v[0], &t)
                },
                &inputs,
                &GradCheckOptions {
                    max_coords: Some(40),
                    ..GradCheckOptions::default()
                },
            )
            .unwrap();
            assert!(out.max_rel_error < 1e-5);
        }
    }
}
