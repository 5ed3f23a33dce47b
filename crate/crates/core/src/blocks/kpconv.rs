//! Rigid kernel point convolution in 3D and in the horizontal plane.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::exec;
use crate::kernel::KernelLayout;
use crate::spatial::NeighborLists;
use crate::tensor::{CorrTable, Graph, ParamId, ParamStore, Real, Var};

/// Correlation weights of every (center, neighbor, kernel point) triple with
/// `h > 0`. Kernel points are `layout` scaled to `radius`; a 2D layout sees
/// only the horizontal part of each offset.
pub fn corr_table<T: Real>(
    centers: &[[f64; 3]],
    support: &[[f64; 3]],
    neighbors: &NeighborLists,
    layout: &KernelLayout,
    radius: f64,
    sigma: f64,
) -> Result<CorrTable<T>> {
    if neighbors.queries() != centers.len() {
        return Err(Error::Shape(format!(
            "{} neighbor rows for {} centers",
            neighbors.queries(),
            centers.len()
        )));
    }
    if neighbors.shadow as usize != support.len() {
        return Err(Error::Shape("neighbor shadow index does not match the support".into()));
    }
    let kp = layout.scaled(radius);
    let planar = layout.dim == 2;
    let rows = exec::map_range(centers.len(), |n| {
        let c = centers[n];
        let mut row = Vec::new();
        for j in neighbors.valid(n) {
            let s = support[j];
            let off = [s[0] - c[0], s[1] - c[1], if planar { 0.0 } else { s[2] - c[2] }];
            for (k, p) in kp.iter().enumerate() {
                let d = ((off[0] - p[0]).powi(2) + (off[1] - p[1]).powi(2) + (off[2] - p[2]).powi(2)).sqrt();
                let h = 1.0 - d / sigma;
                if h > 0.0 {
                    row.push((j as u32, k as u32, T::lit(h)));
                }
            }
        }
        row
    });
    Ok(CorrTable::from_rows(rows, kp.len(), support.len()))
}

/// Stacked kernel weights `(K * C_in) x C_out`; rows `k*C_in..(k+1)*C_in`
/// hold the matrix of kernel point `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct KpConv {
    pub weight: ParamId,
    pub kernels: usize,
    pub cin: usize,
    pub cout: usize,
}

impl KpConv {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        kernels: usize,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (kernels * cin).max(1) as f64).sqrt();
        KpConv {
            weight: store.add_normal(format!("{name}.kernel"), &[kernels * cin, cout], std, rng),
            kernels,
            cin,
            cout,
        }
    }

    /// `out(p) = sum_i sum_k h(p_i - p, k) f_i W_k` over the neighbors in
    /// `table`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        table: &Arc<CorrTable<T>>,
    ) -> Result<Var> {
        if table.kernels() != self.kernels {
            return Err(Error::Shape(format!(
                "table has {} kernel points, convolution has {}",
                table.kernels(),
                self.kernels
            )));
        }
        if g.shape(x).get(1) != Some(&self.cin) {
            return Err(Error::Shape(format!(
                "kpconv expects {} input channels, got {:?}",
                self.cin,
                g.shape(x)
            )));
        }
        let agg = g.kernel_aggregate(x, table.clone())?;
        let w = g.param(store, self.weight);
        g.matmul(agg, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{correlation, init_kernel_points};
    use crate::spatial::radius_search;
    use crate::tensor::gradcheck::{finite_difference_check, GradCheckOptions};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect()
    }

    /// Dense triple loop over neighbors, kernel points and channels.
    fn naive(
        centers: &[[f64; 3]],
        support: &[[f64; 3]],
        nb: &NeighborLists,
        layout: &KernelLayout,
        radius: f64,
        sigma: f64,
        f: &Tensor<f64>,
        w: &Tensor<f64>,
    ) -> Vec<f64> {
        let (cin, cout) = (f.cols(), w.cols());
        let kp = layout.scaled(radius);
        let mut out = vec![0.0; centers.len() * cout];
        for n in 0..centers.len() {
            for &j in nb.row(n) {
                if j == nb.shadow {
                    continue;
                }
                let j = j as usize;
                let mut x = [0.0; 3];
                for d in 0..3 {
                    x[d] = support[j][d] - centers[n][d];
                }
                if layout.dim == 2 {
                    x[2] = 0.0;
                }
                let h = correlation(&x, &kp, sigma);
                for k in 0..kp.len() {
                    for o in 0..cout {
                        for c in 0..cin {
                            out[n * cout + o] += h[k] * f.at(j, c) * w.at(k * cin + c, o);
                        }
                    }
                }
            }
        }
        out
    }

    fn run(
        centers: &[[f64; 3]],
        support: &[[f64; 3]],
        nb: &NeighborLists,
        layout: &KernelLayout,
        radius: f64,
        sigma: f64,
        f: &Tensor<f64>,
        w: &Tensor<f64>,
    ) -> Tensor<f64> {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", w.clone());
        let conv = KpConv {
            weight: id,
            kernels: layout.len(),
            cin: f.cols(),
            cout: w.cols(),
        };
        let table = Arc::new(corr_table(centers, support, nb, layout, radius, sigma).unwrap());
        let mut g = Graph::new(false);
        let x = g.constant(f.clone());
        let y = conv.forward(&mut g, &store, x, &table).unwrap();
        g.value(y).clone()
    }

    fn random_tensor(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matches_dense_oracle_3d_and_2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, dim) in [(15, 3), (17, 2)] {
            let layout = init_kernel_points(k, dim, 0).unwrap();
            let pts = random_points(6, &mut rng);
            let nb = radius_search(&pts, &pts, 1.5, None, 0);
            let f = random_tensor(6, 4, &mut rng);
            let w = random_tensor(k * 4, 3, &mut rng);
            let got = run(&pts, &pts, &nb, &layout, 1.5, 0.9, &f, &w);
            let want = naive(&pts, &pts, &nb, &layout, 1.5, 0.9, &f, &w);
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn identity_kernel_returns_the_neighbor_feature() {
        let layout = init_kernel_points(1, 3, 0).unwrap();
        let pts = vec![[0.0; 3]];
        let nb = radius_search(&pts, &pts, 1.0, None, 0);
        let f = Tensor::matrix(1, 2, vec![3.0, -1.5]).unwrap();
        let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(run(&pts, &pts, &nb, &layout, 1.0, 0.5, &f, &w).data(), f.data());
        let zero = Tensor::zeros(&[1, 2]);
        assert!(run(&pts, &pts, &nb, &layout, 1.0, 0.5, &zero, &w).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn planar_kernel_ignores_height() {
        let layout = init_kernel_points(17, 2, 0).unwrap();
        let centers = vec![[0.0; 3]];
        let support = vec![[0.0, 0.0, 5.0], [0.0, 0.0, 0.0]];
        let nb = radius_search(&centers, &support, 6.0, None, 0);
        let t = corr_table::<f64>(&centers, &support, &nb, &layout, 6.0, 1.0).unwrap();
        let by_point = |j: u32| -> Vec<(u32, f64)> {
            t.row(0).iter().filter(|e| e.0 == j).map(|e| (e.1, e.2)).collect()
        };
        assert_eq!(by_point(0), by_point(1));
        assert!(!by_point(0).is_empty());
    }

    #[test]
    fn shadow_neighbors_contribute_nothing() {
        let layout = init_kernel_points(15, 3, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = random_points(8, &mut rng);
        let nb = radius_search(&pts, &pts, 0.8, None, 0);
        assert!(nb.indices.iter().any(|&j| j == nb.shadow));
        let t = corr_table::<f64>(&pts, &pts, &nb, &layout, 0.8, 0.5).unwrap();
        for n in 0..pts.len() {
            assert!(t.row(n).iter().all(|e| e.0 < nb.shadow));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layout = init_kernel_points(15, 3, 0).unwrap();
        let pts = random_points(5, &mut rng);
        let nb = radius_search(&pts, &pts, 2.0, None, 0);
        let table = Arc::new(corr_table::<f64>(&pts, &pts, &nb, &layout, 2.0, 1.2).unwrap());
        let f = random_tensor(5, 3, &mut rng);
        let mut store = ParamStore::<f64>::new();
        let conv = KpConv::new(&mut store, "c", 15, 3, 2, &mut rng);
        let w = store.get(conv.weight).value.clone();
        let out = finite_difference_check(
            |g, v| {
                g.bind_param(conv.weight, v[1]);
                conv.forward(g, &store, v[0], &table)
            },
            &[f, w],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(out.max_rel_error < 1e-5);
    }
}
