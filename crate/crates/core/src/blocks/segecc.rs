//! Edge-conditioned convolution over a segment graph.

use std::sync::Arc;

use rand::Rng;

use super::{leaky, Linear};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Real, Var};

/// Segment membership of the rows a block sees, plus the directed edges
/// `(i <- j)` of the segment graph.
#[derive(Clone, Debug)]
pub struct SegContext {
    pub segment_of_row: Arc<Vec<usize>>,
    pub segments: usize,
    /// Receiving segment of each edge.
    pub edge_dst: Arc<Vec<usize>>,
    /// Sending segment of each edge.
    pub edge_src: Arc<Vec<usize>>,
}

impl SegContext {
    pub fn new(segment_of_row: Vec<usize>, segments: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut seen = vec![false; segments];
        for &s in &segment_of_row {
            if s >= segments {
                return Err(Error::Graph(format!("segment id {s} >= {segments}")));
            }
            seen[s] = true;
        }
        if let Some(s) = seen.iter().position(|&v| !v) {
            return Err(Error::Graph(format!("segment {s} has no points")));
        }
        if let Some(&(i, j)) = edges.iter().find(|&&(i, j)| i >= segments || j >= segments || i == j) {
            return Err(Error::Graph(format!("invalid edge ({i}, {j})")));
        }
        Ok(SegContext {
            segment_of_row: Arc::new(segment_of_row),
            segments,
            edge_dst: Arc::new(edges.iter().map(|e| e.0).collect()),
            edge_src: Arc::new(edges.iter().map(|e| e.1).collect()),
        })
    }
}

/// Reduces point features to `cr` channels, averages them per segment,
/// mixes segment means along edges with filters generated from
/// `m_i - m_j`, and broadcasts the result back to points.
#[derive(Clone, Debug, PartialEq)]
pub struct SegEcc {
    pub cin: usize,
    pub cr: usize,
    pub hidden: usize,
    pub reduce: Linear,
    pub theta1: Linear,
    pub theta2: Linear,
}

impl SegEcc {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cr: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let reduce = Linear::new(store, &format!("{name}.reduce"), cin, cr, true, rng);
        let theta1 = Linear::new(store, &format!("{name}.theta1"), cr, hidden, true, rng);
        let theta2 = Linear::new(store, &format!("{name}.theta2"), hidden, cr * cr, true, rng);
        // Each generated filter row sums `cr` products; shrink the init so
        // messages start with roughly unit gain.
        let s = T::lit((0.5 / cr as f64).sqrt());
        let w = store.get_mut(theta2.weight);
        w.value.data_mut().iter_mut().for_each(|v| *v *= s);
        SegEcc {
            cin,
            cr,
            hidden,
            reduce,
            theta1,
            theta2,
        }
    }

    /// Per-segment outputs `m'` (`S x cr`) and the reduced segment means.
    pub fn segment_outputs<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        ctx: &SegContext,
    ) -> Result<(Var, Var)> {
        if g.shape(x)[0] != ctx.segment_of_row.len() {
            return Err(Error::Shape(format!(
                "{} rows but {} segment ids",
                g.shape(x)[0],
                ctx.segment_of_row.len()
            )));
        }
        let r = self.reduce.forward(g, store, x)?;
        let m = g.scatter_mean(r, ctx.segment_of_row.clone(), ctx.segments)?;
        let mi = g.gather_rows(m, ctx.edge_dst.clone())?;
        let mj = g.gather_rows(m, ctx.edge_src.clone())?;
        let e = g.sub(mi, mj)?;
        let h = self.theta1.forward(g, store, e)?;
        let h = leaky(g, h)?;
        let theta = self.theta2.forward(g, store, h)?;
        let msg = g.edge_matvec(theta, mj)?;
        let out = g.scatter_mean(msg, ctx.edge_dst.clone(), ctx.segments)?;
        Ok((out, m))
    }

    /// Per-row features `cr` wide.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, ctx: &SegContext) -> Result<Var> {
        let (seg, _) = self.segment_outputs(g, store, x, ctx)?;
        g.gather_rows(seg, ctx.segment_of_row.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::bind_all;
    use crate::tensor::gradcheck::{finite_difference_check, GradCheckOptions};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cin: usize, cr: usize, seed: u64) -> (ParamStore<f64>, SegEcc) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = SegEcc::new(&mut store, "s", cin, cr, 5, &mut rng);
        (store, s)
    }

    fn full_edges(s: usize) -> Vec<(usize, usize)> {
        let mut e = Vec::new();
        for i in 0..s {
            for j in 0..s {
                if i != j {
                    e.push((i, j));
                }
            }
        }
        e
    }

    fn eval(s: &SegEcc, store: &ParamStore<f64>, x: &Tensor<f64>, ctx: &SegContext) -> Tensor<f64> {
        let mut g = Graph::new(false);
        let xv = g.constant(x.clone());
        let y = s.forward(&mut g, store, xv, ctx).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn matches_per_edge_loop() {
        let (store, s) = setup(4, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seg = vec![0, 1, 2, 0, 1, 2, 2, 0];
        let x = Tensor::matrix(8, 4, (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let edges = full_edges(3);
        let ctx = SegContext::new(seg.clone(), 3, &edges).unwrap();
        let got = eval(&s, &store, &x, &ctx);

        let p = |id| store.get(id).value.clone();
        let lin = |v: &[f64], l: &Linear| -> Vec<f64> {
            let w = p(l.weight);
            let b = p(l.bias.unwrap());
            (0..l.cout)
                .map(|o| b.data()[o] + (0..l.cin).map(|c| v[c] * w.at(c, o)).sum::<f64>())
                .collect()
        };
        let mut means = vec![vec![0.0; 3]; 3];
        let mut counts = [0.0; 3];
        for i in 0..8 {
            let r = lin(x.row(i), &s.reduce);
            for c in 0..3 {
                means[seg[i]][c] += r[c];
            }
            counts[seg[i]] += 1.0;
        }
        for k in 0..3 {
            means[k].iter_mut().for_each(|v| *v /= counts[k]);
        }
        let mut out = vec![vec![0.0; 3]; 3];
        let mut deg = [0.0; 3];
        for &(i, j) in &edges {
            let e: Vec<f64> = (0..3).map(|c| means[i][c] - means[j][c]).collect();
            let h: Vec<f64> = lin(&e, &s.theta1).iter().map(|&v| if v > 0.0 { v } else { 0.1 * v }).collect();
            let theta = lin(&h, &s.theta2);
            for r in 0..3 {
                out[i][r] += (0..3).map(|c| theta[r * 3 + c] * means[j][c]).sum::<f64>();
            }
            deg[i] += 1.0;
        }
        for i in 0..8 {
            for r in 0..3 {
                let want = out[seg[i]][r] / deg[seg[i]];
                assert!((got.at(i, r) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equal_means_give_equal_outputs() {
        let (store, s) = setup(2, 3, 3);
        let x = Tensor::matrix(4, 2, vec![1.0, 2.0, 1.0, 2.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        let ctx = SegContext::new(vec![0, 1, 2, 2], 3, &full_edges(3)).unwrap();
        let y = eval(&s, &store, &x, &ctx);
        for i in 1..4 {
            assert_eq!(y.row(i), y.row(0));
        }
    }

    #[test]
    fn lone_segment_gives_zero() {
        let (store, s) = setup(2, 3, 4);
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ctx = SegContext::new(vec![0, 0], 1, &[]).unwrap();
        assert!(eval(&s, &store, &x, &ctx).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn point_order_within_segments_does_not_matter() {
        let (store, s) = setup(3, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::matrix(6, 3, (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let ctx = SegContext::new(vec![0, 1, 0, 1, 0, 1], 2, &full_edges(2)).unwrap();
        let a = eval(&s, &store, &x, &ctx);
        let perm = [4, 3, 2, 5, 0, 1];
        let xp = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let b = eval(&s, &store, &xp, &ctx);
        for (k, &i) in perm.iter().enumerate() {
            for c in 0..2 {
                assert!((a.at(i, c) - b.at(k, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_segment_is_rejected() {
        assert!(SegContext::new(vec![0, 2], 3, &[]).is_err());
        assert!(SegContext::new(vec![0, 1], 2, &[(1, 1)]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (store, s) = setup(3, 2, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::matrix(7, 3, (0..21).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let ctx = SegContext::new(vec![0, 1, 2, 0, 1, 2, 1], 3, &full_edges(3)).unwrap();
        let mut inputs = vec![x];
        inputs.extend(store.params().iter().map(|p| p.value.clone()));
        let out = finite_difference_check(
            |g, v| {
                bind_all(g, &store, &v[1..]);
                s.forward(g, &store, v[0], &ctx)
            },
            &inputs,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(out.max_rel_error < 1e-5);
    }
}
