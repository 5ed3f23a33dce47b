use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lgenet::blocks::{corr_table, Attention, KpConv, SegContext, SegEcc};
use lgenet::exec;
use lgenet::kernel::init_kernel_points;
use lgenet::segment::{knn_adjacency, partition_features, partition_objective, FEATURE_DIM};
use lgenet::spatial::{grid_subsample_points, radius_search, KdTree};
use lgenet::tensor::{Graph, ParamStore, Tensor};

fn pts(seed: u64, n: usize) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0)])
        .collect()
}

fn matrix(seed: u64, r: usize, c: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn radius_search_is_exact(seed in any::<u64>(), n in 1usize..200, r in 0.05f64..1.5) {
        let support = pts(seed, n);
        let queries = pts(seed ^ 1, 20);
        let nb = radius_search(&queries, &support, r, None, 0);
        for (q, p) in queries.iter().enumerate() {
            let got: BTreeSet<usize> = nb.valid(q).collect();
            let want: BTreeSet<usize> = (0..n)
                .filter(|&j| (0..3).map(|k| (support[j][k] - p[k]).powi(2)).sum::<f64>() <= r * r)
                .collect();
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn truncated_neighbors_are_a_subset(seed in any::<u64>(), cap in 1usize..10) {
        let support = pts(seed, 150);
        let full = radius_search(&support, &support, 0.8, None, 3);
        let cut = radius_search(&support, &support, 0.8, Some(cap), 3);
        for q in 0..support.len() {
            let a: BTreeSet<usize> = full.valid(q).collect();
            let b: BTreeSet<usize> = cut.valid(q).collect();
            prop_assert!(b.is_subset(&a));
            prop_assert_eq!(b.len(), a.len().min(cap));
        }
    }

    #[test]
    fn grid_output_has_one_point_per_cell(seed in any::<u64>(), cell in 0.05f64..1.0) {
        let p = pts(seed, 300);
        let (out, of_point) = grid_subsample_points(&p, cell).unwrap();
        prop_assert_eq!(of_point.len(), p.len());
        let keys: BTreeSet<[i64; 3]> = out
            .iter()
            .map(|q| [(q[0] / cell).floor() as i64, (q[1] / cell).floor() as i64, (q[2] / cell).floor() as i64])
            .collect();
        prop_assert_eq!(keys.len(), out.len());
    }

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>(), n in 2usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let att = Attention::new(&mut store, "a", 5, 2, true, &mut rng);
        let mut g = Graph::new(false);
        let f = g.constant(matrix(seed, n, 5));
        let (sa, _) = att.spatial_parts(&mut g, &store, f).unwrap();
        let (ca, _) = att.channel_parts(&mut g, &store, f).unwrap();
        for w in [g.value(sa), g.value(ca)] {
            for i in 0..w.rows() {
                prop_assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(w.row(i).iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn zero_scaled_attention_is_identity(seed in any::<u64>(), n in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let att = Attention::new(&mut store, "a", 4, 2, true, &mut rng);
        let x = matrix(seed, n, 4);
        let mut g = Graph::new(false);
        let f = g.constant(x.clone());
        let s = att.spatial(&mut g, &store, f).unwrap();
        let c = att.channel(&mut g, &store, f).unwrap();
        prop_assert_eq!(g.value(s).data(), x.data());
        prop_assert_eq!(g.value(c).data(), x.data());
    }

    #[test]
    fn kpconv_ignores_neighbor_order(seed in any::<u64>(), dim in 2usize..=3) {
        let support = pts(seed, 60);
        let centers = pts(seed ^ 2, 15);
        let mut nb = radius_search(&centers, &support, 0.9, None, 0);
        let layout = init_kernel_points(if dim == 3 { 15 } else { 17 }, dim, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let conv = KpConv::new(&mut store, "c", layout.len(), 3, 2, &mut rng);
        let x = matrix(seed, support.len(), 3);
        let eval = |nb: &lgenet::spatial::NeighborLists| {
            let t = Arc::new(corr_table::<f64>(&centers, &support, nb, &layout, 0.9, 0.4).unwrap());
            let mut g = Graph::new(false);
            let xv = g.constant(x.clone());
            let y = conv.forward(&mut g, &store, xv, &t).unwrap();
            g.value(y).clone()
        };
        let a = eval(&nb);
        let w = nb.width;
        for q in 0..centers.len() {
            nb.indices[q * w..(q + 1) * w].reverse();
        }
        let b = eval(&nb);
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn segecc_is_invariant_to_segment_relabeling(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let block = SegEcc::new(&mut store, "s", 3, 2, 4, &mut rng);
        let seg: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let full: Vec<(usize, usize)> = (0..3).flat_map(|i| (0..3).filter(move |&j| j != i).map(move |j| (i, j))).collect();
        let perm = [2usize, 0, 1];
        let seg_p: Vec<usize> = seg.iter().map(|&s| perm[s]).collect();
        let edges_p: Vec<(usize, usize)> = full.iter().map(|&(i, j)| (perm[i], perm[j])).collect();
        let x = matrix(seed, 12, 3);
        let eval = |seg: Vec<usize>, edges: &[(usize, usize)]| {
            let ctx = SegContext::new(seg, 3, edges).unwrap();
            let mut g = Graph::new(false);
            let xv = g.constant(x.clone());
            let y = block.forward(&mut g, &store, xv, &ctx).unwrap();
            g.value(y).clone()
        };
        let a = eval(seg, &full);
        let b = eval(seg_p, &edges_p);
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn partition_objective_never_rises(seed in any::<u64>(), lambda in 0.0f64..0.5) {
        let p = pts(seed, 120);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f: Vec<[f64; FEATURE_DIM]> = (0..p.len()).map(|_| std::array::from_fn(|_| rng.gen_range(0.0..1.0))).collect();
        let edges = knn_adjacency(&KdTree::new(&p), 5);
        let part = partition_features(&f, &edges, lambda).unwrap();
        prop_assert!(part.objective_trace.windows(2).all(|w| w[1] <= w[0]));
        let direct = partition_objective(&f, &edges, &part.labels, lambda);
        prop_assert!((direct - part.objective_trace.last().unwrap()).abs() < 1e-8);
        let singletons: Vec<u32> = (0..p.len() as u32).collect();
        prop_assert!(direct <= partition_objective(&f, &edges, &singletons, lambda) + 1e-9);
    }

    #[test]
    fn parallel_and_sequential_agree(seed in any::<u64>()) {
        let support = pts(seed, 400);
        let a = radius_search(&support, &support, 0.5, Some(8), seed);
        let b = exec::sequential(|| radius_search(&support, &support, 0.5, Some(8), seed));
        prop_assert_eq!(a, b);
    }
}
