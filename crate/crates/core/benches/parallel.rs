use std::sync::Arc;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lgenet::blocks::{corr_table, KpConv};
use lgenet::exec;
use lgenet::kernel::init_kernel_points;
use lgenet::spatial::radius_search;
use lgenet::tensor::{matmul_into, Graph, ParamStore, Tensor};

fn points(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| [rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0), rng.gen_range(0.0..4.0)])
        .collect()
}

/// Runs `f` once per mode under the same benchmark group.
fn both<F: Fn() + Copy>(c: &mut Criterion, group: &str, f: F) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    g.bench_function(BenchmarkId::from_parameter("parallel"), |b| b.iter(f));
    g.bench_function(BenchmarkId::from_parameter("sequential"), |b| b.iter(|| exec::sequential(f)));
    g.finish();
}

fn bench_matmul(c: &mut Criterion) {
    let (m, k, n) = (2048, 256, 128);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    both(c, "matmul_2048x256x128", || {
        let mut out = vec![0.0f32; m * n];
        matmul_into(&a, &b, &mut out, m, k, n);
        black_box(out);
    });
}

fn bench_neighbors(c: &mut Criterion) {
    let pts = points(20_000, 2);
    both(c, "radius_search_20k", || {
        black_box(radius_search(&pts, &pts, 0.6, Some(40), 0));
    });
}

fn bench_kpconv(c: &mut Criterion) {
    let pts = points(8_000, 3);
    let nb = radius_search(&pts, &pts, 0.6, Some(40), 0);
    let layout = init_kernel_points(15, 3, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f32>::new();
    let conv = KpConv::new(&mut store, "c", 15, 32, 32, &mut rng);
    let x = Tensor::<f32>::matrix(pts.len(), 32, (0..pts.len() * 32).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    both(c, "kpconv_forward_8k", || {
        let table = Arc::new(corr_table::<f32>(&pts, &pts, &nb, &layout, 0.6, 0.36).unwrap());
        let mut g = Graph::new(false);
        let xv = g.constant(x.clone());
        black_box(conv.forward(&mut g, &store, xv, &table).unwrap());
    });
}

criterion_group!(benches, bench_matmul, bench_neighbors, bench_kpconv);
criterion_main!(benches);
