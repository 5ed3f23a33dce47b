//! Finite-difference gradient checks of every trainable component in 64-bit.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::Config;
use super::network::{InputSeeds, Network};
use crate::blocks::{bind_all, corr_table, Attention, BranchMode, ConvTables, HybridBlock, KpConv, SegContext, SegEcc};
use crate::error::{Error, Result};
use crate::kernel::init_kernel_points;
use crate::spatial::{build_pyramid, radius_search, LevelSpec, SphereBatch};
use crate::tensor::gradcheck::{finite_difference_check, GradCheckOptions, GradCheckOutcome};
use crate::tensor::{LossForm, ParamId, ParamStore, Tensor};

pub const CHECKS: [&str; 9] = [
    "kpconv3d",
    "kpconv2d",
    "hybrid_block",
    "segecc",
    "spatial_attention",
    "channel_attention",
    "attention_head",
    "weighted_cross_entropy",
    "network",
];

pub const TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub seed: u64,
    pub outcome: Result<GradCheckOutcome, String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.outcome.is_ok()
    }
}

fn opts(seed: u64, max_coords: Option<usize>) -> GradCheckOptions {
    GradCheckOptions {
        tolerance: TOLERANCE,
        seed,
        max_coords,
        ..GradCheckOptions::default()
    }
}

fn random_points(n: usize, extent: [f64; 3], rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            [
                rng.gen_range(0.0..extent[0]),
                rng.gen_range(0.0..extent[1]),
                rng.gen_range(0.0..extent[2]),
            ]
        })
        .collect()
}

fn random_tensor(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn with_params(x: Vec<Tensor<f64>>, store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    let mut v = x;
    v.extend(store.params().iter().map(|p| p.value.clone()));
    v
}

fn set_scalar(store: &mut ParamStore<f64>, id: ParamId, v: f64) {
    store.get_mut(id).value = Tensor::full(&[1], v);
}

fn kpconv(dim: usize, seed: u64) -> Result<GradCheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = random_points(14, [2.0, 2.0, 1.0], &mut rng);
    let nb = radius_search(&pts, &pts, 1.0, None, seed);
    let layout = init_kernel_points(if dim == 3 { 15 } else { 17 }, dim, 0)?;
    let table = Arc::new(corr_table::<f64>(&pts, &pts, &nb, &layout, 1.0, 0.6)?);
    let mut store = ParamStore::new();
    let conv = KpConv::new(&mut store, "k", layout.len(), 3, 4, &mut rng);
    let inputs = with_params(vec![random_tensor(14, 3, &mut rng)], &store);
    finite_difference_check(
        |g, v| {
            bind_all(g, &store, &v[1..]);
            conv.forward(g, &store, v[0], &table)
        },
        &inputs,
        &opts(seed, None),
    )
}

fn hybrid(seed: u64) -> Result<GradCheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = random_points(16, [3.0, 3.0, 1.0], &mut rng);
    let levels = build_pyramid(&pts, &[LevelSpec::new(0.3, 0.9), LevelSpec::new(0.9, 1.5)], seed)?;
    let (l3, l2) = (init_kernel_points(15, 3, 0)?, init_kernel_points(17, 2, 0)?);
    let top = &levels[1];
    let tables = ConvTables::<f64>::build(
        &top.points,
        &levels[0].points,
        top.strided_neighbors.as_ref().unwrap(),
        &l3,
        &l2,
        top.radius,
        0.6 * top.radius,
        Some(top.pool_indices.clone()),
    )?;
    let mut store = ParamStore::new();
    let block = HybridBlock::new(&mut store, "b", 3, 8, true, BranchMode::Hybrid, 15, 17, &mut rng);
    let inputs = with_params(vec![random_tensor(pts.len(), 3, &mut rng)], &store);
    finite_difference_check(
        |g, v| {
            bind_all(g, &store, &v[1..]);
            block.forward(g, &store, v[0], &tables)
        },
        &inputs,
        &opts(seed, Some(40)),
    )
}

fn segecc(seed: u64) -> Result<GradCheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seg: Vec<usize> = (0..9).map(|i| i % 4).collect();
    let edges: Vec<(usize, usize)> = (0..4)
        .flat_map(|i| (0..4).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    let ctx = SegContext::new(seg, 4, &edges)?;
    let mut store = ParamStore::new();
    let s = SegEcc::new(&mut store, "s", 3, 3, 5, &mut rng);
    let inputs = with_params(vec![random_tensor(9, 3, &mut rng)], &store);
    finite_difference_check(
        |g, v| {
            bind_all(g, &store, &v[1..]);
            s.forward(g, &store, v[0], &ctx)
        },
        &inputs,
        &opts(seed, None),
    )
}

fn attention(which: &str, seed: u64) -> Result<GradCheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let a = Attention::new(&mut store, "a", 4, 3, true, &mut rng);
    set_scalar(&mut store, a.alpha, rng.gen_range(0.2..0.8));
    set_scalar(&mut store, a.beta, rng.gen_range(-0.8..-0.2));
    let inputs = with_params(vec![random_tensor(7, 4, &mut rng)], &store);
    let subsets = vec![vec![0, 2, 3, 5], vec![1, 4]];
    finite_difference_check(
        |g, v| {
            bind_all(g, &store, &v[1..]);
            match which {
                "spatial" => a.spatial(g, &store, v[0]),
                "channel" => a.channel(g, &store, v[0]),
                _ => a.forward(g, &store, v[0], &subsets),
            }
        },
        &inputs,
        &opts(seed, None),
    )
}

fn cross_entropy(seed: u64) -> Result<GradCheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = random_tensor(6, 4, &mut rng);
    let labels = Arc::new(vec![0u8, 3, 1, crate::cloud::UNLABELED, 2, 3]);
    let w: Vec<f64> = (0..4).map(|_| rng.gen_range(0.1..1.0)).collect();
    let mut worst = GradCheckOutcome {
        max_rel_error: 0.0,
        coordinates: 0,
    };
    for form in [LossForm::Categorical, LossForm::PerClassBinary] {
        let o = finite_difference_check(
            |g, v| {
                let p = g.softmax_rows(v[0])?;
                g.weighted_cross_entropy(p, labels.clone(), &w, form)
            },
            std::slice::from_ref(&logits),
            &opts(seed, None),
        )?;
        worst.max_rel_error = worst.max_rel_error.max(o.max_rel_error);
        worst.coordinates += o.coordinates;
    }
    Ok(worst)
}

/// Tiny configuration used for the whole-network check.
pub fn tiny_network_config() -> Config {
    let mut c = Config::desk();
    c.network.levels.truncate(2);
    c.network.widths = vec![6, 8];
    c.network.segecc_levels = vec![1, 2];
    c.network.segecc_channels = 3;
    c.network.segecc_hidden = 4;
    c.network.attention_cap = 30;
    c
}

/// Training loss of the whole network with respect to the input features
/// and every parameter.
fn network(seed: u64) -> Result<GradCheckOutcome> {
    let cfg = tiny_network_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = random_points(50, [2.5, 2.5, 0.8], &mut rng);
    let inten: Vec<f64> = (0..50).map(|_| rng.gen_range(0.0..1.0)).collect();
    let segs: Vec<u32> = pts.iter().map(|p| (p[0] > 1.2) as u32 + 2 * (p[1] > 1.2) as u32).collect();
    let mut store = ParamStore::<f64>::new();
    let net = Network::new(&cfg.network, 3, &mut store, &mut rng)?;
    for id in [net.head.alpha, net.head.beta] {
        set_scalar(&mut store, id, rng.gen_range(0.2..0.6));
    }
    let batch = SphereBatch::single(build_pyramid(&pts, &cfg.network.levels, seed)?);
    let input = net.prepare::<f64>(&batch, &inten, Some(&segs), 80, InputSeeds { edges: seed, attention: seed })?;
    let labels = Arc::new((0..50).map(|_| rng.gen_range(0..3u8)).collect::<Vec<_>>());
    let weights: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..1.0)).collect();
    let inputs = with_params(vec![input.features.clone()], &store);
    finite_difference_check(
        |g, v| {
            bind_all(g, &store, &v[1..]);
            let logits = net.forward_from(g, &store, v[0], &input)?;
            let probs = g.softmax_rows(logits)?;
            g.weighted_cross_entropy(probs, labels.clone(), &weights, LossForm::Categorical)
        },
        &inputs,
        &opts(seed, Some(6)),
    )
}

/// Runs one named check for one seed.
pub fn run_check(name: &str, seed: u64) -> Result<GradCheckOutcome> {
    match name {
        "kpconv3d" => kpconv(3, seed),
        "kpconv2d" => kpconv(2, seed),
        "hybrid_block" => hybrid(seed),
        "segecc" => segecc(seed),
        "spatial_attention" => attention("spatial", seed),
        "channel_attention" => attention("channel", seed),
        "attention_head" => attention("head", seed),
        "weighted_cross_entropy" => cross_entropy(seed),
        "network" => network(seed),
        other => Err(Error::InvalidArgument(format!(
            "unknown gradient check `{other}` (known: {})",
            CHECKS.join(", ")
        ))),
    }
}

/// Runs `names` over seeds `0..seeds`.
pub fn run_suite(names: &[&'static str], seeds: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    for &name in names {
        for seed in 0..seeds {
            out.push(CheckResult {
                name,
                seed,
                outcome: run_check(name, seed).map_err(|e| e.to_string()),
            });
        }
    }
    out
}
