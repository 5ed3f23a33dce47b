//! Encoder-decoder assembly and per-batch input preparation.

use std::sync::Arc;

use rand::Rng;

use super::config::NetworkConfig;
use crate::blocks::{attention_subsample, Attention, ConvTables, HybridBlock, SegContext, SegEcc, Unary};
use crate::error::{Error, Result};
use crate::kernel::{init_kernel_points, KernelLayout};
use crate::segment::build_edges;
use crate::spatial::{assemble_input_features, SphereBatch};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

/// Number of input feature channels: constant one, intensity, height and
/// height normalized within the sphere.
pub const INPUT_CHANNELS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLevel {
    /// Strided on every level but the first.
    pub first: HybridBlock,
    pub second: HybridBlock,
    pub segecc: Option<SegEcc>,
    pub out_width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub classes: usize,
    pub layout3: KernelLayout,
    pub layout2: KernelLayout,
    pub encoder: Vec<EncoderLevel>,
    /// `decoder[l]` produces level `l` features from level `l + 1`.
    pub decoder: Vec<Unary>,
    pub head: Attention,
}

/// Everything a forward pass needs besides parameters.
#[derive(Clone, Debug)]
pub struct NetInput<T> {
    pub features: Tensor<T>,
    pub self_tables: Vec<ConvTables<T>>,
    /// `None` on level 0.
    pub strided_tables: Vec<Option<ConvTables<T>>>,
    /// `up[l]` maps rows of level `l - 1` to rows of level `l` (empty on level 0).
    pub up: Vec<Arc<Vec<usize>>>,
    pub segments: Vec<Option<SegContext>>,
    pub attention_rows: Vec<Vec<usize>>,
}

/// Seeds for the random parts of input preparation.
#[derive(Clone, Copy, Debug, Default)]
pub struct InputSeeds {
    pub edges: u64,
    pub attention: u64,
}

impl Network {
    /// Computes both kernel layouts, then builds the network.
    pub fn new<T: Real, R: Rng>(
        config: &NetworkConfig,
        classes: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let l3 = init_kernel_points(config.kernels_3d, 3, config.kernel_seed)?;
        let l2 = init_kernel_points(config.kernels_2d, 2, config.kernel_seed)?;
        Self::build(config, classes, l3, l2, store, rng)
    }

    pub fn build<T: Real, R: Rng>(
        config: &NetworkConfig,
        classes: usize,
        layout3: KernelLayout,
        layout2: KernelLayout,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        if layout3.len() != config.kernels_3d || layout2.len() != config.kernels_2d {
            return Err(Error::Config("kernel layouts do not match the kernel counts".into()));
        }
        let (k3, k2) = (config.kernels_3d, config.kernels_2d);
        let mode = config.branch_mode;
        let mut encoder = Vec::with_capacity(config.widths.len());
        let mut cin = INPUT_CHANNELS;
        for (l, &w) in config.widths.iter().enumerate() {
            let name = format!("enc{}", l + 1);
            let first = HybridBlock::new(store, &format!("{name}.a"), cin, w, l > 0, mode, k3, k2, rng);
            let second = HybridBlock::new(store, &format!("{name}.b"), w, w, false, mode, k3, k2, rng);
            let segecc = config.segecc_levels.contains(&(l + 1)).then(|| {
                SegEcc::new(
                    store,
                    &format!("{name}.segecc"),
                    w,
                    config.segecc_channels,
                    config.segecc_hidden,
                    rng,
                )
            });
            let out_width = w + segecc.as_ref().map_or(0, |s| s.cr);
            encoder.push(EncoderLevel {
                first,
                second,
                segecc,
                out_width,
            });
            cin = out_width;
        }
        let levels = encoder.len();
        let mut decoder = Vec::with_capacity(levels.saturating_sub(1));
        for l in 0..levels.saturating_sub(1) {
            let below = if l + 1 == levels - 1 {
                encoder[l + 1].out_width
            } else {
                config.widths[l + 1]
            };
            decoder.push(Unary::new(
                store,
                &format!("dec{}", l + 1),
                below + encoder[l].out_width,
                config.widths[l],
                rng,
            ));
        }
        let head_width = if levels == 1 {
            encoder[0].out_width
        } else {
            config.widths[0]
        };
        let head = Attention::new(store, "head", head_width, classes, config.attention, rng);
        Ok(Network {
            config: config.clone(),
            classes,
            layout3,
            layout2,
            encoder,
            decoder,
            head,
        })
    }

    pub fn levels(&self) -> usize {
        self.encoder.len()
    }

    pub fn uses_segments(&self) -> bool {
        self.encoder.iter().any(|e| e.segecc.is_some())
    }

    /// Builds correlation tables, segment graphs and attention subsets for a
    /// batch. `segments` holds level-0 segment ids (required when the network
    /// has SegECC blocks); ids only need to be distinct within a sphere.
    pub fn prepare<T: Real>(
        &self,
        batch: &SphereBatch,
        intensity: &[f64],
        segments: Option<&[u32]>,
        max_edges: usize,
        seeds: InputSeeds,
    ) -> Result<NetInput<T>> {
        if batch.levels.len() != self.levels() {
            return Err(Error::Shape(format!(
                "batch has {} levels, network {}",
                batch.levels.len(),
                self.levels()
            )));
        }
        let features = assemble_input_features(&batch.levels[0].points, intensity)?;
        let tables: Result<Vec<_>> = (0..self.levels())
            .map(|l| {
                let lv = &batch.levels[l];
                let sigma = self.config.sigma_factor * lv.grid;
                let own = ConvTables::build(
                    &lv.points,
                    &lv.points,
                    &lv.self_neighbors,
                    &self.layout3,
                    &self.layout2,
                    lv.radius,
                    sigma,
                    None,
                )?;
                let strided = match &lv.strided_neighbors {
                    Some(nb) if l > 0 => Some(ConvTables::build(
                        &lv.points,
                        &batch.levels[l - 1].points,
                        nb,
                        &self.layout3,
                        &self.layout2,
                        lv.radius,
                        sigma,
                        Some(lv.pool_indices.clone()),
                    )?),
                    _ => None,
                };
                Ok((own, strided))
            })
            .collect();
        let (self_tables, strided_tables) = tables?.into_iter().unzip();
        let up = (0..self.levels())
            .map(|l| {
                if l == 0 {
                    Arc::new(Vec::new())
                } else {
                    Arc::new(batch.levels[l].up_indices.clone())
                }
            })
            .collect();
        let seg_contexts = if self.uses_segments() {
            let ids = segments.ok_or_else(|| {
                Error::InvalidArgument("the network has SegECC blocks but the cloud has no segments".into())
            })?;
            self.segment_contexts(batch, ids, max_edges, seeds.edges)?
        } else {
            vec![None; self.levels()]
        };
        let ranges: Vec<_> = batch.offsets[0].windows(2).map(|w| w[0]..w[1]).collect();
        let attention_rows = if self.head.enabled {
            attention_subsample(&ranges, self.config.attention_cap, seeds.attention)
        } else {
            Vec::new()
        };
        Ok(NetInput {
            features,
            self_tables,
            strided_tables,
            up,
            segments: seg_contexts,
            attention_rows,
        })
    }

    fn segment_contexts(
        &self,
        batch: &SphereBatch,
        ids: &[u32],
        max_edges: usize,
        seed: u64,
    ) -> Result<Vec<Option<SegContext>>> {
        if ids.len() != batch.levels[0].len() {
            return Err(Error::Shape(format!(
                "{} segment ids for {} points",
                ids.len(),
                batch.levels[0].len()
            )));
        }
        let mut level_ids = ids.to_vec();
        let mut out = Vec::with_capacity(self.levels());
        for l in 0..self.levels() {
            if l > 0 {
                level_ids = batch.levels[l].pool_indices.iter().map(|&p| level_ids[p]).collect();
            }
            if self.encoder[l].segecc.is_none() {
                out.push(None);
                continue;
            }
            let mut seg_of_row = Vec::with_capacity(level_ids.len());
            let mut edges = Vec::new();
            let mut total = 0;
            for (s, w) in batch.offsets[l].windows(2).enumerate() {
                let level_seed = seed ^ ((l as u64) << 48) ^ ((s as u64) << 24);
                let g = build_edges(&level_ids[w[0]..w[1]], max_edges, level_seed)?;
                seg_of_row.extend(g.segment_of_point.iter().map(|&i| i + total));
                edges.extend(g.edges.iter().map(|&(i, j)| (i + total, j + total)));
                total += g.segments;
            }
            out.push(Some(SegContext::new(seg_of_row, total, &edges)?));
        }
        Ok(out)
    }

    /// Class logits, one row per level-0 point.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: &NetInput<T>) -> Result<Var> {
        let x = g.constant(input.features.clone());
        self.forward_from(g, store, x, input)
    }

    /// Like [`Network::forward`] with the input features supplied as a graph
    /// variable.
    pub fn forward_from<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mut x: Var,
        input: &NetInput<T>,
    ) -> Result<Var> {
        let mut skips = Vec::with_capacity(self.levels());
        for (l, enc) in self.encoder.iter().enumerate() {
            let first_tables = if l == 0 {
                &input.self_tables[0]
            } else {
                input.strided_tables[l]
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument(format!("level {l} has no strided tables")))?
            };
            x = enc.first.forward(g, store, x, first_tables)?;
            x = enc.second.forward(g, store, x, &input.self_tables[l])?;
            if let Some(seg) = &enc.segecc {
                let ctx = input.segments[l]
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument(format!("level {l} has no segment context")))?;
                let s = seg.forward(g, store, x, ctx)?;
                x = g.concat(&[x, s])?;
            }
            skips.push(x);
        }
        for l in (0..self.decoder.len()).rev() {
            let up = g.gather_rows(x, input.up[l + 1].clone())?;
            let cat = g.concat(&[up, skips[l]])?;
            x = self.decoder[l].forward(g, store, cat)?;
        }
        self.head.forward(g, store, x, &input.attention_rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::config::Config;
    use crate::spatial::build_pyramid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> NetworkConfig {
        let mut c = Config::desk().network;
        c.levels.truncate(2);
        c.widths = vec![8, 16];
        c.segecc_levels = vec![2];
        c.segecc_channels = 4;
        c.segecc_hidden = 6;
        c
    }

    fn sphere(n: usize, seed: u64) -> (Vec<[f64; 3]>, Vec<f64>, Vec<u32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0), rng.gen_range(0.0..0.5)])
            .collect();
        let inten = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let seg = pts.iter().map(|p| (p[0] > 1.5) as u32 + 2 * (p[1] > 1.5) as u32).collect();
        (pts, inten, seg)
    }

    #[test]
    fn forward_gives_one_row_of_logits_per_point() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let net = Network::new(&cfg, 4, &mut store, &mut rng).unwrap();
        let (pts, inten, seg) = sphere(100, 1);
        let batch = SphereBatch::single(build_pyramid(&pts, &cfg.levels, 0).unwrap());
        let input = net.prepare(&batch, &inten, Some(&seg), 80, InputSeeds::default()).unwrap();
        let mut g = Graph::new(true);
        let y = net.forward(&mut g, &store, &input).unwrap();
        assert_eq!(g.shape(y), &[100, 4]);
    }

    #[test]
    fn ablation_switches_change_topology() {
        let mut cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut full = ParamStore::<f64>::new();
        let net = Network::new(&cfg, 4, &mut full, &mut rng).unwrap();
        assert!(net.uses_segments() && net.head.enabled);
        cfg.segecc_levels.clear();
        cfg.attention = false;
        let mut plain = ParamStore::<f64>::new();
        let base = Network::new(&cfg, 4, &mut plain, &mut rng).unwrap();
        assert!(!base.uses_segments() && !base.head.enabled);
        assert!(base.encoder.iter().all(|e| e.segecc.is_none()));
        // The head keeps its unused attention parameters.
        assert!(plain.scalar_count() < full.scalar_count());
        let (pts, inten, _) = sphere(60, 2);
        let batch = SphereBatch::single(build_pyramid(&pts, &cfg.levels, 0).unwrap());
        let input = base.prepare(&batch, &inten, None, 80, InputSeeds::default()).unwrap();
        let mut g = Graph::new(false);
        let y = base.forward(&mut g, &plain, &input).unwrap();
        assert_eq!(g.shape(y), &[60, 4]);
    }

    #[test]
    fn missing_segments_are_reported() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let net = Network::new(&cfg, 3, &mut store, &mut rng).unwrap();
        let (pts, inten, _) = sphere(30, 3);
        let batch = SphereBatch::single(build_pyramid(&pts, &cfg.levels, 0).unwrap());
        assert!(net.prepare::<f64>(&batch, &inten, None, 80, InputSeeds::default()).is_err());
    }
}
