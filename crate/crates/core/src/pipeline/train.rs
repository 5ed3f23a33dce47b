//! Sphere-sampled SGD training.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;

use super::checkpoint::Checkpoint;
use super::config::Config;
use crate::cloud::{DatasetManifest, PointCloud, Split, UNLABELED};
use crate::error::{Error, Result};
use crate::segment::segment_cloud;
use crate::spatial::{
    augment, build_pyramid, grid_subsample, grid_subsample_points, neighbor_count_quantile_over, KdTree,
    SphereBatch,
};
use crate::tensor::{compute_class_weights, sgd_step, Graph, Real};

use super::network::{InputSeeds, NetInput};

/// Subsamples a cloud at the first level's grid and partitions it when the
/// network needs segments and the cloud carries none.
pub fn prepare_cloud(cloud: &PointCloud, config: &Config, intensity_max: f64) -> Result<PointCloud> {
    cloud.validate()?;
    let mut sub = grid_subsample(cloud, config.network.levels[0].grid)?.cloud;
    if !config.network.segecc_levels.is_empty() && !sub.has_segments() {
        let n = segment_cloud(&mut sub, intensity_max, config.segment.reg, config.segment.k_adj)?;
        log::info!("partitioned {} points into {n} segments", sub.len());
    }
    Ok(sub)
}

/// Sets every level's neighbor caps to the configured quantile of neighbor
/// counts over `clouds` (already subsampled at the first grid).
pub fn calibrate_neighbors(config: &mut Config, clouds: &[PointCloud]) {
    let q = config.train.neighbor_quantile;
    let levels = &mut config.network.levels;
    let mut caps = vec![(1usize, 1usize); levels.len()];
    for cloud in clouds {
        let mut prev: Option<(Vec<[f64; 3]>, KdTree)> = None;
        for (l, spec) in levels.iter().enumerate() {
            let pts = match &prev {
                None => cloud.positions.clone(),
                Some((p, _)) => grid_subsample_points(p, spec.grid).map(|r| r.0).unwrap_or_default(),
            };
            if pts.is_empty() {
                break;
            }
            let tree = KdTree::new(&pts);
            caps[l].0 = caps[l].0.max(neighbor_count_quantile_over(&tree, &pts, spec.radius, q));
            if let Some((_, pt)) = &prev {
                caps[l].1 = caps[l].1.max(neighbor_count_quantile_over(pt, &pts, spec.radius, q));
            }
            prev = Some((pts, tree));
        }
    }
    for (l, (spec, (own, strided))) in levels.iter_mut().zip(caps).enumerate() {
        spec.max_neighbors = Some(own);
        spec.max_strided_neighbors = (l > 0).then_some(strided);
    }
}

struct TrainCloud {
    cloud: PointCloud,
    intensity: Vec<f64>,
    tree: KdTree,
}

#[derive(Clone, Debug)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub seconds: f64,
}

/// Owns a model in training and the prepared training clouds.
pub struct Trainer<T: Real> {
    pub checkpoint: Checkpoint<T>,
    clouds: Vec<TrainCloud>,
    weights: Vec<T>,
    /// `(cloud, point)` pairs per class, for class-balanced sphere centers.
    by_class: Vec<Vec<(usize, usize)>>,
    pub step: usize,
}

impl<T: Real> Trainer<T> {
    /// `clouds` must already be prepared with [`prepare_cloud`].
    pub fn new(checkpoint: Checkpoint<T>, clouds: Vec<PointCloud>) -> Result<Self> {
        let c = checkpoint.classes.len();
        if clouds.is_empty() {
            return Err(Error::InvalidArgument("no training clouds".into()));
        }
        let mut counts = vec![0u64; c];
        let mut by_class = vec![Vec::new(); c];
        for (ci, cloud) in clouds.iter().enumerate() {
            cloud.check_labels(c)?;
            for (i, &l) in cloud.label.iter().enumerate() {
                if l != UNLABELED {
                    counts[l as usize] += 1;
                    by_class[l as usize].push((ci, i));
                }
            }
        }
        let floor = checkpoint.config.train.class_count_floor;
        let floored: Vec<u64> = counts.iter().map(|&n| n.max(floor)).collect();
        let power = checkpoint.config.train.class_weight_power;
        let base: Vec<f64> = compute_class_weights(&floored)?.into_iter().map(|w| w.powf(power)).collect();
        let total: f64 = base.iter().sum();
        let weights = base.iter().map(|w| T::lit(w / total)).collect();
        let im = checkpoint.intensity_max;
        let clouds = clouds
            .into_iter()
            .map(|cloud| TrainCloud {
                intensity: cloud.normalized_intensity(im),
                tree: KdTree::new(&cloud.positions),
                cloud,
            })
            .collect();
        let step = checkpoint.epoch * checkpoint.config.train.iterations_per_epoch;
        Ok(Trainer {
            checkpoint,
            clouds,
            weights,
            by_class,
            step,
        })
    }

    pub fn class_weights(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w.as_f64()).collect()
    }

    /// Samples one training batch: pyramid inputs plus the level-0 labels.
    fn sample_batch(&mut self, balanced: bool) -> Result<(NetInput<T>, Vec<u8>)> {
        let ck = &mut self.checkpoint;
        let cfg = &ck.config;
        let (edge_seed, attn_seed): (u64, u64) = (ck.rng.gen(), ck.rng.gen());
        let mut pyramids = Vec::with_capacity(cfg.train.spheres_per_batch);
        let (mut intensity, mut labels, mut segments) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..cfg.train.spheres_per_batch {
            let (ci, pi) = if balanced {
                // Pick a class uniformly, then a point of it: inverse-frequency
                // biased centers.
                let present: Vec<usize> = (0..self.by_class.len()).filter(|&k| !self.by_class[k].is_empty()).collect();
                let k = present[ck.rng.gen_range(0..present.len())];
                self.by_class[k][ck.rng.gen_range(0..self.by_class[k].len())]
            } else {
                let ci = ck.rng.gen_range(0..self.clouds.len());
                (ci, ck.rng.gen_range(0..self.clouds[ci].cloud.len()))
            };
            let tc = &self.clouds[ci];
            let center = tc.cloud.positions[pi];
            let idx = tc.tree.radius(&center, cfg.train.sphere_radius);
            let pts: Vec<[f64; 3]> = idx.iter().map(|&i| tc.cloud.positions[i]).collect();
            let pts = augment(&pts, &center, ck.rng.gen(), cfg.train.jitter);
            pyramids.push(build_pyramid(&pts, &cfg.network.levels, ck.rng.gen())?);
            intensity.extend(idx.iter().map(|&i| tc.intensity[i]));
            labels.extend(idx.iter().map(|&i| tc.cloud.label[i]));
            segments.extend(idx.iter().map(|&i| tc.cloud.segment[i]));
        }
        let batch = SphereBatch::stack(pyramids)?;
        let input = ck.network.prepare::<T>(
            &batch,
            &intensity,
            Some(&segments),
            cfg.train.max_edges,
            InputSeeds {
                edges: edge_seed,
                attention: attn_seed,
            },
        )?;
        Ok((input, labels))
    }

    /// One SGD step at learning rate `lr`; returns the loss.
    pub fn train_step(&mut self, lr: f64) -> Result<f64> {
        let (input, labels) = self.sample_batch(self.checkpoint.config.train.balanced_centers)?;
        let ck = &mut self.checkpoint;
        let cfg = &ck.config;
        let mut g = Graph::new(true);
        let logits = ck.network.forward(&mut g, &ck.store, &input)?;
        let probs = g.softmax_rows(logits)?;
        let loss = g.weighted_cross_entropy(probs, Arc::new(labels), &self.weights, cfg.train.loss)?;
        let value = g.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                loss: value,
            });
        }
        let grads = g.backward(loss)?;
        ck.store.zero_grad();
        ck.store.accumulate(&g, &grads);
        sgd_step(&mut ck.store, T::lit(lr), T::lit(cfg.train.momentum))?;
        ck.store.apply_bn_updates(g.bn_updates(), T::lit(cfg.train.bn_momentum));
        self.step += 1;
        Ok(value)
    }

    /// Replaces the running normalization statistics with the plain average
    /// of batch statistics over `batches` uniformly centered batches, with
    /// parameters frozen.
    pub fn refresh_bn_stats(&mut self, batches: usize) -> Result<()> {
        if batches == 0 {
            return Ok(());
        }
        let mut sums: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; self.checkpoint.store.buffers().len()];
        for _ in 0..batches {
            let (input, _) = self.sample_batch(false)?;
            let ck = &self.checkpoint;
            let mut g = Graph::new(true);
            ck.network.forward(&mut g, &ck.store, &input)?;
            for u in g.bn_updates() {
                let (m, v) = sums[u.buffer.0].get_or_insert_with(|| (vec![0.0; u.mean.len()], vec![0.0; u.var.len()]));
                m.iter_mut().zip(&u.mean).for_each(|(a, b)| *a += b.as_f64());
                v.iter_mut().zip(&u.var).for_each(|(a, b)| *a += b.as_f64());
            }
        }
        let n = batches as f64;
        for (buf, sum) in self.checkpoint.store.buffers_mut().iter_mut().zip(sums) {
            if let Some((m, v)) = sum {
                buf.mean = m.iter().map(|x| T::lit(x / n)).collect();
                buf.var = v.iter().map(|x| T::lit(x / n)).collect();
            }
        }
        Ok(())
    }

    pub fn run_epoch(&mut self) -> Result<EpochReport> {
        let start = Instant::now();
        let epoch = self.checkpoint.epoch;
        let lr = self.checkpoint.config.train.lr.at(epoch);
        let iters = self.checkpoint.config.train.iterations_per_epoch;
        let mut total = 0.0;
        for _ in 0..iters {
            total += self.train_step(lr)?;
        }
        self.refresh_bn_stats(self.checkpoint.config.train.bn_refresh_batches)?;
        self.checkpoint.epoch += 1;
        Ok(EpochReport {
            epoch,
            lr,
            mean_loss: total / iters as f64,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Written after every epoch.
    pub checkpoint_path: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

/// Loads and prepares the manifest's training clouds, calibrates neighbor
/// caps when the config lacks them, and trains for the configured epochs.
pub fn train(
    manifest: &DatasetManifest,
    mut config: Config,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<Checkpoint<f32>> {
    config.validate()?;
    let mut clouds = Vec::new();
    for path in manifest.files_in(Split::Train) {
        let raw = manifest.load_cloud(&path)?;
        clouds.push(prepare_cloud(&raw, &config, manifest.intensity_max)?);
    }
    if clouds.is_empty() {
        return Err(Error::Config("manifest lists no training files".into()));
    }
    let checkpoint = match &opts.resume {
        Some(p) => {
            let ck = Checkpoint::<f32>::load(p)?;
            if ck.classes != manifest.classes {
                return Err(Error::Config("checkpoint classes differ from the manifest".into()));
            }
            ck
        }
        None => {
            if !config.is_calibrated() {
                calibrate_neighbors(&mut config, &clouds);
                log::info!("calibrated neighbor caps: {:?}", config.network.levels);
            }
            Checkpoint::initialize(config, manifest.classes.clone(), manifest.intensity_max)?
        }
    };
    let mut trainer = Trainer::new(checkpoint, clouds)?;
    while trainer.checkpoint.epoch < trainer.checkpoint.config.train.epochs {
        let report = trainer.run_epoch()?;
        on_epoch(&report);
        if let Some(p) = &opts.checkpoint_path {
            trainer.checkpoint.save(p)?;
        }
    }
    Ok(trainer.checkpoint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::synth_scene;
    use crate::exec;

    fn tiny() -> Config {
        let mut c = Config::desk();
        c.network.levels.truncate(2);
        c.network.widths = vec![8, 16];
        c.network.segecc_levels = vec![2];
        c.network.segecc_channels = 4;
        c.network.segecc_hidden = 8;
        c.network.attention_cap = 64;
        c.train.sphere_radius = 4.0;
        c.train.iterations_per_epoch = 2;
        c.train.epochs = 1;
        c
    }

    fn setup(cfg: &Config) -> Trainer<f32> {
        let raw = synth_scene(3, 30.0, 2.0).unwrap();
        let cloud = prepare_cloud(&raw, cfg, 255.0).unwrap();
        let mut cfg = cfg.clone();
        calibrate_neighbors(&mut cfg, std::slice::from_ref(&cloud));
        let names = crate::cloud::SynthClass::NAMES.iter().map(|s| s.to_string()).collect();
        let ck = Checkpoint::initialize(cfg, names, 255.0).unwrap();
        Trainer::new(ck, vec![cloud]).unwrap()
    }

    #[test]
    fn calibration_sets_every_cap() {
        let cfg = tiny();
        let t = setup(&cfg);
        assert!(t.checkpoint.config.is_calibrated());
    }

    #[test]
    fn a_step_moves_every_parameter_with_a_gradient() {
        let mut t = setup(&tiny());
        let before = t.checkpoint.store.clone();
        t.train_step(0.01).unwrap();
        let after = &t.checkpoint.store;
        for (b, a) in before.params().iter().zip(after.params()) {
            let has_grad = a.grad.data().iter().any(|&g| g != 0.0);
            if has_grad {
                assert_ne!(a.value, b.value, "{} did not move", a.name);
            } else {
                assert_eq!(a.value, b.value);
            }
        }
    }

    #[test]
    fn fixed_seeds_repeat_the_loss_trajectory() {
        let run = || {
            exec::sequential(|| {
                let mut t = setup(&tiny());
                (0..10).map(|_| t.train_step(0.01).unwrap()).collect::<Vec<_>>()
            })
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn empty_class_needs_a_floor() {
        let mut cfg = tiny();
        let raw = synth_scene(3, 30.0, 2.0).unwrap();
        let mut cloud = prepare_cloud(&raw, &cfg, 255.0).unwrap();
        calibrate_neighbors(&mut cfg, std::slice::from_ref(&cloud));
        cloud.label.iter_mut().filter(|l| **l == 3).for_each(|l| *l = 0);
        let names: Vec<String> = crate::cloud::SynthClass::NAMES.iter().map(|s| s.to_string()).collect();
        let ck = Checkpoint::<f32>::initialize(cfg.clone(), names.clone(), 255.0).unwrap();
        assert!(matches!(
            Trainer::new(ck, vec![cloud.clone()]),
            Err(Error::EmptyClass { class: 3 })
        ));
        cfg.train.class_count_floor = 1;
        let ck = Checkpoint::<f32>::initialize(cfg, names, 255.0).unwrap();
        let mut t = Trainer::new(ck, vec![cloud]).unwrap();
        assert!(t.train_step(0.01).unwrap().is_finite());
    }
}
