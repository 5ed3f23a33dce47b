//! Vote-averaged inference over overlapping spheres.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::network::InputSeeds;
use super::train::prepare_cloud;
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::exec;
use crate::spatial::{build_pyramid, KdTree, SphereBatch};
use crate::tensor::{softmax_rows, Graph, Real};

/// Running sums of class probabilities per point.
#[derive(Clone, Debug)]
pub struct VoteAccumulator {
    pub classes: usize,
    pub sums: Vec<f64>,
    pub votes: Vec<u32>,
}

impl VoteAccumulator {
    pub fn new(points: usize, classes: usize) -> Self {
        VoteAccumulator {
            classes,
            sums: vec![0.0; points * classes],
            votes: vec![0; points],
        }
    }

    /// Adds one probability row (`classes` wide) per entry of `rows`.
    pub fn add(&mut self, rows: &[usize], probs: &[f64]) {
        let c = self.classes;
        for (k, &i) in rows.iter().enumerate() {
            for j in 0..c {
                self.sums[i * c + j] += probs[k * c + j];
            }
            self.votes[i] += 1;
        }
    }

    pub fn min_votes(&self) -> u32 {
        self.votes.iter().copied().min().unwrap_or(0)
    }

    /// Mean probabilities; rows without votes stay zero.
    pub fn mean(&self) -> Vec<f64> {
        let c = self.classes;
        let mut out = self.sums.clone();
        for (i, &v) in self.votes.iter().enumerate() {
            if v > 0 {
                out[i * c..(i + 1) * c].iter_mut().for_each(|p| *p /= v as f64);
            }
        }
        out
    }
}

pub fn argmax_rows(probs: &[f64], classes: usize) -> Vec<u8> {
    probs
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (j, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = j;
                }
            }
            best as u8
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Prediction {
    /// The cloud subsampled at the first grid; votes are counted here.
    pub subsampled: PointCloud,
    /// Mean probabilities, `subsampled.len() x classes`, row major.
    pub probabilities: Vec<f64>,
    pub votes: Vec<u32>,
    pub subsampled_labels: Vec<u8>,
    /// Labels of the input points, by nearest subsampled point.
    pub labels: Vec<u8>,
    pub forward_passes: usize,
}

/// Feeds spheres centered on randomly chosen least-voted points until every
/// subsampled point has at least `min_votes` probability vectors, averages
/// them and transfers the argmax to the raw points.
pub fn predict_with_voting<T: Real>(
    model: &Checkpoint<T>,
    cloud: &PointCloud,
    min_votes: usize,
    seed: u64,
) -> Result<Prediction> {
    if min_votes == 0 {
        return Err(Error::InvalidArgument("min_votes must be >= 1".into()));
    }
    if cloud.is_empty() {
        return Err(Error::InvalidArgument("cannot predict an empty cloud".into()));
    }
    let cfg = &model.config;
    let net = &model.network;
    let c = model.classes.len();
    let sub = prepare_cloud(cloud, cfg, model.intensity_max)?;
    let intensity = sub.normalized_intensity(model.intensity_max);
    let tree = KdTree::new(&sub.positions);
    let mut acc = VoteAccumulator::new(sub.len(), c);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut passes = 0;
    loop {
        let least = acc.min_votes();
        if least as usize >= min_votes {
            break;
        }
        let candidates: Vec<usize> = (0..sub.len()).filter(|&i| acc.votes[i] == least).collect();
        let center = sub.positions[candidates[rng.gen_range(0..candidates.len())]];
        let idx = tree.radius(&center, cfg.train.sphere_radius);
        let pts: Vec<[f64; 3]> = idx.iter().map(|&i| sub.positions[i]).collect();
        let batch = SphereBatch::single(build_pyramid(&pts, &cfg.network.levels, rng.gen())?);
        let inten: Vec<f64> = idx.iter().map(|&i| intensity[i]).collect();
        let segs: Vec<u32> = idx.iter().map(|&i| sub.segment[i]).collect();
        let input = net.prepare::<T>(
            &batch,
            &inten,
            Some(&segs),
            cfg.train.max_edges,
            InputSeeds {
                edges: rng.gen(),
                attention: rng.gen(),
            },
        )?;
        let mut g = Graph::new(false);
        let logits = net.forward(&mut g, &model.store, &input)?;
        let probs = softmax_rows(g.value(logits))?;
        let probs: Vec<f64> = probs.data().iter().map(|p| p.as_f64()).collect();
        acc.add(&idx, &probs);
        passes += 1;
    }
    let probabilities = acc.mean();
    let subsampled_labels = argmax_rows(&probabilities, c);
    let labels = exec::map_range(cloud.len(), |i| {
        subsampled_labels[tree.nearest(&cloud.positions[i]).expect("non-empty tree")]
    });
    Ok(Prediction {
        subsampled: sub,
        probabilities,
        votes: acc.votes,
        subsampled_labels,
        labels,
        forward_passes: passes,
    })
}
