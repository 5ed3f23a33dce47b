//! Spatial and channel self-attention with the classification layer.

use std::ops::Range;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Linear;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub channels: usize,
    pub classes: usize,
    pub fc_u: Linear,
    pub fc_v: Linear,
    pub fc_t: Linear,
    /// Scalar scale of the spatial branch, zero at init.
    pub alpha: ParamId,
    /// Scalar scale of the channel branch, zero at init.
    pub beta: ParamId,
    pub head: Linear,
    /// When false only the classification layer runs.
    pub enabled: bool,
}

/// Rows of each sphere that take part in attention: all of them when the
/// sphere has at most `cap` rows, otherwise a seeded sorted subsample.
pub fn attention_subsample(spheres: &[Range<usize>], cap: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    spheres
        .iter()
        .map(|r| {
            if r.len() <= cap {
                r.clone().collect()
            } else {
                let mut idx: Vec<usize> = sample(&mut rng, r.len(), cap)
                    .into_iter()
                    .map(|i| r.start + i)
                    .collect();
                idx.sort_unstable();
                idx
            }
        })
        .collect()
}

impl Attention {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        classes: usize,
        enabled: bool,
        rng: &mut R,
    ) -> Self {
        let (fc_u, fc_v, fc_t, alpha, beta) = (
            Linear::new(store, &format!("{name}.fc_u"), channels, channels, true, rng),
            Linear::new(store, &format!("{name}.fc_v"), channels, channels, true, rng),
            Linear::new(store, &format!("{name}.fc_t"), channels, channels, true, rng),
            store.add(format!("{name}.alpha"), Tensor::zeros(&[1])),
            store.add(format!("{name}.beta"), Tensor::zeros(&[1])),
        );
        let head = Linear::new(store, &format!("{name}.head"), channels, classes, false, rng);
        Attention {
            channels,
            classes,
            fc_u,
            fc_v,
            fc_t,
            alpha,
            beta,
            head,
            enabled,
        }
    }

    /// Attention weights `softmax_j(U_i . V_j)` and the scaled update
    /// `alpha * SA T`.
    pub fn spatial_parts<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f: Var) -> Result<(Var, Var)> {
        let u = self.fc_u.forward(g, store, f)?;
        let v = self.fc_v.forward(g, store, f)?;
        let t = self.fc_t.forward(g, store, f)?;
        let scores = g.matmul_nt(u, v)?;
        let sa = g.softmax_rows(scores)?;
        let mixed = g.matmul(sa, t)?;
        let alpha = g.param(store, self.alpha);
        Ok((sa, g.scale_by(mixed, alpha)?))
    }

    /// Channel weights `softmax_j(F_i . F_j)` over channel columns and the
    /// scaled update `beta * F CA^T`.
    pub fn channel_parts<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f: Var) -> Result<(Var, Var)> {
        let ft = g.transpose(f)?;
        let gram = g.matmul(ft, f)?;
        let ca = g.softmax_rows(gram)?;
        let mixed = g.matmul_nt(f, ca)?;
        let beta = g.param(store, self.beta);
        Ok((ca, g.scale_by(mixed, beta)?))
    }

    pub fn spatial<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f: Var) -> Result<Var> {
        let (_, d) = self.spatial_parts(g, store, f)?;
        g.add(d, f)
    }

    pub fn channel<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f: Var) -> Result<Var> {
        let (_, d) = self.channel_parts(g, store, f)?;
        g.add(d, f)
    }

    /// Class logits `(F_sa + F_ca) W`. Attention runs within each row set of
    /// `subsets`; rows outside every subset pass through unchanged.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        f: Var,
        subsets: &[Vec<usize>],
    ) -> Result<Var> {
        let (n, c) = (g.shape(f)[0], g.shape(f)[1]);
        if c != self.channels {
            return Err(Error::Shape(format!(
                "attention expects {} channels, got {c}",
                self.channels
            )));
        }
        if !self.enabled {
            return self.head.forward(g, store, f);
        }
        let mut rows = Vec::new();
        let mut d_sa = Vec::new();
        let mut d_ca = Vec::new();
        for idx in subsets.iter().filter(|s| !s.is_empty()) {
            let sub = g.gather_rows(f, Arc::new(idx.clone()))?;
            d_sa.push(self.spatial_parts(g, store, sub)?.1);
            d_ca.push(self.channel_parts(g, store, sub)?.1);
            rows.extend_from_slice(idx);
        }
        let (f_sa, f_ca) = if rows.is_empty() {
            (f, f)
        } else {
            let rows = Arc::new(rows);
            let dsa = g.concat_rows(&d_sa)?;
            let dca = g.concat_rows(&d_ca)?;
            let dsa = g.scatter_mean(dsa, rows.clone(), n)?;
            let dca = g.scatter_mean(dca, rows, n)?;
            (g.add(f, dsa)?, g.add(f, dca)?)
        };
        let sum = g.add(f_sa, f_ca)?;
        self.head.forward(g, store, sum)
    }
}
