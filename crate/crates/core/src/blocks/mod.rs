//! Network building blocks.
//!
//! Every block registers its parameters in a [`ParamStore`] at construction
//! and records its forward pass on a [`Graph`].

mod attention;
mod hybrid;
mod kpconv;
mod segecc;

pub use attention::{attention_subsample, Attention};
pub use hybrid::{BranchMode, ConvTables, HybridBlock};
pub use kpconv::{corr_table, KpConv};
pub use segecc::{SegContext, SegEcc};

use rand::Rng;

use crate::error::Result;
use crate::tensor::{BufferId, Graph, ParamId, ParamStore, Real, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.1;
pub const BN_EPS: f64 = 1e-6;

/// Dense `x W (+ b)` on the channel axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / cin.max(1) as f64).sqrt();
        let weight = store.add_normal(format!("{name}.weight"), &[cin, cout], std, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Linear {
            weight,
            bias,
            cin,
            cout,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Batch normalization over points with a learned affine map.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub buffer: BufferId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            buffer: store.add_buffer(format!("{name}.running"), channels),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.batch_norm(x, gamma, beta, store, self.buffer, T::lit(BN_EPS))
    }
}

pub(crate) fn leaky<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    g.leaky_relu(x, T::lit(LEAKY_SLOPE))
}

/// Linear map, batch normalization and leaky rectifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Unary {
    pub linear: Linear,
    pub bn: BatchNorm,
}

impl Unary {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Unary {
            linear: Linear::new(store, name, cin, cout, false, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.linear.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y)?;
        leaky(g, y)
    }
}

/// Binds every parameter of `store` to a fresh graph variable so that
/// gradients with respect to parameters can be checked numerically.
pub fn bind_all<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, vars: &[Var]) {
    for (id, &v) in store.ids().zip(vars) {
        g.bind_param(id, v);
    }
}
