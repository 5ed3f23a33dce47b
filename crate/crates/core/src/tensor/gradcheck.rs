//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Relative errors use `max(|analytic|, |numeric|, DENOM_FLOOR)` as the
/// denominator so that vanishing gradients are compared absolutely.
pub const DENOM_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tolerance: f64,
    /// Seeds the output projection and coordinate sampling.
    pub seed: u64,
    /// Check at most this many coordinates per input (all when `None`).
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-6,
            tolerance: 1e-5,
            seed: 0,
            max_coords: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOutcome {
    pub max_rel_error: f64,
    pub coordinates: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

fn scalar_output<F>(f: &mut F, g: &mut Graph<f64>, vars: &[Var], proj_seed: u64) -> Result<Var>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let out = f(g, vars)?;
    if g.value(out).len() == 1 {
        return Ok(out);
    }
    let shape = g.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(proj_seed);
    let r: Vec<f64> = (0..g.value(out).len())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let rv = g.constant(Tensor::new(shape, r)?);
    let prod = g.mul(out, rv)?;
    g.sum_all(prod)
}

fn evaluate<F>(f: &mut F, inputs: &[Tensor<f64>], proj_seed: u64) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = scalar_output(f, &mut g, &vars, proj_seed)?;
    Ok(g.value(out).item())
}

/// Compares tape gradients of `f` with respect to every input against
/// central differences `(f(x + eps) - f(x - eps)) / 2 eps`.
///
/// Non-scalar outputs are reduced by a fixed random projection. Returns the
/// maximum relative error, or an error naming the first coordinate that
/// exceeds the tolerance.
pub fn finite_difference_check<F>(
    mut f: F,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckOutcome>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let proj_seed = opts.seed ^ 0x9e37_79b9_7f4a_7c15;
    let mut g = Graph::new(true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = scalar_output(&mut f, &mut g, &vars, proj_seed)?;
    let grads = g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    let mut coordinates = 0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let zeros = Tensor::zeros(input.shape());
        let analytic = grads.get(vars[i]).unwrap_or(&zeros);
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < input.len() => {
                let mut c = sample(&mut rng, input.len(), m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..input.len()).collect(),
        };
        for j in coords {
            let x0 = input.data()[j];
            work[i].data_mut()[j] = x0 + opts.eps;
            let plus = evaluate(&mut f, &work, proj_seed)?;
            work[i].data_mut()[j] = x0 - opts.eps;
            let minus = evaluate(&mut f, &work, proj_seed)?;
            work[i].data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = relative_error(analytic.data()[j], numeric);
            coordinates += 1;
            if err > opts.tolerance {
                return Err(Error::GradCheck {
                    location: format!(
                        "input {i} coordinate {j} (analytic {:.6e}, numeric {:.6e})",
                        analytic.data()[j],
                        numeric
                    ),
                    error: err,
                    tolerance: opts.tolerance,
                });
            }
            worst = worst.max(err);
        }
    }
    Ok(GradCheckOutcome {
        max_rel_error: worst,
        coordinates,
    })
}
