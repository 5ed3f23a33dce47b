//! Kernel point layouts and the linear point-to-kernel correlation.
//!
//! Layouts live in the unit ball (3D) or unit disk (2D) with point 0 fixed
//! at the origin, and are scaled to a layer radius at use. Positions come
//! from minimizing `sum_{i<j} 1/|x_i - x_j| + sum_i |x_i|^2` by projected
//! gradient descent with a backtracking step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 10_000;
pub const DISPLACEMENT_TOL: f64 = 1e-6;
/// Random starts per layout on top of the structured ones; the lowest
/// energy wins.
pub const RESTARTS: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct KernelLayout {
    pub dim: usize,
    /// Unit-scale positions; the third coordinate is zero for 2D layouts.
    pub points: Vec<[f64; 3]>,
    pub energy: f64,
    /// False when the descent hit the iteration cap.
    pub converged: bool,
}

fn norm2(x: &[f64; 3]) -> f64 {
    x[0] * x[0] + x[1] * x[1] + x[2] * x[2]
}

pub fn layout_energy(points: &[[f64; 3]]) -> f64 {
    let mut e = 0.0;
    for i in 0..points.len() {
        e += norm2(&points[i]);
        for j in i + 1..points.len() {
            let d = [
                points[i][0] - points[j][0],
                points[i][1] - points[j][1],
                points[i][2] - points[j][2],
            ];
            e += 1.0 / norm2(&d).sqrt();
        }
    }
    e
}

fn energy_gradient(points: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let mut g: Vec<[f64; 3]> = points.iter().map(|p| [2.0 * p[0], 2.0 * p[1], 2.0 * p[2]]).collect();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = [
                points[i][0] - points[j][0],
                points[i][1] - points[j][1],
                points[i][2] - points[j][2],
            ];
            let r = norm2(&d).sqrt();
            let s = 1.0 / (r * r * r);
            for k in 0..3 {
                g[i][k] -= d[k] * s;
                g[j][k] += d[k] * s;
            }
        }
    }
    g
}

fn project(p: &mut [f64; 3]) {
    let n = norm2(p).sqrt();
    if n > 1.0 {
        p.iter_mut().for_each(|v| *v /= n);
    }
}

fn random_start(k: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let mut pts = vec![[0.0; 3]];
    while pts.len() < k {
        let mut p = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0];
        if dim == 3 {
            p[2] = rng.gen_range(-1.0..1.0);
        }
        let n = norm2(&p);
        if n <= 1.0 && n > 1e-4 {
            pts.push(p);
        }
    }
    pts
}

/// Points on an inner and an outer ring (2D) or shell (3D), `inner` of them
/// on the inner one, slightly perturbed.
fn shell_start(k: usize, dim: usize, inner: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let ring = |n: usize, radius: f64, rng: &mut ChaCha8Rng| -> Vec<[f64; 3]> {
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        (0..n)
            .map(|i| {
                let mut p = if dim == 2 {
                    let a = phase + std::f64::consts::TAU * i as f64 / n as f64;
                    [radius * a.cos(), radius * a.sin(), 0.0]
                } else {
                    let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                    let r = (1.0 - z * z).sqrt();
                    let a = phase + golden * i as f64;
                    [radius * r * a.cos(), radius * r * a.sin(), radius * z]
                };
                for v in p.iter_mut().take(dim) {
                    *v += rng.gen_range(-0.02..0.02);
                }
                project(&mut p);
                p
            })
            .collect()
    };
    let mut pts = vec![[0.0; 3]];
    pts.extend(ring(inner, 0.5, rng));
    pts.extend(ring(k - 1 - inner, 0.95, rng));
    pts
}

/// Projected descent from `start`. Returns the final points, their energy,
/// whether the displacement criterion was met, and the energy trace.
pub fn descend(mut pts: Vec<[f64; 3]>, dim: usize) -> (Vec<[f64; 3]>, f64, bool, Vec<f64>) {
    let mut energy = layout_energy(&pts);
    let mut trace = vec![energy];
    let mut step = 1e-2;
    let mut converged = false;
    for _ in 0..MAX_ITERATIONS {
        let g = energy_gradient(&pts);
        let mut accepted = None;
        while step > 1e-14 {
            let mut cand = pts.clone();
            for (p, gi) in cand.iter_mut().zip(&g).skip(1) {
                for d in 0..dim {
                    p[d] -= step * gi[d];
                }
                project(p);
            }
            let e = layout_energy(&cand);
            if e <= energy {
                accepted = Some((cand, e));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, e)) = accepted else {
            converged = true;
            break;
        };
        let moved = pts
            .iter()
            .zip(&cand)
            .map(|(a, b)| norm2(&[a[0] - b[0], a[1] - b[1], a[2] - b[2]]).sqrt())
            .fold(0.0, f64::max);
        pts = cand;
        energy = e;
        trace.push(e);
        if moved < DISPLACEMENT_TOL {
            converged = true;
            break;
        }
        step *= 1.5;
    }
    (pts, energy, converged, trace)
}

/// Deterministic layout of `k` points in `dim` dimensions.
pub fn init_kernel_points(k: usize, dim: usize, seed: u64) -> Result<KernelLayout> {
    if k == 0 {
        return Err(Error::InvalidArgument("a kernel needs at least one point".into()));
    }
    if dim != 2 && dim != 3 {
        return Err(Error::InvalidArgument(format!("kernel dimension {dim} must be 2 or 3")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KernelLayout> = None;
    let mut starts: Vec<Vec<[f64; 3]>> = Vec::new();
    if k > 1 {
        for inner in 0..=(k - 1) / 2 {
            starts.push(shell_start(k, dim, inner, &mut rng));
        }
        for _ in 0..RESTARTS {
            starts.push(random_start(k, dim, &mut rng));
        }
    } else {
        starts.push(vec![[0.0; 3]]);
    }
    for start in starts {
        let (points, energy, converged, _) = descend(start, dim);
        if best.as_ref().map_or(true, |b| energy < b.energy) {
            best = Some(KernelLayout {
                dim,
                points,
                energy,
                converged,
            });
        }
    }
    let best = best.unwrap();
    if !best.converged {
        log::warn!("kernel layout (K={k}, dim={dim}) stopped at the iteration cap");
    }
    Ok(best)
}

/// `h_k = max(0, 1 - |x - p_k| / sigma)` for every kernel point.
pub fn correlation(x: &[f64; 3], kernel_points: &[[f64; 3]], sigma: f64) -> Vec<f64> {
    kernel_points
        .iter()
        .map(|p| {
            let d = norm2(&[x[0] - p[0], x[1] - p[1], x[2] - p[2]]).sqrt();
            (1.0 - d / sigma).max(0.0)
        })
        .collect()
}

impl KernelLayout {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Kernel points scaled to `radius`.
    pub fn scaled(&self, radius: f64) -> Vec<[f64; 3]> {
        self.points
            .iter()
            .map(|p| [p[0] * radius, p[1] * radius, p[2] * radius])
            .collect()
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.points.len() {
            for j in i + 1..self.points.len() {
                let (a, b) = (self.points[i], self.points[j]);
                best = best.min(norm2(&[a[0] - b[0], a[1] - b[1], a[2] - b[2]]).sqrt());
            }
        }
        best
    }

    pub fn sorted_pairwise_distances(&self) -> Vec<f64> {
        let mut d = Vec::new();
        for i in 0..self.points.len() {
            for j in i + 1..self.points.len() {
                let (a, b) = (self.points[i], self.points[j]);
                d.push(norm2(&[a[0] - b[0], a[1] - b[1], a[2] - b[2]]).sqrt());
            }
        }
        d.sort_by(f64::total_cmp);
        d
    }

    /// One line per point: `x y` or `x y z`.
    pub fn to_ascii(&self) -> String {
        let mut s = String::new();
        for p in &self.points {
            let line = if self.dim == 2 {
                format!("{:.9} {:.9}\n", p[0], p[1])
            } else {
                format!("{:.9} {:.9} {:.9}\n", p[0], p[1], p[2])
            };
            s.push_str(&line);
        }
        s
    }
}
