//! Labeled synthetic urban-like ALS tiles.
//!
//! A tile contains undulating ground, rectangular buildings with flat or
//! gabled roofs and sparse facade strips, ellipsoidal tree canopies and a
//! three-strand power line hanging above everything. Intensity distributions
//! of neighbouring classes overlap by roughly 20%.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal, UnitSphere};

use super::{PointCloud, UNASSIGNED};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum SynthClass {
    Ground = 0,
    Building = 1,
    Vegetation = 2,
    Wire = 3,
}

impl SynthClass {
    pub const NAMES: [&'static str; 4] = ["ground", "building", "vegetation", "wire"];

    fn intensity_mean(self) -> f64 {
        match self {
            SynthClass::Vegetation => 60.0,
            SynthClass::Ground => 100.0,
            SynthClass::Building => 140.0,
            SynthClass::Wire => 180.0,
        }
    }
}

/// Standard deviation of per-class intensity; adjacent class means are 40
/// apart, giving about 20% overlap.
pub const INTENSITY_SIGMA: f64 = 15.6;
pub const INTENSITY_MAX: f64 = 255.0;
const JITTER_SIGMA: f64 = 0.03;
const JITTER_CLAMP: f64 = 0.05;
/// Upper bound on the distance between a point and its generating surface.
pub const JITTER_BOUND: f64 = 0.0867;
const MIN_EXTENT: f64 = 30.0;
const MAX_OBJECT_HEIGHT: f64 = 13.0;

/// Slowly undulating terrain height.
pub fn ground_height(x: f64, y: f64) -> f64 {
    0.6 * (2.0 * PI * x / 70.0).sin()
        + 0.5 * (2.0 * PI * y / 55.0).cos()
        + 0.2 * (2.0 * PI * (x + y) / 33.0).sin()
}

/// A generating surface of the scene.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Ground,
    /// Oriented box footprint; roof height is `base + wall + gable * (hy - |ly|)`.
    Roof {
        center: [f64; 2],
        half: [f64; 2],
        angle: f64,
        base: f64,
        wall: f64,
        gable: f64,
    },
    /// Vertical wall rectangle from `a` to `b` in plan, between two heights.
    Facade {
        a: [f64; 2],
        b: [f64; 2],
        z0: f64,
        z1: f64,
    },
    Canopy {
        center: [f64; 3],
        radii: [f64; 3],
    },
    /// Catenary `z(s) = low + c (cosh((s - L/2) / c) - 1)` along `a -> b`.
    Wire {
        a: [f64; 2],
        b: [f64; 2],
        low: f64,
        c: f64,
    },
}

impl Primitive {
    pub fn class(&self) -> SynthClass {
        match self {
            Primitive::Ground => SynthClass::Ground,
            Primitive::Roof { .. } | Primitive::Facade { .. } => SynthClass::Building,
            Primitive::Canopy { .. } => SynthClass::Vegetation,
            Primitive::Wire { .. } => SynthClass::Wire,
        }
    }
}

pub struct SynthScene {
    pub cloud: PointCloud,
    pub primitives: Vec<Primitive>,
    /// Generating primitive of each point.
    pub source: Vec<usize>,
}

/// Deterministic labeled scene on `[0, extent]^2` with about `density`
/// surface points per square meter.
pub fn synth_scene(seed: u64, extent: f64, density: f64) -> Result<PointCloud> {
    Ok(synth_scene_detailed(seed, extent, density)?.cloud)
}

struct Builder {
    rng: ChaCha8Rng,
    cloud: PointCloud,
    primitives: Vec<Primitive>,
    source: Vec<usize>,
    intensity: Normal<f64>,
    jitter: Normal<f64>,
}

impl Builder {
    fn add_primitive(&mut self, p: Primitive) -> usize {
        self.primitives.push(p);
        self.primitives.len() - 1
    }

    fn emit(&mut self, prim: usize, p: [f64; 3], returns: u8) {
        let class = self.primitives[prim].class();
        let mut q = p;
        for v in q.iter_mut() {
            *v += self
                .jitter
                .sample(&mut self.rng)
                .clamp(-JITTER_CLAMP, JITTER_CLAMP);
        }
        let inten = (class.intensity_mean() + self.intensity.sample(&mut self.rng))
            .clamp(0.0, INTENSITY_MAX);
        self.cloud.positions.push(q);
        self.cloud.intensity.push(inten.round());
        self.cloud.return_count.push(returns);
        self.cloud.label.push(class as u8);
        self.cloud.segment.push(UNASSIGNED);
        self.source.push(prim);
    }

    fn poisson_count(&mut self, mean: f64) -> usize {
        // Rounded mean with a random fractional part keeps counts unbiased.
        let base = mean.floor();
        let extra = if self.rng.gen::<f64>() < mean - base { 1 } else { 0 };
        base as usize + extra
    }
}

fn rotate(v: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

/// Footprint membership for a rotated rectangle, with an optional margin.
fn in_footprint(p: [f64; 2], center: [f64; 2], half: [f64; 2], angle: f64, margin: f64) -> bool {
    let local = rotate([p[0] - center[0], p[1] - center[1]], -angle);
    local[0].abs() <= half[0] + margin && local[1].abs() <= half[1] + margin
}

/// Solves `c (cosh(L / 2c) - 1) = sag` for the catenary parameter.
fn catenary_parameter(span: f64, sag: f64) -> f64 {
    let f = |c: f64| c * ((span / (2.0 * c)).cosh() - 1.0) - sag;
    let (mut lo, mut hi) = (span / 50.0, span * 100.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn synth_scene_detailed(seed: u64, extent: f64, density: f64) -> Result<SynthScene> {
    if !(density > 0.0) {
        return Err(Error::InvalidArgument("density must be positive".into()));
    }
    if !(extent >= MIN_EXTENT) {
        return Err(Error::InvalidArgument(format!(
            "extent {extent} m is too small to place any object (minimum {MIN_EXTENT} m)"
        )));
    }
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        cloud: PointCloud::default(),
        primitives: Vec::new(),
        source: Vec::new(),
        intensity: Normal::new(0.0, INTENSITY_SIGMA).unwrap(),
        jitter: Normal::new(0.0, JITTER_SIGMA).unwrap(),
    };
    let area = extent * extent;

    // Buildings: rejection sampled so that footprints keep a 3 m gap.
    let mut footprints: Vec<([f64; 2], [f64; 2], f64)> = Vec::new();
    let target_buildings = ((area / 900.0).round() as usize).max(1);
    let mut tries = 0;
    while footprints.len() < target_buildings && tries < 200 {
        tries += 1;
        let half: [f64; 2] = [b.rng.gen_range(4.0..8.0), b.rng.gen_range(3.5..6.0)];
        let r = half[0].hypot(half[1]);
        if extent < 2.0 * r + 4.0 {
            continue;
        }
        let center = [
            b.rng.gen_range(r + 2.0..extent - r - 2.0),
            b.rng.gen_range(r + 2.0..extent - r - 2.0),
        ];
        let angle = b.rng.gen_range(0.0..PI);
        let clash = footprints.iter().any(|(c, h, _)| {
            let d = (c[0] - center[0]).hypot(c[1] - center[1]);
            d < r + h[0].hypot(h[1]) + 3.0
        });
        if !clash {
            footprints.push((center, half, angle));
        }
    }
    for &(center, half, angle) in &footprints {
        let corners: Vec<[f64; 2]> = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]]
            .iter()
            .map(|s| {
                let o = rotate([s[0] * half[0], s[1] * half[1]], angle);
                [center[0] + o[0], center[1] + o[1]]
            })
            .collect();
        let base = corners
            .iter()
            .map(|c| ground_height(c[0], c[1]))
            .fold(f64::INFINITY, f64::min);
        let wall = b.rng.gen_range(4.0..9.0);
        let gable = if b.rng.gen_bool(0.5) {
            b.rng.gen_range(0.3..0.6)
        } else {
            0.0
        };
        let roof = b.add_primitive(Primitive::Roof {
            center,
            half,
            angle,
            base,
            wall,
            gable,
        });
        let n = b.poisson_count(density * 4.0 * half[0] * half[1]);
        for _ in 0..n {
            let l = [
                b.rng.gen_range(-half[0]..half[0]),
                b.rng.gen_range(-half[1]..half[1]),
            ];
            let o = rotate(l, angle);
            let z = base + wall + gable * (half[1] - l[1].abs());
            b.emit(roof, [center[0] + o[0], center[1] + o[1], z], 1);
        }
        for k in 0..4 {
            let (a, c) = (corners[k], corners[(k + 1) % 4]);
            let len = (c[0] - a[0]).hypot(c[1] - a[1]);
            let facade = b.add_primitive(Primitive::Facade {
                a,
                b: c,
                z0: base,
                z1: base + wall,
            });
            let n = b.poisson_count(0.25 * density * len * wall);
            for _ in 0..n {
                let t = b.rng.gen::<f64>();
                let z = base + b.rng.gen::<f64>() * wall;
                b.emit(
                    facade,
                    [a[0] + t * (c[0] - a[0]), a[1] + t * (c[1] - a[1]), z],
                    1,
                );
            }
        }
    }

    // Trees, kept clear of building footprints.
    let target_trees = ((area / 250.0).round() as usize).max(1);
    let mut trees = 0;
    let mut tries = 0;
    while trees < target_trees && tries < 400 {
        tries += 1;
        let a = b.rng.gen_range(2.0..3.5);
        let c = b.rng.gen_range(1.5..3.0);
        let trunk = b.rng.gen_range(2.0..4.0);
        let xy = [b.rng.gen_range(a..extent - a), b.rng.gen_range(a..extent - a)];
        if footprints
            .iter()
            .any(|&(fc, fh, fa)| in_footprint(xy, fc, fh, fa, a + 1.0))
        {
            continue;
        }
        trees += 1;
        let g = ground_height(xy[0], xy[1]);
        let center = [xy[0], xy[1], g + trunk + c];
        let radii = [a, a * b.rng.gen_range(0.8..1.2), c];
        let canopy = b.add_primitive(Primitive::Canopy { center, radii });
        let n = b.poisson_count(density * PI * radii[0] * radii[1] * 1.3);
        let mut emitted = 0;
        while emitted < n {
            let d: [f64; 3] = UnitSphere.sample(&mut b.rng);
            if d[2] < -0.3 {
                continue;
            }
            emitted += 1;
            let returns = b.rng.gen_range(1..=3);
            b.emit(
                canopy,
                [
                    center[0] + radii[0] * d[0],
                    center[1] + radii[1] * d[1],
                    center[2] + radii[2] * d[2],
                ],
                returns,
            );
        }
    }

    // Ground, hidden under roofs.
    let ground = b.add_primitive(Primitive::Ground);
    let n = b.poisson_count(density * area);
    for _ in 0..n {
        let x = b.rng.gen_range(0.0..extent);
        let y = b.rng.gen_range(0.0..extent);
        if footprints
            .iter()
            .any(|&(fc, fh, fa)| in_footprint([x, y], fc, fh, fa, 0.0))
        {
            continue;
        }
        b.emit(ground, [x, y, ground_height(x, y)], 1);
    }

    // Power line: three strands crossing the tile above every object.
    let angle = b.rng.gen_range(0.0..PI);
    let dir = [angle.cos(), angle.sin()];
    let normal = [-dir[1], dir[0]];
    let mid = [
        extent * 0.5 + b.rng.gen_range(-0.2..0.2) * extent,
        extent * 0.5 + b.rng.gen_range(-0.2..0.2) * extent,
    ];
    let half_span = extent * 0.75;
    let span = 2.0 * half_span;
    let sag = b.rng.gen_range(1.0..2.5);
    let c = catenary_parameter(span, sag);
    let ground_peak = 1.3;
    let low = ground_peak + MAX_OBJECT_HEIGHT + 2.0;
    let linear_density = 0.8 * density.sqrt();
    for strand in [-1.0, 0.0, 1.0] {
        let off = [normal[0] * 0.8 * strand, normal[1] * 0.8 * strand];
        let a = [
            mid[0] - dir[0] * half_span + off[0],
            mid[1] - dir[1] * half_span + off[1],
        ];
        let e = [
            mid[0] + dir[0] * half_span + off[0],
            mid[1] + dir[1] * half_span + off[1],
        ];
        let wire = b.add_primitive(Primitive::Wire { a, b: e, low, c });
        let n = b.poisson_count(linear_density * span);
        for _ in 0..n {
            let s = b.rng.gen_range(0.0..span);
            let x = a[0] + dir[0] * s;
            let y = a[1] + dir[1] * s;
            if !(0.0..=extent).contains(&x) || !(0.0..=extent).contains(&y) {
                continue;
            }
            let z = low + c * (((s - half_span) / c).cosh() - 1.0);
            let returns = b.rng.gen_range(1..=2);
            b.emit(wire, [x, y, z], returns);
        }
    }

    if b.cloud.is_empty() {
        return Err(Error::InvalidArgument("scene produced no points".into()));
    }
    Ok(SynthScene {
        cloud: b.cloud,
        primitives: b.primitives,
        source: b.source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force distance from `p` to a primitive's surface by dense
    /// sampling of the surface near `p`.
    fn surface_distance(prim: &Primitive, p: [f64; 3]) -> f64 {
        let dist = |q: [f64; 3]| {
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
        };
        let mut best = f64::INFINITY;
        let steps = 60;
        match *prim {
            Primitive::Ground => {
                for i in 0..=steps {
                    for j in 0..=steps {
                        let x = p[0] - 0.2 + 0.4 * i as f64 / steps as f64;
                        let y = p[1] - 0.2 + 0.4 * j as f64 / steps as f64;
                        best = best.min(dist([x, y, ground_height(x, y)]));
                    }
                }
            }
            Primitive::Roof {
                center,
                half,
                angle,
                base,
                wall,
                gable,
            } => {
                let l = rotate([p[0] - center[0], p[1] - center[1]], -angle);
                for i in 0..=steps {
                    for j in 0..=steps {
                        let lx = (l[0] - 0.2 + 0.4 * i as f64 / steps as f64).clamp(-half[0], half[0]);
                        let ly = (l[1] - 0.2 + 0.4 * j as f64 / steps as f64).clamp(-half[1], half[1]);
                        let o = rotate([lx, ly], angle);
                        let z = base + wall + gable * (half[1] - ly.abs());
                        best = best.min(dist([center[0] + o[0], center[1] + o[1], z]));
                    }
                }
            }
            Primitive::Facade { a, b, z0, z1 } => {
                for i in 0..=400 {
                    let t = i as f64 / 400.0;
                    let x = a[0] + t * (b[0] - a[0]);
                    let y = a[1] + t * (b[1] - a[1]);
                    let z = p[2].clamp(z0, z1);
                    best = best.min(dist([x, y, z]));
                }
            }
            Primitive::Canopy { center, radii } => {
                for i in 0..=200 {
                    for j in 0..=400 {
                        let th = PI * i as f64 / 200.0;
                        let ph = 2.0 * PI * j as f64 / 400.0;
                        best = best.min(dist([
                            center[0] + radii[0] * th.sin() * ph.cos(),
                            center[1] + radii[1] * th.sin() * ph.sin(),
                            center[2] + radii[2] * th.cos(),
                        ]));
                    }
                }
            }
            Primitive::Wire { a, b, low, c } => {
                let span = (b[0] - a[0]).hypot(b[1] - a[1]);
                let n = 20_000;
                for i in 0..=n {
                    let s = span * i as f64 / n as f64;
                    let t = s / span;
                    let z = low + c * (((s - span / 2.0) / c).cosh() - 1.0);
                    best = best.min(dist([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), z]));
                }
            }
        }
        best
    }

    #[test]
    fn same_seed_same_cloud() {
        let a = synth_scene(7, 40.0, 2.0).unwrap();
        let b = synth_scene(7, 40.0, 2.0).unwrap();
        assert_eq!(a, b);
        let c = synth_scene(8, 40.0, 2.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn tiny_extent_is_an_error() {
        assert!(synth_scene(1, 5.0, 2.0).is_err());
        assert!(synth_scene(1, 50.0, 0.0).is_err());
    }

    #[test]
    fn wires_are_above_the_ground_below_them() {
        let c = synth_scene(7, 50.0, 4.0).unwrap();
        let wire = SynthClass::Wire as u8;
        let ground = SynthClass::Ground as u8;
        let mut checked = 0;
        for i in (0..c.len()).filter(|&i| c.label[i] == wire) {
            let w = c.positions[i];
            for j in (0..c.len()).filter(|&j| c.label[j] == ground) {
                let g = c.positions[j];
                if (g[0] - w[0]).hypot(g[1] - w[1]) < 1.0 {
                    assert!(w[2] > g[2]);
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn all_classes_present_and_imbalanced() {
        let c = synth_scene(3, 60.0, 5.0).unwrap();
        let counts = c.class_counts(4);
        assert!(counts.iter().all(|&n| n > 0), "{counts:?}");
        assert!(counts[0] >= 5 * counts[3], "{counts:?}");
    }

    #[test]
    fn points_lie_on_their_generating_surface() {
        let s = synth_scene_detailed(11, 40.0, 1.0).unwrap();
        for (i, &src) in s.source.iter().enumerate().step_by(7) {
            let d = surface_distance(&s.primitives[src], s.cloud.positions[i]);
            assert!(d <= JITTER_BOUND + 0.01, "point {i} is {d} m from {:?}", s.primitives[src]);
            assert_eq!(s.cloud.label[i], s.primitives[src].class() as u8);
        }
    }
}
