//! Brute-force inside/outside oracle for extracted meshes.
//!
//! Fields are smooth sums of sinusoids with gradient norm at most 1, so every
//! limit slack and hence the composite margin is 1-Lipschitz.

use std::collections::HashMap;

use lodstream_core::extract::{extract_surface, BlockGrid, MarginGrid, Surface};
use lodstream_core::math::{Aabb, Vec3};
use lodstream_core::model::{composite_margin, Limit, SubVolumeSpec};
use rand::rngs::StdRng;
use rand::Rng;

pub const FIELD_NAMES: [&str; 3] = ["a", "b", "c"];

pub struct Wave {
    amp: f64,
    k: Vec3,
    phase: f64,
}

pub struct Field(Vec<Wave>);

impl Field {
    pub fn random(rng: &mut StdRng) -> Self {
        let n = rng.gen_range(2..5);
        let mut waves: Vec<Wave> = (0..n)
            .map(|_| {
                let dir = Vec3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
                .try_normalize()
                .unwrap_or(Vec3::new(1.0, 0.0, 0.0));
                Wave {
                    amp: rng.gen_range(0.5..4.0),
                    k: dir * rng.gen_range(0.15..0.7),
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                }
            })
            .collect();
        let slope: f64 = waves.iter().map(|w| w.amp * w.k.length()).sum();
        for w in &mut waves {
            w.amp /= slope;
        }
        Self(waves)
    }

    pub fn at(&self, p: Vec3) -> f64 {
        self.0
            .iter()
            .map(|w| w.amp * (w.k.dot(p) + w.phase).sin())
            .sum()
    }
}

/// A random band on field `name` wide enough to leave interior and exterior.
pub fn random_limit(rng: &mut StdRng, name: &str) -> Limit {
    let lo = rng.gen_range(-5.0..-0.5);
    Limit::new(name, lo as f32, (lo + rng.gen_range(3.0..9.0)) as f32)
}

pub fn margin_at(fields: &[Field], spec: &SubVolumeSpec, p: Vec3) -> f64 {
    let values: HashMap<&str, f64> = FIELD_NAMES
        .iter()
        .zip(fields)
        .map(|(n, f)| (*n, f.at(p)))
        .collect();
    composite_margin(&values, spec).unwrap()
}

/// Surface of the margin sampled on a unit grid of `side` samples, and the same
/// surface closed off at the grid faces by padding with a negative layer.
pub fn closed_surface(fields: &[Field], spec: &SubVolumeSpec, side: usize) -> (Surface, Surface) {
    let grid = BlockGrid::uniform(
        Aabb::new(Vec3::splat(0.0), Vec3::splat((side - 1) as f64)),
        side,
    );
    let margin = MarginGrid::from_fn(side, |x, y, z| {
        margin_at(fields, spec, grid.position(x, y, z))
    });
    let open = extract_surface(&margin, &grid);

    let padded_side = side + 2;
    let padded_grid = BlockGrid::uniform(
        Aabb::new(Vec3::splat(-1.0), Vec3::splat(side as f64)),
        padded_side,
    );
    let inner = |i: usize| (1..=side).contains(&i);
    let padded = MarginGrid::from_fn(padded_side, |x, y, z| {
        if inner(x) && inner(y) && inner(z) {
            margin.at(x - 1, y - 1, z - 1)
        } else {
            -1e3
        }
    });
    (open, extract_surface(&padded, &padded_grid))
}

/// Möller–Trumbore hit count along the half-line `origin + t·dir`, t > 0.
pub fn ray_hits(surface: &Surface, origin: Vec3, dir: Vec3) -> usize {
    surface
        .positions
        .chunks_exact(3)
        .filter(|t| {
            let [a, b, c] = [t[0], t[1], t[2]].map(Vec3::from_f32);
            let (e1, e2) = (b - a, c - a);
            let p = dir.cross(e2);
            let det = e1.dot(p);
            if det.abs() < 1e-14 {
                return false;
            }
            let s = origin - a;
            let u = s.dot(p) / det;
            if !(0.0..=1.0).contains(&u) {
                return false;
            }
            let q = s.cross(e1);
            let v = dir.dot(q) / det;
            if v < 0.0 || u + v > 1.0 {
                return false;
            }
            e2.dot(q) / det > 0.0
        })
        .count()
}

/// Every directed edge is matched by its reverse: closed and consistently oriented.
pub fn directed_edges_balance(surface: &Surface) -> bool {
    let mut balance: HashMap<([u32; 3], [u32; 3]), i32> = HashMap::new();
    for t in surface.positions.chunks_exact(3) {
        for k in 0..3 {
            let a = t[k].map(f32::to_bits);
            let b = t[(k + 1) % 3].map(f32::to_bits);
            *balance.entry((a, b)).or_default() += 1;
            *balance.entry((b, a)).or_default() -= 1;
        }
    }
    balance.values().all(|&n| n == 0)
}

/// Ray direction off every grid plane and diagonal.
pub fn parity_direction() -> Vec3 {
    Vec3::new(1.0, 1e-3 * 2f64.sqrt(), 1e-3 * 3f64.sqrt())
}

/// Classifies every cell centre whose margin exceeds one cell diagonal.
/// Returns (inside, outside) counts, or the first disagreement.
pub fn check_parity(
    fields: &[Field],
    spec: &SubVolumeSpec,
    side: usize,
    closed: &Surface,
) -> Result<(usize, usize), String> {
    let h = 3f64.sqrt();
    let dir = parity_direction();
    let mut counts = (0, 0);
    for z in 0..side - 1 {
        for y in 0..side - 1 {
            for x in 0..side - 1 {
                let c = Vec3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5);
                let m = margin_at(fields, spec, c);
                if m.abs() <= h {
                    continue;
                }
                let inside = ray_hits(closed, c, dir) % 2 == 1;
                if inside != (m > 0.0) {
                    return Err(format!(
                        "centre {c:?} margin {m} classified inside={inside}"
                    ));
                }
                if inside {
                    counts.0 += 1;
                } else {
                    counts.1 += 1;
                }
            }
        }
    }
    Ok(counts)
}
